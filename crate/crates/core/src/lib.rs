//! Non-equilibrium annealed adjoint sampling.
//!
//! A diffusion sampler that transports an isotropic Gaussian to an
//! unnormalised target density: a learned prior stage on `[-1, 0]`
//! followed by a controlled, annealed Langevin stage on `[0, 1]`, trained
//! by regressing controls onto lean adjoint targets.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod iws;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use error::{NaasError, Result};
pub use scalar::Scalar;

pub type Energy = energy::EnergyModel<f64>;
pub type Potential = energy::AnnealedPotential<f64>;
pub type Schedule = schedule::NoiseSchedule<f64>;
pub type Net = net::ControlNet<f64>;
pub type Traj = dynamics::Trajectory<f64>;
