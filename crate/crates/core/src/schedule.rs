//! Diffusion coefficients for the annealed stage.

use crate::error::{NaasError, Result};
use crate::scalar::Scalar;

/// `σ_t` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSchedule<T> {
    /// `σ_t = σ_min^t σ_max^(1-t) sqrt(2 log(σ_max / σ_min))`.
    Geometric {
        sigma_min: T,
        sigma_max: T,
    },
    Constant {
        sigma: T,
    },
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn geometric(sigma_min: T, sigma_max: T) -> Result<Self> {
        if !(sigma_min > T::zero() && sigma_min < sigma_max) {
            return Err(NaasError::InvalidInput(format!(
                "geometric schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(Self::Geometric {
            sigma_min,
            sigma_max,
        })
    }

    pub fn constant(sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) {
            return Err(NaasError::InvalidInput(format!(
                "constant schedule needs sigma > 0, got {sigma}"
            )));
        }
        Ok(Self::Constant { sigma })
    }

    pub fn sigma(&self, t: T) -> Result<T> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(NaasError::InvalidInput(format!("time {t} outside [0, 1]")));
        }
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: T) -> T {
        match *self {
            Self::Geometric {
                sigma_min,
                sigma_max,
            } => {
                let scale = (T::lit(2.0) * (sigma_max / sigma_min).ln()).sqrt();
                sigma_min.powf(t) * sigma_max.powf(T::one() - t) * scale
            }
            Self::Constant { sigma } => sigma,
        }
    }
}
