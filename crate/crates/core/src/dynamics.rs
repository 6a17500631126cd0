//! Two-stage controlled SDE, lean adjoint and Brownian-bridge conditional.
//!
//! On `[-1, 0)` paths start at the origin and follow
//! `dX = σ̄ v(t, X) dt + σ̄ dW`; on `[0, 1]` they follow the annealed
//! dynamics `dX = (-(σ_t²/2) ∇U_t(X) + σ_t u(t, X)) dt + σ_t dW`.
//! Both stages use Euler–Maruyama on uniform grids. The lean adjoint is
//! integrated backward with explicit Euler on the annealed grid.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::energy::AnnealedPotential;
use crate::error::{NaasError, Result};
use crate::net::ControlNet;
use crate::rng::StreamSeed;
use crate::scalar::{clip_norm, norm, Scalar};
use crate::schedule::NoiseSchedule;

/// Paths whose state norm exceeds this bound are frozen and flagged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

const CHUNK: usize = 4096;

/// Uniform grid with `n_prior` steps on `[-1, 0]` and `n_anneal` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    pub n_prior: usize,
    pub n_anneal: usize,
}

impl TimeGrid {
    pub fn new(n_prior: usize, n_anneal: usize) -> Result<Self> {
        if n_prior == 0 || n_anneal == 0 {
            return Err(NaasError::InvalidInput("step counts must be >= 1".into()));
        }
        Ok(Self { n_prior, n_anneal })
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.n_prior + self.n_anneal + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `t = 0`.
    pub fn boundary(&self) -> usize {
        self.n_prior
    }

    pub fn time<T: Scalar>(&self, k: usize) -> T {
        if k <= self.n_prior {
            T::from_usize_lossy(k) / T::from_usize_lossy(self.n_prior) - T::one()
        } else {
            T::from_usize_lossy(k - self.n_prior) / T::from_usize_lossy(self.n_anneal)
        }
    }

    /// Time of annealed step `j` (grid index `boundary + j`).
    pub fn anneal_time<T: Scalar>(&self, j: usize) -> T {
        T::from_usize_lossy(j) / T::from_usize_lossy(self.n_anneal)
    }

    pub fn dt_prior<T: Scalar>(&self) -> T {
        T::from_usize_lossy(self.n_prior).recip()
    }

    pub fn dt_anneal<T: Scalar>(&self) -> T {
        T::from_usize_lossy(self.n_anneal).recip()
    }
}

/// One simulated path with the Brownian increments that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    grid: TimeGrid,
    dim: usize,
    states: Vec<T>,
    increments: Vec<T>,
    diverged: bool,
}

impl<T: Scalar> Trajectory<T> {
    /// A noise-free path given by its states (`grid.len()` rows of `dim`),
    /// e.g. to solve the adjoint along a prescribed curve.
    pub fn from_states(grid: TimeGrid, dim: usize, states: Vec<T>) -> Result<Self> {
        if dim == 0 || states.len() != grid.len() * dim {
            return Err(NaasError::InvalidInput(format!(
                "expected {} states of dimension {dim}, got {} values",
                grid.len(),
                states.len()
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(NaasError::InvalidInput("states must be finite".into()));
        }
        Ok(Self {
            grid,
            dim,
            increments: vec![T::zero(); (grid.len() - 1) * dim],
            states,
            diverged: false,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, k: usize) -> &[T] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// `ΔW` applied on step `k -> k + 1`.
    pub fn increment(&self, k: usize) -> &[T] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// `X_0`, the state at the stage boundary.
    pub fn boundary_state(&self) -> &[T] {
        self.state(self.grid.boundary())
    }

    pub fn terminal(&self) -> &[T] {
        self.state(self.grid.len() - 1)
    }

    /// True if the path left the divergence bound and was frozen.
    pub fn diverged(&self) -> bool {
        self.diverged
    }
}

/// Lean adjoint `a(t_k)` on the annealed grid, `k = 0..=n_anneal`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath<T> {
    n_anneal: usize,
    dim: usize,
    adjoints: Vec<T>,
}

impl<T: Scalar> AdjointPath<T> {
    pub fn n_anneal(&self) -> usize {
        self.n_anneal
    }

    pub fn at(&self, j: usize) -> &[T] {
        &self.adjoints[j * self.dim..(j + 1) * self.dim]
    }

    pub fn max_norm(&self) -> T {
        (0..=self.n_anneal)
            .map(|j| norm(self.at(j)))
            .fold(T::zero(), T::max)
    }
}

/// Settings shared by every simulation of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig<T> {
    pub grid: TimeGrid,
    /// Prior-stage diffusion σ̄.
    pub sigma_bar: T,
    /// When false, Brownian increments are zero (deterministic test mode).
    pub noise: bool,
}

impl<T: Scalar> SimConfig<T> {
    pub fn new(n_prior: usize, n_anneal: usize, sigma_bar: T) -> Result<Self> {
        if !(sigma_bar > T::zero()) {
            return Err(NaasError::InvalidInput("sigma_bar must be positive".into()));
        }
        Ok(Self {
            grid: TimeGrid::new(n_prior, n_anneal)?,
            sigma_bar,
            noise: true,
        })
    }
}

/// Draws `N(0, I)` in double precision and converts.
pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

struct Batch<T> {
    x: Array2<T>,
    diverged: Vec<bool>,
    states: Option<Vec<Vec<T>>>,
    increments: Option<Vec<Vec<T>>>,
}

/// Drives `n` paths through both stages. `noise(path, step, out)` writes the
/// increment for a step; it is called only for paths that have not diverged.
#[allow(clippy::too_many_arguments)]
fn integrate<T, F>(
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SimConfig<T>,
    n: usize,
    record: bool,
    anneal: bool,
    mut noise: F,
) -> Result<Batch<T>>
where
    T: Scalar,
    F: FnMut(usize, usize, &mut [T]),
{
    let d = pot.dim();
    let grid = cfg.grid;
    let steps = if anneal {
        grid.n_prior + grid.n_anneal
    } else {
        grid.n_prior
    };
    let mut batch = Batch {
        x: Array2::zeros((n, d)),
        diverged: vec![false; n],
        states: record.then(|| {
            (0..n)
                .map(|_| Vec::with_capacity((steps + 1) * d))
                .collect()
        }),
        increments: record.then(|| (0..n).map(|_| Vec::with_capacity(steps * d)).collect()),
    };
    let bound = T::lit(DIVERGENCE_BOUND);
    let mut dw = vec![T::zero(); d];
    let mut grad = vec![T::zero(); d];
    let mut scratch = vec![T::zero(); d];
    let mut times = vec![T::zero(); n];
    if let Some(states) = batch.states.as_mut() {
        for s in states.iter_mut() {
            s.extend(std::iter::repeat_n(T::zero(), d));
        }
    }
    for k in 0..steps {
        let in_prior = k < grid.n_prior;
        let t: T = grid.time(k);
        let (dt, sigma) = if in_prior {
            (grid.dt_prior::<T>(), cfg.sigma_bar)
        } else {
            (grid.dt_anneal::<T>(), sched.sigma_unchecked(t))
        };
        let net = if in_prior { v } else { u };
        times.iter_mut().for_each(|s| *s = t);
        let control = net.map(|net| net.forward_batch(&times, batch.x.view()));
        let half_s2 = T::lit(0.5) * sigma * sigma;
        for i in 0..n {
            let frozen = batch.diverged[i];
            if frozen {
                dw.iter_mut().for_each(|w| *w = T::zero());
            } else if cfg.noise {
                noise(i, k, &mut dw);
            } else {
                dw.iter_mut().for_each(|w| *w = T::zero());
            }
            if !frozen {
                let mut row = batch.x.row_mut(i);
                let x = row.as_slice_mut().expect("standard layout");
                if !in_prior {
                    pot.drift_grad_into(t, x, &mut grad, &mut scratch);
                }
                for j in 0..d {
                    let mut drift = T::zero();
                    if let Some(c) = control.as_ref() {
                        drift += sigma * c[[i, j]];
                    }
                    if !in_prior {
                        drift -= half_s2 * grad[j];
                    }
                    x[j] += drift * dt + sigma * dw[j];
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(NaasError::Simulation {
                        stage: if in_prior { "prior" } else { "annealed" },
                        step: k,
                    });
                }
                if norm(x) > bound {
                    batch.diverged[i] = true;
                }
            }
            if let (Some(states), Some(incs)) = (batch.states.as_mut(), batch.increments.as_mut()) {
                states[i].extend(batch.x.row(i).iter().copied());
                incs[i].extend_from_slice(&dw);
            }
        }
    }
    Ok(batch)
}

fn draw_noise<T: Scalar>(
    rngs: &mut [rand_chacha::ChaCha8Rng],
    grid: TimeGrid,
) -> impl FnMut(usize, usize, &mut [T]) + '_ {
    let sd_prior = grid.dt_prior::<f64>().sqrt();
    let sd_anneal = grid.dt_anneal::<f64>().sqrt();
    move |i, k, out| {
        let sd = if k < grid.n_prior {
            sd_prior
        } else {
            sd_anneal
        };
        for w in out.iter_mut() {
            *w = T::lit(sd * rngs[i].sample::<f64, _>(StandardNormal));
        }
    }
}

/// Simulates `n_paths` full trajectories on `[-1, 1]`. Path `i` draws its
/// noise from `streams.path(first_index + i)`. `None` controls are zero.
#[allow(clippy::too_many_arguments)]
pub fn simulate<T: Scalar>(
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SimConfig<T>,
    streams: StreamSeed,
    first_index: usize,
    n_paths: usize,
) -> Result<Vec<Trajectory<T>>> {
    check_nets(v, u, pot.dim())?;
    let mut out = Vec::with_capacity(n_paths);
    for start in (0..n_paths).step_by(CHUNK) {
        let n = CHUNK.min(n_paths - start);
        let mut rngs: Vec<_> = (0..n)
            .map(|i| streams.path(first_index + start + i))
            .collect();
        let batch = integrate(
            v,
            u,
            pot,
            sched,
            cfg,
            n,
            true,
            true,
            draw_noise(&mut rngs, cfg.grid),
        )?;
        let states = batch.states.expect("recorded");
        let incs = batch.increments.expect("recorded");
        for ((s, w), diverged) in states.into_iter().zip(incs).zip(batch.diverged) {
            out.push(Trajectory {
                grid: cfg.grid,
                dim: pot.dim(),
                states: s,
                increments: w,
                diverged,
            });
        }
    }
    Ok(out)
}

/// Terminal states `X_1` (or `X_0` when `anneal` is false) without recording
/// paths. Rows of diverged paths are returned as they were frozen.
#[allow(clippy::too_many_arguments)]
pub fn simulate_endpoints<T: Scalar>(
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SimConfig<T>,
    streams: StreamSeed,
    n_paths: usize,
    anneal: bool,
) -> Result<(Array2<T>, Vec<bool>)> {
    check_nets(v, u, pot.dim())?;
    let d = pot.dim();
    let mut x = Array2::zeros((n_paths, d));
    let mut flags = Vec::with_capacity(n_paths);
    for start in (0..n_paths).step_by(CHUNK) {
        let n = CHUNK.min(n_paths - start);
        let mut rngs: Vec<_> = (0..n).map(|i| streams.path(start + i)).collect();
        let batch = integrate(
            v,
            u,
            pot,
            sched,
            cfg,
            n,
            false,
            anneal,
            draw_noise(&mut rngs, cfg.grid),
        )?;
        x.slice_mut(ndarray::s![start..start + n, ..])
            .assign(&batch.x);
        flags.extend(batch.diverged);
    }
    Ok((x, flags))
}

/// Re-runs a trajectory from its stored increments with the given controls.
pub fn replay<T: Scalar>(
    traj: &Trajectory<T>,
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SimConfig<T>,
) -> Result<Trajectory<T>> {
    if traj.grid != cfg.grid || traj.dim != pot.dim() {
        return Err(NaasError::InvalidInput(
            "trajectory does not match configuration".into(),
        ));
    }
    let d = traj.dim;
    let replay_cfg = SimConfig {
        noise: true,
        ..*cfg
    };
    let batch = integrate(
        v,
        u,
        pot,
        sched,
        &replay_cfg,
        1,
        true,
        true,
        |_, k, out: &mut [T]| out.copy_from_slice(&traj.increments[k * d..(k + 1) * d]),
    )?;
    Ok(Trajectory {
        grid: traj.grid,
        dim: d,
        states: batch.states.expect("recorded").pop().expect("one path"),
        increments: batch.increments.expect("recorded").pop().expect("one path"),
        diverged: batch.diverged[0],
    })
}

fn check_nets<T: Scalar>(
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    d: usize,
) -> Result<()> {
    for net in [v, u].into_iter().flatten() {
        if net.dim() != d {
            return Err(NaasError::DimensionMismatch {
                expected: d,
                got: net.dim(),
            });
        }
    }
    Ok(())
}

/// Integrates `da/dt = -[a · (-(σ_t²/2) ∇²U_t(X_t)) + ∂_t∇U_t(X_t)]`
/// backward from `a(1) = 0`, evaluating coefficients at the stored states.
pub fn solve_lean_adjoint<T: Scalar>(
    traj: &Trajectory<T>,
    pot: &AnnealedPotential<T>,
    sched: &NoiseSchedule<T>,
) -> Result<AdjointPath<T>> {
    let d = traj.dim;
    if d != pot.dim() {
        return Err(NaasError::DimensionMismatch {
            expected: pot.dim(),
            got: d,
        });
    }
    let grid = traj.grid;
    let n = grid.n_anneal;
    let dt = grid.dt_anneal::<T>();
    let mut adjoints = vec![T::zero(); (n + 1) * d];
    let mut hv = vec![T::zero(); d];
    let mut src = vec![T::zero(); d];
    let mut scratch = vec![T::zero(); 3 * d];
    for j in (0..n).rev() {
        let t: T = grid.anneal_time(j);
        let x = traj.state(grid.boundary() + j);
        let sigma = sched.sigma_unchecked(t);
        let (head, tail) = adjoints.split_at_mut((j + 1) * d);
        let next = &tail[..d];
        let cur = &mut head[j * d..];
        pot.hvp_into(t, x, next, &mut hv, &mut scratch);
        pot.source_into(x, &mut src, &mut scratch);
        let half_s2 = T::lit(0.5) * sigma * sigma;
        for i in 0..d {
            cur[i] = next[i] + dt * (src[i] - half_s2 * hv[i]);
        }
        clip_norm(cur, pot.hvp_clip());
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(NaasError::Adjoint { step: j });
        }
    }
    Ok(AdjointPath {
        n_anneal: n,
        dim: d,
        adjoints,
    })
}

/// Draws `X_t` from the Brownian bridge on `[-1, 0]` pinned at `X_{-1} = 0`
/// and `X_0 = x0`: `N((1 + t) x0, (1 + t)(-t) σ̄² I)`.
pub fn bridge_sample<T: Scalar, R: Rng + ?Sized>(
    x0: &[T],
    t: T,
    sigma_bar: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(t >= -T::one() && t <= T::zero()) {
        return Err(NaasError::InvalidInput(format!(
            "bridge time {t} outside [-1, 0]"
        )));
    }
    let s = T::one() + t;
    let sd = (s * -t).max(T::zero()).sqrt() * sigma_bar;
    Ok(x0
        .iter()
        .map(|&x| s * x + sd * normal::<T, _>(rng))
        .collect())
}

/// Writes one CSV row per `(path, step)`: `path,step,t,x0,..`.
pub fn write_trajectories_csv<T: Scalar, W: Write>(
    trajs: &[Trajectory<T>],
    mut w: W,
) -> Result<()> {
    let Some(first) = trajs.first() else {
        writeln!(w, "path,step,t")?;
        return Ok(());
    };
    let cols: Vec<String> = (0..first.dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "path,step,t,{}", cols.join(","))?;
    for (p, traj) in trajs.iter().enumerate() {
        for k in 0..traj.grid.len() {
            let xs: Vec<String> = traj.state(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{p},{k},{},{}", traj.grid.time::<T>(k), xs.join(","))?;
        }
    }
    Ok(())
}

/// View of the boundary states of a set of trajectories as a matrix.
pub fn boundary_states<T: Scalar>(trajs: &[Trajectory<T>]) -> Array2<T> {
    let d = trajs.first().map_or(0, |t| t.dim);
    let flat: Vec<T> = trajs
        .iter()
        .flat_map(|t| t.boundary_state().iter().copied())
        .collect();
    Array2::from_shape_vec((trajs.len(), d), flat).expect("rows of equal width")
}
