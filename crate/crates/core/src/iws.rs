//! Path importance weights of the controlled sampler against the target
//! path measure, for effective-sample-size and weight-variance diagnostics.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::dynamics::Trajectory;
use crate::energy::AnnealedPotential;
use crate::error::{NaasError, Result};
use crate::net::ControlNet;
use crate::scalar::Scalar;

/// Discretised log Radon–Nikodym derivative for each path:
/// `Σ_k [-½‖c_k‖²Δt - c_k·ΔW_k]` over both stages (`c = v` then `u`), minus
/// the annealing work `Σ_k (U_1 - U_0)(X_k) Δt`. Diverged paths get `-∞`.
pub fn log_weights<T: Scalar>(
    trajs: &[Trajectory<T>],
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
) -> Result<Vec<f64>> {
    let Some(first) = trajs.first() else {
        return Ok(Vec::new());
    };
    let (grid, d) = (first.grid(), first.dim());
    if d != pot.dim() {
        return Err(NaasError::DimensionMismatch {
            expected: pot.dim(),
            got: d,
        });
    }
    if trajs.iter().any(|t| t.grid() != grid || t.dim() != d) {
        return Err(NaasError::InvalidInput(
            "trajectories must share a grid".into(),
        ));
    }
    for net in [v, u].into_iter().flatten() {
        if net.dim() != d {
            return Err(NaasError::DimensionMismatch {
                expected: d,
                got: net.dim(),
            });
        }
    }
    let n = trajs.len();
    let mut lw = vec![0.0f64; n];
    let mut xs = Array2::<T>::zeros((n, d));
    let mut times = vec![T::zero(); n];
    for k in 0..grid.len() - 1 {
        let prior = k < grid.n_prior;
        let t: T = grid.time(k);
        let dt = if prior {
            grid.dt_prior::<f64>()
        } else {
            grid.dt_anneal::<f64>()
        };
        let net = if prior { v } else { u };
        if let Some(net) = net {
            for (i, traj) in trajs.iter().enumerate() {
                xs.row_mut(i)
                    .iter_mut()
                    .zip(traj.state(k))
                    .for_each(|(o, &x)| *o = x);
            }
            times.iter_mut().for_each(|s| *s = t);
            let c = net.forward_batch(&times, xs.view());
            for (i, traj) in trajs.iter().enumerate() {
                let dw = traj.increment(k);
                let (mut sq, mut cross) = (0.0, 0.0);
                for (cj, wj) in c.row(i).iter().zip(dw) {
                    let cj = cj.as_f64();
                    sq += cj * cj;
                    cross += cj * wj.as_f64();
                }
                lw[i] += -0.5 * sq * dt - cross;
            }
        }
        if !prior {
            for (i, traj) in trajs.iter().enumerate() {
                lw[i] -= pot.dt_value(traj.state(k)).as_f64() * dt;
            }
        }
    }
    for (w, traj) in lw.iter_mut().zip(trajs) {
        if traj.diverged() || !w.is_finite() {
            *w = f64::NEG_INFINITY;
        }
    }
    Ok(lw)
}

/// Log-weight of a single path.
pub fn log_weight<T: Scalar>(
    traj: &Trajectory<T>,
    v: Option<&ControlNet<T>>,
    u: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
) -> Result<f64> {
    Ok(log_weights(std::slice::from_ref(traj), v, u, pot)?[0])
}

/// Self-normalised importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    log_weights: Vec<f64>,
    normalized: Vec<f64>,
    ess: f64,
}

impl WeightSet {
    /// Normalises through log-sum-exp, so log-weights of any magnitude are
    /// safe. Fails if no weight is positive and finite.
    pub fn new(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights
            .iter()
            .any(|w| w.is_nan() || *w == f64::INFINITY)
        {
            return Err(NaasError::InvalidState(
                "log-weights must not be NaN or +inf".into(),
            ));
        }
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NaasError::InvalidState(
                "all importance weights are zero".into(),
            ));
        }
        let unnorm: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let normalized: Vec<f64> = unnorm.iter().map(|w| w / total).collect();
        let ess = normalized.iter().map(|w| w * w).sum::<f64>().recip();
        Ok(Self {
            log_weights,
            normalized,
            ess,
        })
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    /// `1 / Σ ŵ²`, in `[1, N]`.
    pub fn ess(&self) -> f64 {
        self.ess
    }

    /// Empirical variance of `N ŵ`, equal to `N / ESS - 1`.
    pub fn variance(&self) -> f64 {
        self.len() as f64 / self.ess - 1.0
    }
}

/// Multinomial resampling: `n` rows drawn with probabilities `ŵ`.
pub fn resample<T: Scalar, R: Rng + ?Sized>(
    samples: ArrayView2<'_, T>,
    weights: &WeightSet,
    rng: &mut R,
) -> Result<Array2<T>> {
    let n = samples.nrows();
    if n != weights.len() {
        return Err(NaasError::DimensionMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights.normalized() {
        acc += w;
        cdf.push(acc);
    }
    let mut out = Array2::zeros((n, samples.ncols()));
    for mut row in out.rows_mut() {
        let u: f64 = rng.random::<f64>() * acc;
        let k = cdf.partition_point(|&c| c <= u).min(n - 1);
        row.assign(&samples.row(k));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, SimConfig};
    use crate::energy::EnergyModel;
    use crate::net::NetConfig;
    use crate::rng::StreamSeed;
    use crate::schedule::NoiseSchedule;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        target: EnergyModel<f64>,
    ) -> (AnnealedPotential<f64>, NoiseSchedule<f64>, SimConfig<f64>) {
        let d = target.dim();
        let pot = AnnealedPotential::new(EnergyModel::gaussian(d, 1.0).unwrap(), target).unwrap();
        (
            pot,
            NoiseSchedule::geometric(0.1, 1.0).unwrap(),
            SimConfig::new(10, 20, 1.0).unwrap(),
        )
    }

    #[test]
    fn reference_dynamics_on_its_own_target_has_unit_weights() {
        let (pot, sched, cfg) = setup(EnergyModel::gaussian(2, 1.0).unwrap());
        let trajs = simulate(
            None,
            None,
            &pot,
            &sched,
            &cfg,
            StreamSeed::new(1, "paths", 0),
            0,
            10,
        )
        .unwrap();
        assert!(log_weights(&trajs, None, None, &pot)
            .unwrap()
            .iter()
            .all(|&w| w == 0.0));
    }

    #[test]
    fn uncontrolled_weight_is_the_annealing_work() {
        let (pot, sched, cfg) = setup(EnergyModel::gmm_grid());
        let trajs = simulate(
            None,
            None,
            &pot,
            &sched,
            &cfg,
            StreamSeed::new(2, "paths", 0),
            0,
            5,
        )
        .unwrap();
        let lw = log_weights(&trajs, None, None, &pot).unwrap();
        let (u0, u1) = (pot.prior(), pot.target());
        for (traj, w) in trajs.iter().zip(lw) {
            let work: f64 = (0..20)
                .map(|j| {
                    let x = traj.state(10 + j);
                    (u1.energy(x).unwrap() - u0.energy(x).unwrap()) / 20.0
                })
                .sum();
            assert!((w + work).abs() < 1e-12, "{w} vs {work}");
        }
    }

    #[test]
    fn controlled_weight_matches_girsanov_sum() {
        let (pot, sched, cfg) = setup(EnergyModel::gaussian(2, 1.0).unwrap());
        let nc = NetConfig {
            dim: 2,
            hidden: vec![4],
            time_embedding: 2,
            max_frequency: 1.0,
        };
        let mut net = ControlNet::new(nc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        net.params_mut()
            .iter_mut()
            .for_each(|p| *p = rng.random_range(-0.5..0.5));
        let traj = &simulate(
            Some(&net),
            Some(&net),
            &pot,
            &sched,
            &cfg,
            StreamSeed::new(5, "paths", 0),
            0,
            1,
        )
        .unwrap()[0];
        let mut expected = 0.0;
        for k in 0..30 {
            let dt = if k < 10 { 0.1 } else { 0.05 };
            let c = net.forward(traj.grid().time(k), traj.state(k));
            let dw = traj.increment(k);
            expected += -0.5 * (c[0] * c[0] + c[1] * c[1]) * dt - (c[0] * dw[0] + c[1] * dw[1]);
        }
        let w = log_weight(traj, Some(&net), Some(&net), &pot).unwrap();
        assert!((w - expected).abs() < 1e-12);
    }

    #[test]
    fn normalisation_is_stable_and_shift_invariant() {
        let lw = vec![-500.0, 0.0, 500.0, 499.0, f64::NEG_INFINITY];
        let ws = WeightSet::new(lw.clone()).unwrap();
        assert!((ws.normalized().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ws.ess() >= 1.0 && ws.ess() <= 5.0);
        let shifted = WeightSet::new(lw.iter().map(|w| w + 123.0).collect()).unwrap();
        assert!((shifted.ess() - ws.ess()).abs() < 1e-12);
        let uniform = WeightSet::new(vec![0.3; 8]).unwrap();
        assert!((uniform.ess() - 8.0).abs() < 1e-12);
        assert!(uniform.variance().abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_are_a_state_error() {
        assert!(matches!(
            WeightSet::new(vec![f64::NEG_INFINITY; 3]),
            Err(NaasError::InvalidState(_))
        ));
        assert!(WeightSet::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn point_mass_resamples_one_row() {
        let x = array![[1.0], [2.0], [3.0]];
        let ws = WeightSet::new(vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap();
        let out = resample(x.view(), &ws, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, array![[2.0], [2.0], [2.0]]);
    }

    #[test]
    fn uniform_weights_give_a_uniform_bootstrap() {
        // χ² with 9 degrees of freedom; 21.666 is the 0.99 quantile.
        let n = 10;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let ws = WeightSet::new(vec![0.0; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 10];
        for _ in 0..5000 {
            for v in resample(x.view(), &ws, &mut rng).unwrap().iter() {
                counts[*v as usize] += 1;
            }
        }
        let e = 5000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 21.666, "{chi2}");
        let a = resample(x.view(), &ws, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = resample(x.view(), &ws, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
