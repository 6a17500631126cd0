//! Potentials: the Gaussian prior, the synthetic benchmark targets and the
//! linearly annealed potential `U_t = (1 - t) U_0 + t U_1`.
//!
//! Every model returns `U(x) = -log ν(x)` up to an additive constant. The
//! constants are chosen so that the minimum of the dominant mode is close to
//! zero:
//!
//! | variant            | convention                                                       |
//! |--------------------|------------------------------------------------------------------|
//! | `IsotropicGaussian`| `‖x‖² / (2σ̄²)`                                                   |
//! | Gaussian mixtures  | `-LSE_k(log w_k - ‖x - μ_k‖² / (2s²)) + max_k log w_k`           |
//! | `ManyWell`         | `Σ_{i≤m} (x_i² - δ)² + ½ Σ_{i>m} x_i²`                           |
//! | `Funnel`           | `x₁²/(2σ²) + ½ e^{-x₁} Σ_{i≥2} x_i² + (d-1) x₁ / 2`              |
//! | `StudentMixture`   | `-LSE_k(-(ν+d)/2 · log(1 + ‖x - m_k‖²/ν))`                       |

use std::io::Write;

use rand::Rng;

use crate::error::{NaasError, Result};
use crate::rng;
use crate::scalar::{clip_norm, log_sum_exp, norm, Scalar};

/// Gaussian mixture with a shared isotropic component variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T> {
    centers: Vec<Vec<T>>,
    log_weights: Vec<T>,
    variance: T,
    offset: T,
}

impl<T: Scalar> GaussianMixture<T> {
    /// `weights` need not be normalized.
    pub fn new(centers: Vec<Vec<T>>, weights: &[T], variance: T) -> Result<Self> {
        if centers.is_empty() || centers.len() != weights.len() {
            return Err(NaasError::InvalidInput(
                "mixture needs one positive weight per center".into(),
            ));
        }
        let d = centers[0].len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(NaasError::InvalidInput(
                "mixture centers must share a nonzero dimension".into(),
            ));
        }
        if weights.iter().any(|&w| w <= T::zero()) || variance <= T::zero() {
            return Err(NaasError::InvalidInput(
                "mixture weights and variance must be positive".into(),
            ));
        }
        let total: T = weights.iter().copied().sum();
        let log_weights: Vec<T> = weights.iter().map(|&w| (w / total).ln()).collect();
        let offset = log_weights.iter().copied().fold(T::neg_infinity(), T::max);
        Ok(Self {
            centers,
            log_weights,
            variance,
            offset,
        })
    }

    pub fn equal_weights(centers: Vec<Vec<T>>, variance: T) -> Result<Self> {
        let w = vec![T::one(); centers.len()];
        Self::new(centers, &w, variance)
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<T>] {
        &self.centers
    }

    pub fn weights(&self) -> Vec<T> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn variance(&self) -> T {
        self.variance
    }

    fn component_logits(&self, x: &[T]) -> Vec<T> {
        let two_s2 = T::lit(2.0) * self.variance;
        self.centers
            .iter()
            .zip(&self.log_weights)
            .map(|(c, &lw)| lw - crate::scalar::sq_dist(x, c) / two_s2)
            .collect()
    }

    fn energy(&self, x: &[T]) -> T {
        self.offset - log_sum_exp(&self.component_logits(x))
    }

    fn grad_into(&self, x: &[T], out: &mut [T]) {
        let logits = self.component_logits(x);
        let lse = log_sum_exp(&logits);
        out.iter_mut().for_each(|g| *g = T::zero());
        for (c, l) in self.centers.iter().zip(&logits) {
            let r = (*l - lse).exp();
            if r == T::zero() {
                continue;
            }
            for ((g, &xi), &ci) in out.iter_mut().zip(x).zip(c) {
                *g += r * (xi - ci);
            }
        }
        let inv = self.variance.recip();
        out.iter_mut().for_each(|g| *g *= inv);
    }
}

/// A target or prior potential with value, gradient and (for some variants)
/// an analytic Hessian-vector product.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergyModel<T> {
    IsotropicGaussian {
        dim: usize,
        sigma: T,
    },
    /// Nine equally weighted modes at `5·(i-2, j-2)`, `i, j ∈ {1, 2, 3}`, with variance 0.3.
    GmmGrid2D(GaussianMixture<T>),
    /// Equally weighted unit-variance modes with centers uniform on `[-40, 40]^d`.
    Gmm40 {
        seed: u64,
        mixture: GaussianMixture<T>,
    },
    /// Two unit-variance modes at `∓a·1_d` with weights `(w₁, 1 - w₁)`.
    Bimodal {
        separation: T,
        mixture: GaussianMixture<T>,
    },
    ManyWell {
        dim: usize,
        wells: usize,
        delta: T,
    },
    Funnel {
        dim: usize,
        variance: T,
    },
    /// Equally weighted multivariate Student-t components with centers
    /// uniform on `[-10, 10]^d`.
    StudentMixture {
        seed: u64,
        centers: Vec<Vec<T>>,
        dof: T,
    },
}

impl<T: Scalar> EnergyModel<T> {
    pub fn gaussian(dim: usize, sigma: T) -> Result<Self> {
        if dim == 0 || sigma <= T::zero() {
            return Err(NaasError::InvalidInput(
                "gaussian needs dim > 0 and sigma > 0".into(),
            ));
        }
        Ok(Self::IsotropicGaussian { dim, sigma })
    }

    pub fn gmm_grid() -> Self {
        let mut centers = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                centers.push(vec![
                    T::lit(5.0 * (i as f64 - 1.0)),
                    T::lit(5.0 * (j as f64 - 1.0)),
                ]);
            }
        }
        Self::GmmGrid2D(
            GaussianMixture::equal_weights(centers, T::lit(0.3)).expect("static grid is valid"),
        )
    }

    /// Centers are drawn from stream `(seed, "centers", dim)` with one
    /// counter-based substream per mode, so they do not depend on `modes`.
    pub fn gmm40(dim: usize, modes: usize, seed: u64) -> Result<Self> {
        let centers = uniform_centers(dim, modes, seed, 40.0)?;
        Ok(Self::Gmm40 {
            seed,
            mixture: GaussianMixture::equal_weights(centers, T::one())?,
        })
    }

    pub fn bimodal(dim: usize, separation: T, first_weight: T) -> Result<Self> {
        if dim == 0 || first_weight <= T::zero() || first_weight >= T::one() {
            return Err(NaasError::InvalidInput(
                "bimodal needs dim > 0 and a first weight in (0, 1)".into(),
            ));
        }
        let centers = vec![vec![-separation; dim], vec![separation; dim]];
        let mixture =
            GaussianMixture::new(centers, &[first_weight, T::one() - first_weight], T::one())?;
        Ok(Self::Bimodal {
            separation,
            mixture,
        })
    }

    pub fn many_well(dim: usize, wells: usize, delta: T) -> Result<Self> {
        if dim == 0 || wells > dim {
            return Err(NaasError::InvalidInput(
                "many-well needs 0 < wells <= dim".into(),
            ));
        }
        Ok(Self::ManyWell { dim, wells, delta })
    }

    pub fn funnel(dim: usize, variance: T) -> Result<Self> {
        if dim < 2 || variance <= T::zero() {
            return Err(NaasError::InvalidInput(
                "funnel needs dim >= 2 and a positive variance".into(),
            ));
        }
        Ok(Self::Funnel { dim, variance })
    }

    pub fn student_mixture(dim: usize, modes: usize, dof: T, seed: u64) -> Result<Self> {
        if dof <= T::zero() {
            return Err(NaasError::InvalidInput(
                "degrees of freedom must be positive".into(),
            ));
        }
        let centers = uniform_centers(dim, modes, seed, 10.0)?;
        Ok(Self::StudentMixture { seed, centers, dof })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::IsotropicGaussian { dim, .. }
            | Self::ManyWell { dim, .. }
            | Self::Funnel { dim, .. } => *dim,
            Self::GmmGrid2D(m)
            | Self::Gmm40 { mixture: m, .. }
            | Self::Bimodal { mixture: m, .. } => m.dim(),
            Self::StudentMixture { centers, .. } => centers[0].len(),
        }
    }

    /// Short variant tag used in configs and reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::IsotropicGaussian { .. } => "gaussian",
            Self::GmmGrid2D(_) => "gmm-grid",
            Self::Gmm40 { .. } => "gmm40",
            Self::Bimodal { .. } => "bimodal",
            Self::ManyWell { .. } => "many-well",
            Self::Funnel { .. } => "funnel",
            Self::StudentMixture { .. } => "student-mixture",
        }
    }

    /// Mode locations for mode-coverage metrics, when the model has them.
    pub fn mode_centers(&self) -> Option<Vec<Vec<T>>> {
        match self {
            Self::GmmGrid2D(m)
            | Self::Gmm40 { mixture: m, .. }
            | Self::Bimodal { mixture: m, .. } => Some(m.centers().to_vec()),
            Self::StudentMixture { centers, .. } => Some(centers.clone()),
            _ => None,
        }
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(NaasError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn energy(&self, x: &[T]) -> Result<T> {
        self.check(x)?;
        Ok(self.energy_unchecked(x))
    }

    pub fn grad(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        let mut g = vec![T::zero(); x.len()];
        self.grad_into(x, &mut g);
        Ok(g)
    }

    /// Gradient rescaled to norm at most `bound`.
    pub fn grad_clipped(&self, x: &[T], bound: Option<T>) -> Result<Vec<T>> {
        let mut g = self.grad(x)?;
        clip_norm(&mut g, bound);
        Ok(g)
    }

    pub(crate) fn energy_unchecked(&self, x: &[T]) -> T {
        let half = T::lit(0.5);
        match self {
            Self::IsotropicGaussian { sigma, .. } => {
                half * crate::scalar::dot(x, x) / (*sigma * *sigma)
            }
            Self::GmmGrid2D(m)
            | Self::Gmm40 { mixture: m, .. }
            | Self::Bimodal { mixture: m, .. } => m.energy(x),
            Self::ManyWell { wells, delta, .. } => {
                let (w, rest) = x.split_at(*wells);
                let wells: T = w
                    .iter()
                    .map(|&xi| {
                        let q = xi * xi - *delta;
                        q * q
                    })
                    .sum();
                wells + half * crate::scalar::dot(rest, rest)
            }
            Self::Funnel { dim, variance } => {
                let x1 = x[0];
                let tail = crate::scalar::dot(&x[1..], &x[1..]);
                half * x1 * x1 / *variance
                    + half * (-x1).exp() * tail
                    + half * T::from_usize_lossy(dim - 1) * x1
            }
            Self::StudentMixture { centers, dof, .. } => {
                let d = T::from_usize_lossy(x.len());
                let logits: Vec<T> = centers
                    .iter()
                    .map(|c| -half * (*dof + d) * (crate::scalar::sq_dist(x, c) / *dof).ln_1p())
                    .collect();
                -log_sum_exp(&logits)
            }
        }
    }

    pub(crate) fn grad_into(&self, x: &[T], out: &mut [T]) {
        match self {
            Self::IsotropicGaussian { sigma, .. } => {
                let inv = (*sigma * *sigma).recip();
                for (g, &xi) in out.iter_mut().zip(x) {
                    *g = xi * inv;
                }
            }
            Self::GmmGrid2D(m)
            | Self::Gmm40 { mixture: m, .. }
            | Self::Bimodal { mixture: m, .. } => m.grad_into(x, out),
            Self::ManyWell { wells, delta, .. } => {
                let four = T::lit(4.0);
                for (i, (g, &xi)) in out.iter_mut().zip(x).enumerate() {
                    *g = if i < *wells {
                        four * xi * (xi * xi - *delta)
                    } else {
                        xi
                    };
                }
            }
            Self::Funnel { dim, variance } => {
                let half = T::lit(0.5);
                let e = (-x[0]).exp();
                let tail = crate::scalar::dot(&x[1..], &x[1..]);
                out[0] = x[0] / *variance - half * e * tail + half * T::from_usize_lossy(dim - 1);
                for (g, &xi) in out[1..].iter_mut().zip(&x[1..]) {
                    *g = e * xi;
                }
            }
            Self::StudentMixture { centers, dof, .. } => {
                let half = T::lit(0.5);
                let d = T::from_usize_lossy(x.len());
                let sq: Vec<T> = centers
                    .iter()
                    .map(|c| crate::scalar::sq_dist(x, c))
                    .collect();
                let logits: Vec<T> = sq
                    .iter()
                    .map(|&s| -half * (*dof + d) * (s / *dof).ln_1p())
                    .collect();
                let lse = log_sum_exp(&logits);
                out.iter_mut().for_each(|g| *g = T::zero());
                for ((c, &s), &l) in centers.iter().zip(&sq).zip(&logits) {
                    let r = (l - lse).exp();
                    let scale = r * (*dof + d) / (*dof + s);
                    for ((g, &xi), &ci) in out.iter_mut().zip(x).zip(c) {
                        *g += scale * (xi - ci);
                    }
                }
            }
        }
    }

    /// Exact Hessian-vector product for variants with a closed-form Hessian
    /// (Gaussian, many-well, funnel); `None` otherwise.
    pub fn hvp_analytic(&self, x: &[T], v: &[T]) -> Option<Vec<T>> {
        match self {
            Self::IsotropicGaussian { sigma, .. } => {
                let inv = (*sigma * *sigma).recip();
                Some(v.iter().map(|&vi| vi * inv).collect())
            }
            Self::ManyWell { wells, delta, .. } => Some(
                x.iter()
                    .zip(v)
                    .enumerate()
                    .map(|(i, (&xi, &vi))| {
                        if i < *wells {
                            (T::lit(12.0) * xi * xi - T::lit(4.0) * *delta) * vi
                        } else {
                            vi
                        }
                    })
                    .collect(),
            ),
            Self::Funnel { variance, .. } => {
                let e = (-x[0]).exp();
                let half = T::lit(0.5);
                let tail = crate::scalar::dot(&x[1..], &x[1..]);
                let cross = crate::scalar::dot(&x[1..], &v[1..]);
                let mut out = Vec::with_capacity(x.len());
                out.push((variance.recip() + half * e * tail) * v[0] - e * cross);
                for (&xi, &vi) in x[1..].iter().zip(&v[1..]) {
                    out.push(-e * xi * v[0] + e * vi);
                }
                Some(out)
            }
            _ => None,
        }
    }

    pub fn has_analytic_hvp(&self) -> bool {
        matches!(
            self,
            Self::IsotropicGaussian { .. } | Self::ManyWell { .. } | Self::Funnel { .. }
        )
    }

    /// Writes mode centers (one row per mode) as CSV for auditing.
    pub fn write_centers_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let centers = self.mode_centers().ok_or_else(|| {
            NaasError::InvalidInput(format!("{} has no mode centers", self.kind()))
        })?;
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "mode,{}", header.join(","))?;
        for (k, c) in centers.iter().enumerate() {
            let row: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{k},{}", row.join(","))?;
        }
        Ok(())
    }
}

fn uniform_centers<T: Scalar>(
    dim: usize,
    modes: usize,
    seed: u64,
    half_width: f64,
) -> Result<Vec<Vec<T>>> {
    if dim == 0 || modes == 0 {
        return Err(NaasError::InvalidInput(
            "mixture needs dim > 0 and at least one mode".into(),
        ));
    }
    Ok((0..modes)
        .map(|k| {
            let mut r = rng::stream(seed, "centers", dim as u64, k as u64);
            (0..dim)
                .map(|_| T::lit(r.random_range(-half_width..half_width)))
                .collect()
        })
        .collect())
}

/// How Hessian-vector products of the annealed potential are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HvpStrategy<T> {
    Analytic,
    /// Central difference of the gradient with relative step `step`.
    FiniteDifference {
        step: T,
    },
}

/// Value, gradient and time derivatives of `U_t` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealedEval<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub dt_value: T,
    pub dt_grad: Vec<T>,
}

/// Linear interpolation between a prior `U_0` and a target `U_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealedPotential<T> {
    prior: EnergyModel<T>,
    target: EnergyModel<T>,
    grad_clip: Option<T>,
    hvp_clip: Option<T>,
    hvp: HvpStrategy<T>,
}

impl<T: Scalar> AnnealedPotential<T> {
    pub fn new(prior: EnergyModel<T>, target: EnergyModel<T>) -> Result<Self> {
        if prior.dim() != target.dim() {
            return Err(NaasError::DimensionMismatch {
                expected: prior.dim(),
                got: target.dim(),
            });
        }
        Ok(Self {
            prior,
            target,
            grad_clip: None,
            hvp_clip: None,
            hvp: HvpStrategy::FiniteDifference { step: T::fd_step() },
        })
    }

    /// Norm bound applied to `∇U_t` in the drift and to `∂_t∇U_t` (E_max).
    pub fn with_grad_clip(mut self, bound: Option<T>) -> Self {
        self.grad_clip = bound;
        self
    }

    /// Norm bound applied to Hessian-vector products (A_max).
    pub fn with_hvp_clip(mut self, bound: Option<T>) -> Self {
        self.hvp_clip = bound;
        self
    }

    pub fn with_hvp_strategy(mut self, strategy: HvpStrategy<T>) -> Result<Self> {
        if strategy == HvpStrategy::Analytic
            && !(self.prior.has_analytic_hvp() && self.target.has_analytic_hvp())
        {
            return Err(NaasError::InvalidInput(format!(
                "analytic HVP unavailable for {} -> {}",
                self.prior.kind(),
                self.target.kind()
            )));
        }
        self.hvp = strategy;
        Ok(self)
    }

    pub fn prior(&self) -> &EnergyModel<T> {
        &self.prior
    }

    pub fn target(&self) -> &EnergyModel<T> {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn grad_clip(&self) -> Option<T> {
        self.grad_clip
    }

    pub fn hvp_clip(&self) -> Option<T> {
        self.hvp_clip
    }

    fn check(&self, t: T, x: &[T]) -> Result<()> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(NaasError::InvalidInput(format!("time {t} outside [0, 1]")));
        }
        if x.len() != self.dim() {
            return Err(NaasError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Unclipped `(U_t, ∇U_t, ∂_tU_t, ∂_t∇U_t)`.
    pub fn eval(&self, t: T, x: &[T]) -> Result<AnnealedEval<T>> {
        self.check(t, x)?;
        let u0 = self.prior.energy_unchecked(x);
        let u1 = self.target.energy_unchecked(x);
        let mut g0 = vec![T::zero(); x.len()];
        let mut g1 = vec![T::zero(); x.len()];
        self.prior.grad_into(x, &mut g0);
        self.target.grad_into(x, &mut g1);
        let s = T::one() - t;
        Ok(AnnealedEval {
            value: s * u0 + t * u1,
            grad: g0.iter().zip(&g1).map(|(&a, &b)| s * a + t * b).collect(),
            dt_value: u1 - u0,
            dt_grad: g0.iter().zip(&g1).map(|(&a, &b)| b - a).collect(),
        })
    }

    /// `∂_tU_t(x) = U_1(x) - U_0(x)`.
    pub fn dt_value(&self, x: &[T]) -> T {
        self.target.energy_unchecked(x) - self.prior.energy_unchecked(x)
    }

    fn grad_t_into(&self, t: T, x: &[T], out: &mut [T], scratch: &mut [T]) {
        self.prior.grad_into(x, out);
        self.target.grad_into(x, scratch);
        let s = T::one() - t;
        for (o, &b) in out.iter_mut().zip(scratch.iter()) {
            *o = s * *o + t * b;
        }
    }

    /// Drift gradient `∇U_t(x)` clipped at E_max. Writes into `out`.
    pub(crate) fn drift_grad_into(&self, t: T, x: &[T], out: &mut [T], scratch: &mut [T]) {
        self.grad_t_into(t, x, out, scratch);
        clip_norm(out, self.grad_clip);
    }

    /// Adjoint source `∂_t∇U_t(x)` clipped at E_max. Writes into `out`.
    pub(crate) fn source_into(&self, x: &[T], out: &mut [T], scratch: &mut [T]) {
        self.target.grad_into(x, out);
        self.prior.grad_into(x, scratch);
        for (o, &b) in out.iter_mut().zip(scratch.iter()) {
            *o -= b;
        }
        clip_norm(out, self.grad_clip);
    }

    /// `∇²U_t(x) · v`, clipped at A_max when configured.
    pub fn hvp(&self, t: T, x: &[T], v: &[T]) -> Result<Vec<T>> {
        self.check(t, x)?;
        if v.len() != x.len() {
            return Err(NaasError::DimensionMismatch {
                expected: x.len(),
                got: v.len(),
            });
        }
        let mut out = vec![T::zero(); x.len()];
        let mut scratch = vec![T::zero(); 3 * x.len()];
        self.hvp_into(t, x, v, &mut out, &mut scratch);
        Ok(out)
    }

    /// `scratch` must hold at least `3 * dim` entries.
    pub(crate) fn hvp_into(&self, t: T, x: &[T], v: &[T], out: &mut [T], scratch: &mut [T]) {
        let d = x.len();
        let vn = norm(v);
        if vn == T::zero() {
            out.iter_mut().for_each(|o| *o = T::zero());
            return;
        }
        match self.hvp {
            HvpStrategy::Analytic => {
                let h0 = self
                    .prior
                    .hvp_analytic(x, v)
                    .expect("checked at construction");
                let h1 = self
                    .target
                    .hvp_analytic(x, v)
                    .expect("checked at construction");
                let s = T::one() - t;
                for ((o, a), b) in out.iter_mut().zip(h0).zip(h1) {
                    *o = s * a + t * b;
                }
            }
            HvpStrategy::FiniteDifference { step } => {
                let h = step * (T::one() + norm(x)) / vn.max(T::lit(1e-12));
                let (shifted, rest) = scratch.split_at_mut(d);
                let (g_minus, rest) = rest.split_at_mut(d);
                let tmp = &mut rest[..d];
                for ((s, &xi), &vi) in shifted.iter_mut().zip(x).zip(v) {
                    *s = xi + h * vi;
                }
                self.grad_t_into(t, shifted, out, tmp);
                for ((s, &xi), &vi) in shifted.iter_mut().zip(x).zip(v) {
                    *s = xi - h * vi;
                }
                self.grad_t_into(t, shifted, g_minus, tmp);
                let inv = (T::lit(2.0) * h).recip();
                for (o, &m) in out.iter_mut().zip(g_minus.iter()) {
                    *o = (*o - m) * inv;
                }
            }
        }
        clip_norm(out, self.hvp_clip);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(m: &EnergyModel<f64>, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + x[i].abs());
                let mut p = x.to_vec();
                let mut q = x.to_vec();
                p[i] += h;
                q[i] -= h;
                (m.energy(&p).unwrap() - m.energy(&q).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gaussian_is_zero_at_mean() {
        let m = EnergyModel::gaussian(2, 1.0).unwrap();
        assert_eq!(m.energy(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_gradient() {
        let m = EnergyModel::gaussian(2, 2.0).unwrap();
        assert_eq!(m.grad(&[4.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn many_well_value_and_gradient() {
        let m = EnergyModel::many_well(5, 5, 4.0).unwrap();
        assert_eq!(m.energy(&[2.0; 5]).unwrap(), 0.0);
        let g = m.grad(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g, vec![-12.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn funnel_origin() {
        let m = EnergyModel::funnel(10, 9.0).unwrap();
        assert_eq!(m.energy(&[0.0; 10]).unwrap(), 0.0);
        assert_eq!(m.grad(&[0.0; 10]).unwrap()[0], 4.5);
    }

    #[test]
    fn grid_center_is_stationary() {
        let m = EnergyModel::<f64>::gmm_grid();
        let g = m.grad(&[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
        assert!(m.energy(&[0.0, 0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = EnergyModel::gaussian(3, 1.0).unwrap();
        assert!(matches!(
            m.energy(&[0.0; 2]),
            Err(NaasError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn gmm40_centers_reproducible_and_in_box() {
        let a = EnergyModel::<f64>::gmm40(4, 40, 11).unwrap();
        let b = EnergyModel::<f64>::gmm40(4, 40, 11).unwrap();
        let c = EnergyModel::<f64>::gmm40(4, 40, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let centers = a.mode_centers().unwrap();
        assert_eq!(centers.len(), 40);
        assert!(centers.iter().flatten().all(|v| (-40.0..=40.0).contains(v)));
        // Per-mode substreams: a prefix of modes does not depend on the mode count.
        let short = EnergyModel::<f64>::gmm40(4, 5, 11)
            .unwrap()
            .mode_centers()
            .unwrap();
        assert_eq!(&centers[..5], &short[..]);
    }

    #[test]
    fn mixture_is_stable_far_away() {
        let m = EnergyModel::<f64>::gmm40(4, 40, 1).unwrap();
        let x = [1000.0, -1000.0, 0.0, 0.0];
        assert!(m.energy(&x).unwrap().is_finite());
        assert!(m.grad(&x).unwrap().iter().all(|g| g.is_finite()));
        let s = EnergyModel::<f64>::student_mixture(4, 10, 2.0, 1).unwrap();
        assert!(s.energy(&x).unwrap().is_finite());
    }

    #[test]
    fn student_mixture_gradient_matches_fd() {
        let m = EnergyModel::<f64>::student_mixture(5, 10, 2.0, 3).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0, -4.0];
        let g = m.grad(&x).unwrap();
        for (a, b) in g.iter().zip(fd_grad(&m, &x)) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn clipped_gradient_keeps_direction() {
        let m = EnergyModel::<f64>::many_well(2, 2, 4.0).unwrap();
        let g = m.grad(&[5.0, 3.0]).unwrap();
        let c = m.grad_clipped(&[5.0, 3.0], Some(10.0)).unwrap();
        assert!((norm(&c) - 10.0).abs() < 1e-12);
        let k = c[0] / g[0];
        assert!(k > 0.0);
        assert!((c[1] - k * g[1]).abs() < 1e-12);
    }

    #[test]
    fn annealed_boundaries() {
        let prior = EnergyModel::gaussian(2, 1.0).unwrap();
        let target = EnergyModel::<f64>::gmm_grid();
        let pot = AnnealedPotential::new(prior.clone(), target.clone()).unwrap();
        let x = [0.7, -1.3];
        let e0 = pot.eval(0.0, &x).unwrap();
        assert_eq!(e0.value, prior.energy(&x).unwrap());
        assert_eq!(e0.grad, prior.grad(&x).unwrap());
        let e1 = pot.eval(1.0, &x).unwrap();
        assert_eq!(e1.value, target.energy(&x).unwrap());
        assert_eq!(e1.grad, target.grad(&x).unwrap());
        assert_eq!(e0.dt_value, e1.dt_value);
        assert!(pot.eval(1.5, &x).is_err());
        assert!(pot.eval(-0.1, &x).is_err());
    }

    #[test]
    fn degenerate_interpolation_has_zero_time_derivative() {
        let g = EnergyModel::gaussian(3, 1.5).unwrap();
        let pot = AnnealedPotential::new(g.clone(), g).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let e = pot.eval(t, &[1.0, 2.0, -1.0]).unwrap();
            assert_eq!(e.dt_value, 0.0);
            assert!(e.dt_grad.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_hessian_and_zero_direction() {
        let g = EnergyModel::<f64>::gaussian(3, 1.0).unwrap();
        let pot = AnnealedPotential::new(g.clone(), g).unwrap();
        let v = [0.3, -2.0, 1.0];
        let h = pot.hvp(0.4, &[5.0, -1.0, 2.0], &v).unwrap();
        for (a, b) in h.iter().zip(&v) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        assert_eq!(
            pot.hvp(0.4, &[5.0, -1.0, 2.0], &[0.0; 3]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn analytic_strategy_requires_support() {
        let g = EnergyModel::gaussian(2, 1.0).unwrap();
        let pot = AnnealedPotential::new(g, EnergyModel::gmm_grid()).unwrap();
        assert!(pot.with_hvp_strategy(HvpStrategy::Analytic).is_err());
    }

    #[test]
    fn hvp_clip_bounds_norm() {
        let g = EnergyModel::<f64>::gaussian(2, 0.1).unwrap();
        let pot = AnnealedPotential::new(g.clone(), g)
            .unwrap()
            .with_hvp_clip(Some(1.0));
        let h = pot.hvp(0.5, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((norm(&h) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn centers_csv_has_one_row_per_mode() {
        let m = EnergyModel::<f64>::gmm_grid();
        let mut buf = Vec::new();
        m.write_centers_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 10);
        assert!(s.starts_with("mode,x0,x1\n"));
    }
}
