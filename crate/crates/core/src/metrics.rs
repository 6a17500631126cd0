//! Sample-quality metrics and exact reference samplers.
//!
//! All metrics are computed in double precision with a fixed summation order,
//! so values are bit-reproducible and independent of thread count.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::energy::EnergyModel;
use crate::error::{NaasError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Generated,
    Reference,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Generated => "generated",
            Self::Reference => "reference",
        }
    }
}

/// `n × d` matrix of finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    data: Array2<T>,
    provenance: Provenance,
    seed: u64,
}

impl<T: Scalar> SampleSet<T> {
    pub fn new(data: Array2<T>, provenance: Provenance, seed: u64) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NaasError::InvalidInput(
                "sample set contains non-finite values".into(),
            ));
        }
        Ok(Self {
            data,
            provenance,
            seed,
        })
    }

    pub fn data(&self) -> ArrayView2<'_, T> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", cols.join(","))?;
        for row in self.data.rows() {
            let xs: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", xs.join(","))?;
        }
        Ok(())
    }
}

fn to_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Vec<Vec<f64>> {
    x.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair<T: Scalar>(x: &SampleSet<T>, y: &SampleSet<T>) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(NaasError::InvalidInput(
            "metrics need nonempty sample sets".into(),
        ));
    }
    if x.dim() != y.dim() {
        return Err(NaasError::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iters: 10_000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    /// Transport cost `⟨P, C⟩`.
    pub cost: f64,
    /// L1 violation of the row marginal at exit.
    pub marginal_error: f64,
    pub iterations: usize,
    /// False if `max_iters` was reached before `tol`.
    pub converged: bool,
}

/// Exponents below this (relative to the row maximum) are dropped from
/// log-sum-exp; they are under one ulp of the result.
const LSE_CUTOFF: f64 = -40.0;

/// Entries within this many units of the row maximum are kept as candidates.
/// Candidates stay valid until a potential drifts by `(MARGIN + LSE_CUTOFF) ε / 2`.
const MARGIN: f64 = 100.0;

/// Sparse candidate lists (CSR) for the rows of a cost matrix.
struct Candidates {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    cost: Vec<f64>,
    /// Potential the lists were built against.
    reference: Vec<f64>,
}

impl Candidates {
    fn build(cost: &[f64], cols: usize, pot: &[f64], eps: f64) -> Self {
        let inv = eps.recip();
        let lists: Vec<Vec<(u32, f64)>> = cost
            .par_chunks(cols)
            .map(|row| {
                let max = row
                    .iter()
                    .zip(pot)
                    .fold(f64::NEG_INFINITY, |m, (c, p)| m.max((p - c) * inv));
                row.iter()
                    .zip(pot)
                    .enumerate()
                    .filter(|(_, (c, p))| (*p - *c) * inv - max > -MARGIN)
                    .map(|(j, (c, _))| (j as u32, *c))
                    .collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let (mut idx, mut cs) = (Vec::new(), Vec::new());
        for l in lists {
            for (j, c) in l {
                idx.push(j);
                cs.push(c);
            }
            offsets.push(idx.len());
        }
        Self {
            offsets,
            cols: idx,
            cost: cs,
            reference: pot.to_vec(),
        }
    }

    fn stale(&self, pot: &[f64], eps: f64) -> bool {
        let drift = pot
            .iter()
            .zip(&self.reference)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        2.0 * drift > (MARGIN + LSE_CUTOFF) * eps
    }

    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.cost[r])
    }

    /// `out_i = -ε LSE_j((pot_j - C_ij)/ε + log_w)` over the candidates.
    fn soft_min(&self, pot: &[f64], eps: f64, log_w: f64, out: &mut [f64]) {
        let inv = eps.recip();
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let (idx, cs) = self.row(i);
            let mut max = f64::NEG_INFINITY;
            for (&j, c) in idx.iter().zip(cs) {
                max = max.max((pot[j as usize] - c) * inv);
            }
            let mut acc = 0.0;
            for (&j, c) in idx.iter().zip(cs) {
                let z = (pot[j as usize] - c) * inv - max;
                if z > LSE_CUTOFF {
                    acc += z.exp();
                }
            }
            *o = -eps * (max + acc.ln() + log_w);
        });
    }

    /// Row-marginal L1 violation and transport cost for potentials `(f, g)`.
    fn plan_stats(&self, f: &[f64], g: &[f64], m: usize, eps: f64) -> (f64, f64) {
        let n = f.len();
        let log_ab = -((n * m) as f64).ln();
        let inv = eps.recip();
        let rows: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (idx, cs) = self.row(i);
                let (mut mass, mut transport) = (0.0, 0.0);
                for (&j, c) in idx.iter().zip(cs) {
                    let p = ((f[i] + g[j as usize] - c) * inv + log_ab).exp();
                    mass += p;
                    transport += p * c;
                }
                (mass, transport)
            })
            .collect();
        let a = (n as f64).recip();
        rows.iter().fold((0.0, 0.0), |(err, tot), (mass, tr)| {
            (err + (mass - a).abs(), tot + tr)
        })
    }
}

/// Returns true when `x` should be the first argument of the canonical
/// evaluation, so that swapping arguments gives a bit-identical result.
fn canonical_first(x: &[Vec<f64>], y: &[Vec<f64>]) -> bool {
    match x.len().cmp(&y.len()) {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    for (a, b) in x.iter().flatten().zip(y.iter().flatten()) {
        match a.total_cmp(b) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    true
}

/// Entropic OT cost between the empirical measures of `x` and `y` with
/// squared-Euclidean ground cost, by log-domain Sinkhorn with ε-scaling.
pub fn sinkhorn<T: Scalar>(
    x: &SampleSet<T>,
    y: &SampleSet<T>,
    cfg: SinkhornConfig,
) -> Result<SinkhornResult> {
    check_pair(x, y)?;
    if !(cfg.epsilon > 0.0) || cfg.max_iters == 0 {
        return Err(NaasError::InvalidInput(
            "sinkhorn needs epsilon > 0 and max_iters > 0".into(),
        ));
    }
    let (xr, yr) = (to_rows(x.data()), to_rows(y.data()));
    let (xr, yr) = if canonical_first(&xr, &yr) {
        (xr, yr)
    } else {
        (yr, xr)
    };
    Ok(sinkhorn_rows(&xr, &yr, cfg))
}

/// Minimum-cost assignment of each row to a distinct column (`n ≤ m`) by
/// shortest augmenting paths. Returns dual potentials `(u, v)` with
/// `u_i + v_j ≤ C_ij`, tight on the assignment.
fn assignment_duals(cost: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; m];
    let mut path = vec![NONE; m];
    let mut shortest = vec![f64::INFINITY; m];
    let mut seen_row = vec![false; n];
    let mut seen_col = vec![false; m];
    let mut remaining: Vec<usize> = Vec::with_capacity(m);
    for cur in 0..n {
        remaining.clear();
        remaining.extend((0..m).rev());
        seen_row.fill(false);
        seen_col.fill(false);
        shortest.fill(f64::INFINITY);
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            seen_row[i] = true;
            let (mut index, mut lowest) = (NONE, f64::INFINITY);
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + cost[i * m + j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(index);
            seen_col[j] = true;
            if row4col[j] == NONE {
                break j;
            }
            i = row4col[j];
        };
        u[cur] += min_val;
        for r in 0..n {
            if seen_row[r] && r != cur {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..m {
            if seen_col[c] {
                v[c] -= min_val - shortest[c];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur {
                break;
            }
        }
    }
    (u, v)
}

fn sinkhorn_rows(x: &[Vec<f64>], y: &[Vec<f64>], cfg: SinkhornConfig) -> SinkhornResult {
    let (n, m) = (x.len(), y.len());
    let cost: Vec<f64> = x
        .iter()
        .flat_map(|a| y.iter().map(move |b| sq(a, b)))
        .collect();
    let mut cost_t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            cost_t[j * n + i] = cost[i * m + j];
        }
    }
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut eps = if n == m {
        // Equal sizes: the optimal assignment is the unregularised plan, and
        // its duals are a warm start close to the entropic fixed point.
        g = assignment_duals(&cost, n, m).1;
        cfg.epsilon
    } else {
        // ε-scaling from the cost scale, warm-starting each stage.
        cost.iter().copied().fold(0.0, f64::max).max(cfg.epsilon)
    };
    let mut iterations = 0;
    loop {
        let last = eps <= cfg.epsilon;
        let cap = if last {
            cfg.max_iters.saturating_sub(iterations).max(1)
        } else {
            1000
        };
        let stage_tol = if last { cfg.tol } else { cfg.tol.max(1e-3) };
        let mut rows = Candidates::build(&cost, m, &g, eps);
        let mut cols = Candidates::build(&cost_t, n, &f, eps);
        for it in 0..cap {
            if rows.stale(&g, eps) {
                rows = Candidates::build(&cost, m, &g, eps);
            }
            rows.soft_min(&g, eps, log_b, &mut f);
            if cols.stale(&f, eps) {
                cols = Candidates::build(&cost_t, n, &f, eps);
            }
            cols.soft_min(&f, eps, log_a, &mut g);
            iterations += 1;
            if (it % 10 == 9 || it + 1 == cap) && rows.plan_stats(&f, &g, m, eps).0 <= stage_tol {
                break;
            }
        }
        if last {
            if rows.stale(&g, eps) {
                rows = Candidates::build(&cost, m, &g, eps);
            }
            let (err, total) = rows.plan_stats(&f, &g, m, eps);
            return SinkhornResult {
                cost: total,
                marginal_error: err,
                iterations,
                converged: err <= cfg.tol,
            };
        }
        eps = (eps * 0.5).max(cfg.epsilon);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    /// Median of the pooled pairwise distances (1 if that median is 0).
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth: f64,
}

/// Fixed-point scale for order-independent kernel sums; values lie in `[0, 1]`.
const FIXED_SCALE: f64 = (1u64 << 62) as f64;

fn fixed_sum(values: impl Iterator<Item = f64>) -> f64 {
    let total: i128 = values.map(|v| (v * FIXED_SCALE).round() as i128).sum();
    total as f64 / FIXED_SCALE
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Unbiased MMD with an RBF kernel `exp(-d²/(2h²))`, clamped at 0 before the
/// square root. Within-set terms need at least two samples per set; a
/// singleton contributes its diagonal `k(x, x) = 1` instead.
pub fn mmd<T: Scalar>(
    x: &SampleSet<T>,
    y: &SampleSet<T>,
    policy: BandwidthPolicy,
) -> Result<MmdResult> {
    check_pair(x, y)?;
    let (xr, yr) = (to_rows(x.data()), to_rows(y.data()));
    let h = match policy {
        BandwidthPolicy::Fixed(h) if h > 0.0 => h,
        BandwidthPolicy::Fixed(h) => {
            return Err(NaasError::InvalidInput(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        BandwidthPolicy::Median => {
            let pooled: Vec<&Vec<f64>> = xr.iter().chain(&yr).collect();
            let dists: Vec<f64> = (0..pooled.len())
                .into_par_iter()
                .flat_map_iter(|i| {
                    let p = &pooled;
                    (i + 1..p.len()).map(move |j| sq(p[i], p[j]).sqrt())
                })
                .collect();
            let med = median(dists);
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    let gamma = 0.5 / (h * h);
    let within = |s: &[Vec<f64>]| -> f64 {
        let n = s.len();
        if n < 2 {
            return 1.0;
        }
        let vals: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| (i + 1..n).map(move |j| (-gamma * sq(&s[i], &s[j])).exp()))
            .collect();
        2.0 * fixed_sum(vals.into_iter()) / (n * (n - 1)) as f64
    };
    let cross: Vec<f64> = xr
        .par_iter()
        .flat_map_iter(|a| yr.iter().map(move |b| (-gamma * sq(a, b)).exp()))
        .collect();
    let kxy = fixed_sum(cross.into_iter()) / (xr.len() * yr.len()) as f64;
    let (kxx, kyy) = (within(&xr), within(&yr));
    let mmd2 = (kxx + kyy) - 2.0 * kxy;
    Ok(MmdResult {
        value: mmd2.max(0.0).sqrt(),
        bandwidth: h,
    })
}

/// Fraction of samples whose nearest center is each center; ties go to the
/// lowest index.
pub fn mode_weights<T: Scalar>(x: ArrayView2<'_, T>, centers: &[Vec<T>]) -> Result<Vec<f64>> {
    if centers.is_empty() {
        return Err(NaasError::InvalidInput(
            "mode weights need at least one center".into(),
        ));
    }
    let mut counts = vec![0usize; centers.len()];
    for row in x.rows() {
        let row: Vec<T> = row.to_vec();
        let mut best = (0, T::infinity());
        for (k, c) in centers.iter().enumerate() {
            if c.len() != row.len() {
                return Err(NaasError::DimensionMismatch {
                    expected: row.len(),
                    got: c.len(),
                });
            }
            let d = crate::scalar::sq_dist(&row, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        counts[best.0] += 1;
    }
    let n = x.nrows().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Exact draw from the 1D density `∝ exp(-(x² - δ)²)` by rejection from a
/// uniform proposal; the density is bounded by 1.
fn double_well<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> f64 {
    let half = delta.max(0.0).sqrt() + 4.0;
    loop {
        let x = rng.random_range(-half..half);
        let u: f64 = rng.random();
        if u < (-(x * x - delta).powi(2)).exp() {
            return x;
        }
    }
}

/// `n` exact i.i.d. draws from the normalised density `∝ exp(-U)`.
pub fn reference_samples<T: Scalar, R: Rng + ?Sized>(
    model: &EnergyModel<T>,
    n: usize,
    seed: u64,
    rng: &mut R,
) -> Result<SampleSet<T>> {
    let d = model.dim();
    let mut data = Array2::zeros((n, d));
    for mut row in data.rows_mut() {
        let x: Vec<f64> = match model {
            EnergyModel::IsotropicGaussian { sigma, .. } => {
                (0..d).map(|_| sigma.as_f64() * normal(rng)).collect()
            }
            EnergyModel::GmmGrid2D(mix)
            | EnergyModel::Gmm40 { mixture: mix, .. }
            | EnergyModel::Bimodal { mixture: mix, .. } => {
                let w: Vec<f64> = mix.weights().iter().map(|w| w.as_f64()).collect();
                let c = &mix.centers()[pick(&w, rng)];
                let s = mix.variance().as_f64().sqrt();
                c.iter().map(|ci| ci.as_f64() + s * normal(rng)).collect()
            }
            EnergyModel::ManyWell { wells, delta, .. } => (0..d)
                .map(|i| {
                    if i < *wells {
                        double_well(delta.as_f64(), rng)
                    } else {
                        normal(rng)
                    }
                })
                .collect(),
            EnergyModel::Funnel { variance, .. } => {
                let x1 = variance.as_f64().sqrt() * normal(rng);
                let s = (0.5 * x1).exp();
                std::iter::once(x1)
                    .chain((1..d).map(|_| s * normal(rng)))
                    .collect()
            }
            EnergyModel::StudentMixture { centers, dof, .. } => {
                let c = &centers[rng.random_range(0..centers.len())];
                let nu = dof.as_f64();
                let chi =
                    ChiSquared::new(nu).map_err(|e| NaasError::InvalidInput(e.to_string()))?;
                let scale = (nu / chi.sample(rng)).sqrt();
                c.iter()
                    .map(|ci| ci.as_f64() + scale * normal(rng))
                    .collect()
            }
        };
        for (o, v) in row.iter_mut().zip(x) {
            *o = T::lit(v);
        }
    }
    SampleSet::new(data, Provenance::Reference, seed)
}

/// Top-two principal axes of the pooled sets, by power iteration with
/// deflation on the covariance.
fn principal_axes(rows: &[Vec<f64>], d: usize) -> (Vec<f64>, [Vec<f64>; 2]) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    let mut axes: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    for (a, axis) in axes.iter_mut().enumerate() {
        if a >= d {
            break;
        }
        let mut v: Vec<f64> = (0..d)
            .map(|i| if i == a { 1.0 } else { 0.5 / (1 + i) as f64 })
            .collect();
        for _ in 0..500 {
            let mut w = vec![0.0; d];
            for i in 0..d {
                w[i] = (0..d).map(|j| cov[i * d + j] * v[j]).sum();
            }
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nw == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / nw).collect();
        }
        let lambda: f64 = (0..d)
            .map(|i| v[i] * (0..d).map(|j| cov[i * d + j] * v[j]).sum::<f64>())
            .sum();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        *axis = v;
    }
    (mean, axes)
}

/// Scatter plot of the sets projected onto the first two principal axes of
/// their union.
pub fn write_scatter_svg<T: Scalar, W: Write>(sets: &[&SampleSet<T>], mut w: W) -> Result<()> {
    const SIZE: f64 = 480.0;
    const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let d = sets.first().map_or(0, |s| s.dim());
    let rows: Vec<Vec<Vec<f64>>> = sets.iter().map(|s| to_rows(s.data())).collect();
    let pooled: Vec<Vec<f64>> = rows.iter().flatten().cloned().collect();
    let (mean, axes) = principal_axes(&pooled, d);
    let project = |r: &[f64]| -> (f64, f64) {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
        let p = |ax: &[f64]| c.iter().zip(ax).map(|(a, b)| a * b).sum::<f64>();
        (p(&axes[0]), p(&axes[1]))
    };
    let pts: Vec<Vec<(f64, f64)>> = rows
        .iter()
        .map(|s| s.iter().map(|r| project(r)).collect())
        .collect();
    let all = pts.iter().flatten();
    let (mut lo, mut hi) = (
        (f64::INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    for &(a, b) in all {
        lo = (lo.0.min(a), lo.1.min(b));
        hi = (hi.0.max(a), hi.1.max(b));
    }
    let span = |l: f64, h: f64| if h > l { h - l } else { 1.0 };
    let (sx, sy) = (span(lo.0, hi.0), span(lo.1, hi.1));
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    for (k, (set, p)) in sets.iter().zip(&pts).enumerate() {
        writeln!(
            w,
            r#"<g fill="{}" fill-opacity="0.5"><title>{}</title>"#,
            COLORS[k % 4],
            set.provenance().as_str()
        )?;
        for &(a, b) in p {
            let px = 10.0 + (a - lo.0) / sx * (SIZE - 20.0);
            let py = SIZE - 10.0 - (b - lo.1) / sy * (SIZE - 20.0);
            writeln!(w, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5"/>"#)?;
        }
        writeln!(w, "</g>")?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(data: Array2<f64>) -> SampleSet<f64> {
        SampleSet::new(data, Provenance::Generated, 0).unwrap()
    }

    fn random_set(n: usize, d: usize, seed: u64) -> SampleSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        set(Array2::from_shape_fn((n, d), |_| rng.random::<f64>()))
    }

    /// Plain-domain fixed point `u = a / K v`, `v = b / Kᵀ u`.
    fn dense_sinkhorn(x: &SampleSet<f64>, y: &SampleSet<f64>, eps: f64) -> f64 {
        let (n, m) = (x.len(), y.len());
        let c = Array2::from_shape_fn((n, m), |(i, j)| {
            sq(
                x.data().row(i).as_slice().unwrap(),
                y.data().row(j).as_slice().unwrap(),
            )
        });
        let k = c.mapv(|v| (-v / eps).exp());
        let (mut u, mut v) = (vec![1.0; n], vec![1.0; m]);
        for _ in 0..100_000 {
            for i in 0..n {
                u[i] = 1.0 / n as f64 / (0..m).map(|j| k[[i, j]] * v[j]).sum::<f64>();
            }
            for j in 0..m {
                v[j] = 1.0 / m as f64 / (0..n).map(|i| k[[i, j]] * u[i]).sum::<f64>();
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..m {
                total += u[i] * k[[i, j]] * v[j] * c[[i, j]];
            }
        }
        total
    }

    fn assignment_cost(x: &SampleSet<f64>, y: &SampleSet<f64>) -> f64 {
        fn perms(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == p.len() {
                out.push(p.clone());
            }
            for i in k..p.len() {
                p.swap(k, i);
                perms(k + 1, p, out);
                p.swap(k, i);
            }
        }
        let n = x.len();
        let mut all = Vec::new();
        perms(0, &mut (0..n).collect(), &mut all);
        all.iter()
            .map(|p| {
                (0..n)
                    .map(|i| {
                        sq(
                            x.data().row(i).as_slice().unwrap(),
                            y.data().row(p[i]).as_slice().unwrap(),
                        )
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_points_cost_their_distance() {
        let x = set(array![[1.0, 2.0]]);
        let y = set(array![[-1.0, 0.5]]);
        let r = sinkhorn(&x, &y, SinkhornConfig::default()).unwrap();
        assert!((r.cost - 6.25).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn matches_dense_fixed_point_on_tiny_sets() {
        for seed in 0..5 {
            let (x, y) = (random_set(4, 2, seed), random_set(4, 2, seed + 100));
            let cfg = SinkhornConfig {
                epsilon: 0.05,
                max_iters: 100_000,
                tol: 1e-13,
            };
            let r = sinkhorn(&x, &y, cfg).unwrap();
            let oracle = dense_sinkhorn(&x, &y, 0.05);
            assert!(
                (r.cost - oracle).abs() <= 1e-6 * oracle,
                "{} vs {oracle}",
                r.cost
            );
        }
    }

    #[test]
    fn small_epsilon_approaches_assignment() {
        let (x, y) = (random_set(6, 2, 7), random_set(6, 2, 8));
        let exact = assignment_cost(&x, &y);
        let r = sinkhorn(&x, &y, SinkhornConfig::default()).unwrap();
        assert!(
            (r.cost - exact).abs() < 1e-3 * exact.max(1e-3),
            "{} vs {exact}",
            r.cost
        );
    }

    #[test]
    fn sinkhorn_is_symmetric_and_non_negative() {
        let (x, y) = (random_set(30, 3, 1), random_set(25, 3, 2));
        let a = sinkhorn(&x, &y, SinkhornConfig::default()).unwrap();
        let b = sinkhorn(&y, &x, SinkhornConfig::default()).unwrap();
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
        assert!(a.cost >= 0.0);
    }

    #[test]
    fn identical_sets_are_near_zero() {
        let x = random_set(200, 5, 3);
        let r = sinkhorn(&x, &x, SinkhornConfig::default()).unwrap();
        assert!(r.cost <= 1e-3 * (200f64).ln(), "{}", r.cost);
    }

    #[test]
    fn empty_or_mismatched_sets_are_rejected() {
        let x = random_set(3, 2, 0);
        assert!(sinkhorn(&x, &random_set(0, 2, 0), SinkhornConfig::default()).is_err());
        assert!(mmd(&x, &random_set(3, 3, 0), BandwidthPolicy::Median).is_err());
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let x = random_set(50, 3, 4);
        assert_eq!(mmd(&x, &x, BandwidthPolicy::Median).unwrap().value, 0.0);
    }

    #[test]
    fn mmd_hand_computed_point_masses() {
        let x = set(array![[0.0, 0.0], [0.0, 0.0]]);
        let y = set(array![[3.0, 4.0], [3.0, 4.0]]);
        // Median of pooled distances {0, 0, 5, 5, 5, 5} is 5.
        let r = mmd(&x, &y, BandwidthPolicy::Median).unwrap();
        assert_eq!(r.bandwidth, 5.0);
        assert!((r.value - (2.0 - 2.0 * (-0.5f64).exp()).sqrt()).abs() < 1e-15);
        let far = mmd(&x, &y, BandwidthPolicy::Fixed(0.1)).unwrap();
        assert!((far.value - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mmd_is_permutation_invariant_and_symmetric() {
        let (x, y) = (random_set(40, 2, 5), random_set(30, 2, 6));
        let a = mmd(&x, &y, BandwidthPolicy::Median).unwrap().value;
        let mut rows: Vec<_> = x.data().rows().into_iter().map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.swap(3, 17);
        let shuffled = set(Array2::from_shape_vec((40, 2), rows.concat()).unwrap());
        assert_eq!(
            mmd(&shuffled, &y, BandwidthPolicy::Median)
                .unwrap()
                .value
                .to_bits(),
            a.to_bits()
        );
        assert_eq!(
            mmd(&y, &x, BandwidthPolicy::Median)
                .unwrap()
                .value
                .to_bits(),
            a.to_bits()
        );
    }

    #[test]
    fn mmd_shrinks_with_sample_size() {
        let g = EnergyModel::<f64>::gaussian(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = |n| reference_samples(&g, n, 0, &mut rng).unwrap();
        // The clamped estimator is often exactly 0 at small n, so compare means.
        let mut avg = |n| {
            (0..10)
                .map(|_| {
                    mmd(&draw(n), &draw(n), BandwidthPolicy::Median)
                        .unwrap()
                        .value
                })
                .sum::<f64>()
                / 10.0
        };
        let small = avg(100);
        let large = avg(2000);
        assert!(large < small, "{large} vs {small}");
    }

    #[test]
    fn mode_weights_and_ties() {
        let centers = vec![vec![0.0], vec![2.0]];
        assert_eq!(
            mode_weights(array![[0.0], [0.1]].view(), &centers).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            mode_weights(array![[1.0]].view(), &centers).unwrap(),
            vec![1.0, 0.0]
        );
        assert!(mode_weights(array![[1.0]].view(), &[]).is_err());
    }

    #[test]
    fn bimodal_reference_weights() {
        let m = EnergyModel::<f64>::bimodal(4, 1.0, 2.0 / 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let s = reference_samples(&m, n, 0, &mut rng).unwrap();
        // Component membership, not nearest center: the modes overlap at a = 1.
        let first = s
            .data()
            .rows()
            .into_iter()
            .filter(|r| r.sum() < 0.0)
            .count() as f64
            / n as f64;
        let p = 2.0 / 3.0;
        assert!((first - p).abs() < 0.01, "{first}");
        let far = EnergyModel::<f64>::bimodal(4, 5.0, p).unwrap();
        let s = reference_samples(&far, n, 0, &mut rng).unwrap();
        let w = mode_weights(s.data(), &far.mode_centers().unwrap()).unwrap();
        assert!(
            (w[0] - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(),
            "{w:?}"
        );
    }

    #[test]
    fn grid_reference_is_uniform_over_modes() {
        let m = EnergyModel::<f64>::gmm_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let s = reference_samples(&m, n, 0, &mut rng).unwrap();
        let w = mode_weights(s.data(), &m.mode_centers().unwrap()).unwrap();
        let se = (1.0 / 9.0 * 8.0 / 9.0 / n as f64).sqrt();
        assert!(w.iter().all(|p| (p - 1.0 / 9.0).abs() < 3.0 * se), "{w:?}");
    }

    #[test]
    fn funnel_first_coordinate_variance() {
        let m = EnergyModel::<f64>::funnel(10, 9.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 50_000;
        let s = reference_samples(&m, n, 0, &mut rng).unwrap();
        let c = s.data().column(0).to_owned();
        let mean = c.sum() / n as f64;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (var - 9.0).abs() < 3.0 * 9.0 * (2.0 / n as f64).sqrt(),
            "{var}"
        );
    }

    #[test]
    fn many_well_matches_quadrature_moments() {
        // Second moment of exp(-(x²-4)²) by trapezoidal quadrature.
        let (lo, hi, k) = (-7.0, 7.0, 200_000);
        let h = (hi - lo) / k as f64;
        let (mut z, mut m2) = (0.0, 0.0);
        for i in 0..=k {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == k { 0.5 } else { 1.0 } * (-(x * x - 4.0f64).powi(2)).exp();
            z += w;
            m2 += w * x * x;
        }
        let m2 = m2 / z;
        let m = EnergyModel::<f64>::many_well(5, 5, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let s = reference_samples(&m, n, 0, &mut rng).unwrap();
        let emp = s.data().iter().map(|v| v * v).sum::<f64>() / (5 * n) as f64;
        assert!((emp - m2).abs() < 0.02, "{emp} vs {m2}");
        // Every coordinate sits near a well at ±2.
        let near = s
            .data()
            .iter()
            .filter(|v| (v.abs() - 2.0).abs() < 1.0)
            .count();
        assert!(near as f64 > 0.99 * (5 * n) as f64);
    }

    #[test]
    fn student_reference_is_heavy_tailed_around_centers() {
        let m = EnergyModel::<f64>::student_mixture(2, 1, 2.0, 4).unwrap();
        let c = m.mode_centers().unwrap()[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = reference_samples(&m, 20_000, 0, &mut rng).unwrap();
        let mut d0: Vec<f64> = s.data().column(0).iter().map(|v| v - c[0]).collect();
        d0.sort_by(f64::total_cmp);
        assert!(d0[10_000].abs() < 0.05);
        // A t₂ marginal has P(|x| > 4.303) = 0.05.
        let tail = d0.iter().filter(|v| v.abs() > 4.303).count() as f64 / 20_000.0;
        assert!((tail - 0.05).abs() < 0.01, "{tail}");
    }

    #[test]
    fn scatter_svg_has_one_circle_per_sample() {
        let (x, y) = (random_set(7, 3, 1), random_set(5, 3, 2));
        let mut buf = Vec::new();
        write_scatter_svg(&[&x, &y], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches("<circle").count(), 12);
        assert!(text.starts_with("<svg"));
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        assert!(SampleSet::new(array![[f64::NAN]], Provenance::Generated, 0).is_err());
    }
}
