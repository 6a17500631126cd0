//! Alternating optimisation of the annealed control `u` (adjoint matching)
//! and the prior control `v` (reciprocal adjoint matching), plus the
//! single-stage adjoint-sampler baseline.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::buffer::{BoundaryPair, BufferU, BufferV, ReplayBuffer, StateAdjoint};
use crate::dynamics::{
    bridge_sample, simulate, simulate_endpoints, solve_lean_adjoint, SimConfig, Trajectory,
};
use crate::energy::{AnnealedPotential, EnergyModel};
use crate::error::{NaasError, Result};
use crate::iws::{log_weights, WeightSet};
use crate::metrics::{
    mmd, reference_samples, sinkhorn, BandwidthPolicy, Provenance, SampleSet, SinkhornConfig,
};
use crate::net::{Adam, AdamConfig, ControlNet, NetConfig};
use crate::rng::{stream, StreamSeed};
use crate::scalar::{clip_norm, Scalar};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Both controls are trained.
    Naas,
    /// `v ≡ 0`: only the annealed control is trained.
    NaasBiased,
    /// Single-stage sampler on `[-1, 0]` with a Brownian reference.
    AsBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Naas => "naas",
            Self::NaasBiased => "naas-biased",
            Self::AsBaseline => "as-baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = NaasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naas" => Ok(Self::Naas),
            "naas-biased" => Ok(Self::NaasBiased),
            "as-baseline" => Ok(Self::AsBaseline),
            other => Err(NaasError::InvalidInput(format!(
                "unknown mode `{other}` (expected naas, naas-biased or as-baseline)"
            ))),
        }
    }
}

/// When sample-quality metrics are computed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCadence {
    /// After every u- and v-phase.
    Phase,
    /// After the last phase of each stage.
    Stage,
    /// Once, after training.
    Final,
    Never,
}

impl EvalCadence {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Phase => "phase",
            Self::Stage => "stage",
            Self::Final => "final",
            Self::Never => "never",
        }
    }
}

impl FromStr for EvalCadence {
    type Err = NaasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase" => Ok(Self::Phase),
            "stage" => Ok(Self::Stage),
            "final" => Ok(Self::Final),
            "never" => Ok(Self::Never),
            other => Err(NaasError::InvalidInput(format!(
                "unknown eval cadence `{other}` (expected phase, stage, final or never)"
            ))),
        }
    }
}

/// Everything that defines a training run besides the target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// `K`; zero leaves both controls at their zero initialisation.
    pub stages: usize,
    pub epochs_u: usize,
    pub epochs_v: usize,
    pub updates_u: usize,
    pub updates_v: usize,
    pub batch_size: usize,
    /// `N`, paths simulated per buffer refresh.
    pub paths: usize,
    pub buffer_capacity: usize,
    /// Every `stride`-th annealed step of a path enters the u-buffer.
    pub stride: usize,
    pub lr_u: f64,
    pub lr_v: f64,
    /// `E_max`.
    pub energy_clip: Option<f64>,
    /// `A_max`.
    pub adjoint_clip: Option<f64>,
    /// Global gradient-norm clip of the optimiser.
    pub grad_clip: Option<f64>,
    pub sigma_bar: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_prior: usize,
    pub n_anneal: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub time_embedding: usize,
    pub max_frequency: f64,
    pub eval_samples: usize,
    pub eval_cadence: EvalCadence,
    pub sinkhorn: SinkhornConfig,
    pub mmd_bandwidth: BandwidthPolicy,
}

impl Default for TrainConfig {
    /// The many-well column of the published hyperparameter table.
    fn default() -> Self {
        Self {
            mode: Mode::Naas,
            stages: 3,
            epochs_u: 100,
            epochs_v: 100,
            updates_u: 400,
            updates_v: 400,
            batch_size: 512,
            paths: 2048,
            buffer_capacity: 10_000,
            stride: 1,
            lr_u: 1e-5,
            lr_v: 1e-8,
            energy_clip: Some(100.0),
            adjoint_clip: None,
            grad_clip: Some(1.0),
            sigma_bar: 1.0,
            sigma_min: 0.01,
            sigma_max: 1.0,
            n_prior: 100,
            n_anneal: 100,
            seed: 0,
            hidden: vec![128; 3],
            time_embedding: 64,
            max_frequency: 100.0,
            eval_samples: 2000,
            eval_cadence: EvalCadence::Phase,
            sinkhorn: SinkhornConfig::default(),
            mmd_bandwidth: BandwidthPolicy::Median,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs_u", self.epochs_u),
            ("epochs_v", self.epochs_v),
            ("updates_u", self.updates_u),
            ("updates_v", self.updates_v),
            ("batch_size", self.batch_size),
            ("paths", self.paths),
            ("buffer_capacity", self.buffer_capacity),
            ("stride", self.stride),
            ("n_prior", self.n_prior),
            ("n_anneal", self.n_anneal),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(NaasError::InvalidInput(format!("{name} must be positive")));
            }
        }
        let positive = [
            ("sigma_bar", self.sigma_bar),
            ("sigma_min", self.sigma_min),
            ("sigma_max", self.sigma_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NaasError::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [("lr_u", self.lr_u), ("lr_v", self.lr_v)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NaasError::InvalidInput(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("energy_clip", self.energy_clip),
            ("adjoint_clip", self.adjoint_clip),
            ("grad_clip", self.grad_clip),
        ] {
            if matches!(v, Some(c) if !(c > 0.0)) {
                return Err(NaasError::InvalidInput(format!(
                    "{name} must be positive when set"
                )));
            }
        }
        if self.sigma_min >= self.sigma_max {
            return Err(NaasError::InvalidInput(format!(
                "sigma_min ({}) must be below sigma_max ({})",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn net_config(&self, dim: usize) -> NetConfig {
        NetConfig {
            dim,
            hidden: self.hidden.clone(),
            time_embedding: self.time_embedding,
            max_frequency: self.max_frequency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    U,
    V,
    /// The single control of the baseline.
    Baseline,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::U => "u",
            Self::V => "v",
            Self::Baseline => "as",
        }
    }
}

/// Sample-quality metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub sinkhorn: f64,
    pub sinkhorn_converged: bool,
    pub mmd: f64,
    pub mmd_bandwidth: f64,
    /// `Var(N ŵ)`; NaN where path weights are not defined.
    pub iw_variance: f64,
    pub ess: f64,
}

/// One row of the training history: an epoch's mean loss, plus the
/// evaluation taken at the end of the phase when one was scheduled.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub stage: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub eval: Option<Evaluation>,
}

/// Parameter fingerprints around one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseRecord {
    pub stage: usize,
    pub phase: Phase,
    pub u_before: u64,
    pub u_after: u64,
    pub v_before: u64,
    pub v_after: u64,
}

/// Work counters; regression steps never trigger simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub refreshes: u64,
    pub simulated_paths: u64,
    pub adjoint_solves: u64,
    pub regression_steps: u64,
    pub evaluations: u64,
}

/// Terminal samples `X_1` of `n` fresh paths (or `X_0` when `anneal` is false).
#[allow(clippy::too_many_arguments)]
pub fn sample<T: Scalar>(
    u: Option<&ControlNet<T>>,
    v: Option<&ControlNet<T>>,
    pot: &AnnealedPotential<T>,
    sched: &NoiseSchedule<T>,
    sim: &SimConfig<T>,
    n: usize,
    streams: StreamSeed,
    anneal: bool,
) -> Result<SampleSet<T>> {
    let (x, diverged) = simulate_endpoints(v, u, pot, sched, sim, streams, n, anneal)?;
    if let Some(i) = diverged.iter().position(|&d| d) {
        return Err(NaasError::InvalidState(format!("sample path {i} diverged")));
    }
    SampleSet::new(x, Provenance::Generated, streams.sub)
}

/// State of a training run. Drive it with [`Trainer::run_stage`] or
/// [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    pot: AnnealedPotential<T>,
    sched: NoiseSchedule<T>,
    sim: SimConfig<T>,
    u: ControlNet<T>,
    v: ControlNet<T>,
    opt_u: Adam<T>,
    opt_v: Adam<T>,
    buf_u: BufferU<T>,
    buf_v: BufferV<T>,
    reference: Option<SampleSet<T>>,
    history: Vec<HistoryRow>,
    phases: Vec<PhaseRecord>,
    counters: Counters,
    stages_done: usize,
    refresh_id: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the annealed potential from `U_0 = ‖x‖²/(2σ̄²)` to `target`
    /// and zero-output networks initialised from the `init` stream.
    pub fn new(cfg: TrainConfig, target: EnergyModel<T>) -> Result<Self> {
        cfg.validate()?;
        let d = target.dim();
        let prior = EnergyModel::gaussian(d, T::lit(cfg.sigma_bar))?;
        let pot = AnnealedPotential::new(prior, target)?
            .with_grad_clip(cfg.energy_clip.map(T::lit))
            .with_hvp_clip(cfg.adjoint_clip.map(T::lit));
        let sched = NoiseSchedule::geometric(T::lit(cfg.sigma_min), T::lit(cfg.sigma_max))?;
        let sim = SimConfig::new(cfg.n_prior, cfg.n_anneal, T::lit(cfg.sigma_bar))?;
        let nc = cfg.net_config(d);
        let u = ControlNet::new(nc.clone(), &mut stream(cfg.seed, "init", 0, 0))?;
        let v = ControlNet::new(nc, &mut stream(cfg.seed, "init", 1, 0))?;
        let adam = |lr: f64| AdamConfig {
            grad_clip: cfg.grad_clip.map(T::lit),
            ..AdamConfig::with_lr(T::lit(lr))
        };
        let (lr_u, lr_v) = match cfg.mode {
            // The baseline's single control is trained on the u-phase budget.
            Mode::AsBaseline => (cfg.lr_u, cfg.lr_u),
            _ => (cfg.lr_u, cfg.lr_v),
        };
        Ok(Self {
            opt_u: Adam::new(adam(lr_u), u.num_params()),
            opt_v: Adam::new(adam(lr_v), v.num_params()),
            buf_u: ReplayBuffer::new(cfg.buffer_capacity)?,
            buf_v: ReplayBuffer::new(cfg.buffer_capacity)?,
            cfg,
            pot,
            sched,
            sim,
            u,
            v,
            reference: None,
            history: Vec::new(),
            phases: Vec::new(),
            counters: Counters::default(),
            stages_done: 0,
            refresh_id: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn potential(&self) -> &AnnealedPotential<T> {
        &self.pot
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.sched
    }

    pub fn sim_config(&self) -> &SimConfig<T> {
        &self.sim
    }

    pub fn u(&self) -> &ControlNet<T> {
        &self.u
    }

    pub fn v(&self) -> &ControlNet<T> {
        &self.v
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn phases(&self) -> &[PhaseRecord] {
        &self.phases
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn stages_done(&self) -> usize {
        self.stages_done
    }

    pub fn buffer_u(&self) -> &BufferU<T> {
        &self.buf_u
    }

    pub fn buffer_v(&self) -> &BufferV<T> {
        &self.buf_v
    }

    /// Replaces the controls, e.g. when resuming from checkpoints.
    pub fn set_nets(&mut self, u: ControlNet<T>, v: ControlNet<T>) -> Result<()> {
        let d = self.pot.dim();
        for net in [&u, &v] {
            if net.dim() != d {
                return Err(NaasError::DimensionMismatch {
                    expected: d,
                    got: net.dim(),
                });
            }
        }
        self.opt_u = Adam::new(self.opt_u.config, u.num_params());
        self.opt_v = Adam::new(self.opt_v.config, v.num_params());
        self.u = u;
        self.v = v;
        Ok(())
    }

    /// The prior control as used in simulation: `None` when frozen at zero.
    fn v_active(&self) -> Option<&ControlNet<T>> {
        match self.cfg.mode {
            Mode::NaasBiased => None,
            _ => Some(&self.v),
        }
    }

    fn u_active(&self) -> Option<&ControlNet<T>> {
        match self.cfg.mode {
            Mode::AsBaseline => None,
            _ => Some(&self.u),
        }
    }

    fn next_refresh(&mut self) -> StreamSeed {
        let s = StreamSeed::new(self.cfg.seed, "paths", self.refresh_id);
        self.refresh_id += 1;
        self.counters.refreshes += 1;
        s
    }

    /// Simulates the trailing paths of a refresh of `N` whose entries survive
    /// FIFO eviction. Paths are addressed by index, so the buffer ends up
    /// identical to pushing all `N` paths in order.
    fn surviving_paths(
        &mut self,
        streams: StreamSeed,
        per_path: usize,
        anneal: bool,
    ) -> Result<Vec<Trajectory<T>>> {
        let mut needed = self.cfg.buffer_capacity;
        let mut end = self.cfg.paths;
        let mut chunks = Vec::new();
        while end > 0 && needed > 0 {
            let count = needed.div_ceil(per_path).clamp(1, end);
            let start = end - count;
            let mut sim = self.sim;
            if !anneal {
                // Unused: the baseline only reads the boundary state.
                sim.grid.n_anneal = 1;
            }
            let trajs = simulate(
                self.v_active(),
                self.u_active(),
                &self.pot,
                &self.sched,
                &sim,
                streams,
                start,
                count,
            )?;
            self.counters.simulated_paths += count as u64;
            let kept = trajs.iter().filter(|t| !t.diverged()).count();
            needed = needed.saturating_sub(kept * per_path);
            chunks.push(trajs);
            end = start;
        }
        Ok(chunks.into_iter().rev().flatten().collect())
    }

    fn refresh_u(&mut self) -> Result<()> {
        let streams = self.next_refresh();
        let per_path = self.cfg.n_anneal / self.cfg.stride + 1;
        for traj in self.surviving_paths(streams, per_path, true)? {
            if traj.diverged() {
                continue;
            }
            let adj = solve_lean_adjoint(&traj, &self.pot, &self.sched)?;
            self.counters.adjoint_solves += 1;
            self.buf_u.push_trajectory(&traj, &adj, self.cfg.stride)?;
        }
        Ok(())
    }

    fn refresh_v(&mut self) -> Result<()> {
        let streams = self.next_refresh();
        for traj in self.surviving_paths(streams, 1, true)? {
            if traj.diverged() {
                continue;
            }
            let adj = solve_lean_adjoint(&traj, &self.pot, &self.sched)?;
            self.counters.adjoint_solves += 1;
            self.buf_v.push_boundary(&traj, &adj)?;
        }
        Ok(())
    }

    /// The baseline's terminal adjoint `∇U_1(X_0) - X_0/σ̄²`, clipped at E_max.
    fn refresh_baseline(&mut self) -> Result<()> {
        let streams = self.next_refresh();
        let d = self.pot.dim();
        let mut g1 = vec![T::zero(); d];
        let inv_var = T::lit(self.cfg.sigma_bar).powi(2).recip();
        for traj in self.surviving_paths(streams, 1, false)? {
            if traj.diverged() {
                continue;
            }
            let x0 = traj.boundary_state();
            g1.copy_from_slice(&self.pot.target().grad(x0)?);
            for (g, &x) in g1.iter_mut().zip(x0) {
                *g -= x * inv_var;
            }
            clip_norm(&mut g1, self.pot.grad_clip());
            self.counters.adjoint_solves += 1;
            self.buf_v.push(BoundaryPair {
                x0: x0.to_vec(),
                a0: g1.clone(),
            });
        }
        Ok(())
    }

    /// `M_u` regression steps of `u` onto `-σ_t a_t`. Returns the mean loss.
    fn fit_u(&mut self, rng: &mut impl Rng) -> Result<f64> {
        let d = self.pot.dim();
        let b = self.cfg.batch_size;
        let mut total = 0.0;
        for _ in 0..self.cfg.updates_u {
            let batch: Vec<StateAdjoint<T>> = self.buf_u.sample_batch(b, rng)?;
            let mut times = Vec::with_capacity(b);
            let mut xs = Array2::zeros((b, d));
            let mut ys = Array2::zeros((b, d));
            for (i, e) in batch.iter().enumerate() {
                times.push(e.t);
                let s = self.sched.sigma_unchecked(e.t);
                for j in 0..d {
                    xs[[i, j]] = e.x[j];
                    ys[[i, j]] = -s * e.a[j];
                }
            }
            let loss = self
                .u
                .regression_step(&mut self.opt_u, &times, xs.view(), ys.view())?;
            self.counters.regression_steps += 1;
            total += loss.as_f64();
        }
        Ok(total / self.cfg.updates_u as f64)
    }

    /// Regression of `v` onto `-σ̄ a_0` at bridge points drawn fresh for every
    /// entry and step. Returns the mean loss.
    fn fit_v(&mut self, steps: usize, rng: &mut impl Rng) -> Result<f64> {
        let d = self.pot.dim();
        let b = self.cfg.batch_size;
        let sb = T::lit(self.cfg.sigma_bar);
        let mut total = 0.0;
        for _ in 0..steps {
            let batch: Vec<BoundaryPair<T>> = self.buf_v.sample_batch(b, rng)?;
            let mut times = Vec::with_capacity(b);
            let mut xs = Array2::zeros((b, d));
            let mut ys = Array2::zeros((b, d));
            for (i, e) in batch.iter().enumerate() {
                let t = -T::lit(rng.random::<f64>());
                let x = bridge_sample(&e.x0, t, sb, rng)?;
                times.push(t);
                for j in 0..d {
                    xs[[i, j]] = x[j];
                    ys[[i, j]] = -sb * e.a0[j];
                }
            }
            let loss = self
                .v
                .regression_step(&mut self.opt_v, &times, xs.view(), ys.view())?;
            self.counters.regression_steps += 1;
            total += loss.as_f64();
        }
        Ok(total / steps as f64)
    }

    /// Exact target samples the metrics compare against, drawn once per run.
    pub fn reference(&mut self) -> Result<&SampleSet<T>> {
        if self.reference.is_none() {
            let mut rng = stream(self.cfg.seed, "eval", u64::MAX, 0);
            let r = reference_samples(
                self.pot.target(),
                self.cfg.eval_samples,
                self.cfg.seed,
                &mut rng,
            )?;
            self.reference = Some(r);
        }
        Ok(self.reference.as_ref().expect("just set"))
    }

    /// Sinkhorn, MMD and path-weight diagnostics on `eval_samples` fresh
    /// paths against exact reference samples.
    pub fn evaluate(&mut self) -> Result<Evaluation> {
        self.evaluate_with_samples().map(|(e, _)| e)
    }

    /// [`Trainer::evaluate`], also returning the generated samples.
    pub fn evaluate_with_samples(&mut self) -> Result<(Evaluation, SampleSet<T>)> {
        let n = self.cfg.eval_samples;
        if n == 0 {
            return Err(NaasError::InvalidInput(
                "evaluation needs at least one sample".into(),
            ));
        }
        let streams = StreamSeed::new(self.cfg.seed, "eval", self.counters.evaluations);
        self.counters.evaluations += 1;
        let anneal = self.cfg.mode != Mode::AsBaseline;
        let (generated, iw_variance, ess) = if anneal {
            let trajs = simulate(
                self.v_active(),
                self.u_active(),
                &self.pot,
                &self.sched,
                &self.sim,
                streams,
                0,
                n,
            )?;
            let d = self.pot.dim();
            let flat: Vec<T> = trajs
                .iter()
                .flat_map(|t| t.terminal().iter().copied())
                .collect();
            let x = Array2::from_shape_vec((n, d), flat).expect("n rows of width d");
            let lw = log_weights(&trajs, self.v_active(), self.u_active(), &self.pot)?;
            let (var, ess) = match WeightSet::new(lw) {
                Ok(ws) => (ws.variance(), ws.ess()),
                Err(_) => (f64::NAN, f64::NAN),
            };
            (
                SampleSet::new(x, Provenance::Generated, streams.sub)?,
                var,
                ess,
            )
        } else {
            let s = sample(
                None,
                Some(&self.v),
                &self.pot,
                &self.sched,
                &self.sim,
                n,
                streams,
                false,
            )?;
            (s, f64::NAN, f64::NAN)
        };
        let (sk_cfg, bw) = (self.cfg.sinkhorn, self.cfg.mmd_bandwidth);
        let reference = self.reference()?;
        let sk = sinkhorn(&generated, reference, sk_cfg)?;
        let mm = mmd(&generated, reference, bw)?;
        let eval = Evaluation {
            sinkhorn: sk.cost,
            sinkhorn_converged: sk.converged,
            mmd: mm.value,
            mmd_bandwidth: mm.bandwidth,
            iw_variance,
            ess,
        };
        Ok((eval, generated))
    }

    fn maybe_evaluate(&mut self, end_of_stage: bool) -> Result<Option<Evaluation>> {
        let last_stage = self.stages_done + 1 == self.cfg.stages;
        let due = match self.cfg.eval_cadence {
            EvalCadence::Phase => true,
            EvalCadence::Stage => end_of_stage,
            EvalCadence::Final => end_of_stage && last_stage,
            EvalCadence::Never => false,
        };
        if due {
            self.evaluate().map(Some)
        } else {
            Ok(None)
        }
    }

    fn record_phase(&mut self, phase: Phase, before: (u64, u64)) {
        self.phases.push(PhaseRecord {
            stage: self.stages_done,
            phase,
            u_before: before.0,
            u_after: self.u.fingerprint(),
            v_before: before.1,
            v_after: self.v.fingerprint(),
        });
    }

    fn run_phase(&mut self, phase: Phase, end_of_stage: bool) -> Result<()> {
        let stage = self.stages_done;
        let before = (self.u.fingerprint(), self.v.fingerprint());
        let epochs = match phase {
            Phase::U => self.cfg.epochs_u,
            Phase::V => self.cfg.epochs_v,
            Phase::Baseline => self.cfg.epochs_u + self.cfg.epochs_v,
        };
        for epoch in 0..epochs {
            let ctx = || format!("stage {stage}, {} phase, epoch {epoch}", phase.as_str());
            let sub = self.refresh_id;
            let loss = match phase {
                Phase::U => {
                    self.refresh_u().map_err(|e| e.context(ctx()))?;
                    let mut rng = stream(self.cfg.seed, "batches", sub, 0);
                    self.fit_u(&mut rng).map_err(|e| e.context(ctx()))?
                }
                Phase::V => {
                    self.refresh_v().map_err(|e| e.context(ctx()))?;
                    let mut rng = stream(self.cfg.seed, "batches", sub, 0);
                    self.fit_v(self.cfg.updates_v, &mut rng)
                        .map_err(|e| e.context(ctx()))?
                }
                Phase::Baseline => {
                    self.refresh_baseline().map_err(|e| e.context(ctx()))?;
                    let mut rng = stream(self.cfg.seed, "batches", sub, 0);
                    self.fit_v(self.cfg.updates_u, &mut rng)
                        .map_err(|e| e.context(ctx()))?
                }
            };
            let eval = if epoch + 1 == epochs {
                self.maybe_evaluate(end_of_stage)
                    .map_err(|e| e.context(ctx()))?
            } else {
                None
            };
            self.history.push(HistoryRow {
                stage,
                phase,
                epoch,
                loss,
                eval,
            });
        }
        self.record_phase(phase, before);
        Ok(())
    }

    /// Runs the next stage: the u-phase, then the v-phase (skipped when `v`
    /// is frozen). The baseline trains its single control instead.
    pub fn run_stage(&mut self) -> Result<()> {
        if self.stages_done >= self.cfg.stages {
            return Err(NaasError::InvalidState(format!(
                "all {} stages already ran",
                self.cfg.stages
            )));
        }
        match self.cfg.mode {
            Mode::Naas => {
                self.run_phase(Phase::U, false)?;
                self.run_phase(Phase::V, true)?;
            }
            Mode::NaasBiased => self.run_phase(Phase::U, true)?,
            Mode::AsBaseline => self.run_phase(Phase::Baseline, true)?,
        }
        self.stages_done += 1;
        Ok(())
    }

    /// Runs all remaining stages.
    pub fn run(&mut self) -> Result<()> {
        while self.stages_done < self.cfg.stages {
            self.run_stage()?;
        }
        Ok(())
    }

    /// Terminal samples of the current sampler, from stream `(seed, name)`.
    pub fn sample(&self, n: usize, name: &'static str, sub: u64) -> Result<SampleSet<T>> {
        let streams = StreamSeed::new(self.cfg.seed, name, sub);
        let anneal = self.cfg.mode != Mode::AsBaseline;
        sample(
            self.u_active(),
            self.v_active(),
            &self.pot,
            &self.sched,
            &self.sim,
            n,
            streams,
            anneal,
        )
    }
}

/// Trained controls and the record of how they were obtained.
#[derive(Debug, Clone)]
pub struct TrainOutput<T: Scalar> {
    pub u: ControlNet<T>,
    pub v: ControlNet<T>,
    pub history: Vec<HistoryRow>,
    pub phases: Vec<PhaseRecord>,
    pub counters: Counters,
}

/// Runs a full training.
pub fn train<T: Scalar>(cfg: TrainConfig, target: EnergyModel<T>) -> Result<TrainOutput<T>> {
    let mut trainer = Trainer::new(cfg, target)?;
    trainer.run()?;
    Ok(TrainOutput {
        u: trainer.u.clone(),
        v: trainer.v.clone(),
        history: trainer.history,
        phases: trainer.phases,
        counters: trainer.counters,
    })
}

/// Trains the single-stage adjoint-sampler baseline and returns its control.
pub fn train_as_baseline<T: Scalar>(
    mut cfg: TrainConfig,
    target: EnergyModel<T>,
) -> Result<ControlNet<T>> {
    cfg.mode = Mode::AsBaseline;
    Ok(train(cfg, target)?.v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            stages: 1,
            epochs_u: 2,
            epochs_v: 2,
            updates_u: 5,
            updates_v: 5,
            batch_size: 32,
            paths: 16,
            buffer_capacity: 200,
            n_prior: 10,
            n_anneal: 10,
            lr_u: 1e-3,
            lr_v: 1e-3,
            hidden: vec![16],
            time_embedding: 4,
            max_frequency: 10.0,
            eval_samples: 50,
            eval_cadence: EvalCadence::Never,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in [Mode::Naas, Mode::NaasBiased, Mode::AsBaseline] {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("other".parse::<Mode>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..tiny(Mode::Naas)
            },
            TrainConfig {
                sigma_min: 2.0,
                sigma_max: 1.0,
                ..tiny(Mode::Naas)
            },
            TrainConfig {
                lr_u: -1.0,
                ..tiny(Mode::Naas)
            },
            TrainConfig {
                adjoint_clip: Some(0.0),
                ..tiny(Mode::Naas)
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn zero_stages_leave_zero_controls() {
        let cfg = TrainConfig {
            stages: 0,
            ..tiny(Mode::Naas)
        };
        let target = EnergyModel::<f64>::gmm_grid();
        let out = train(cfg.clone(), target.clone()).unwrap();
        assert!(out.u.params().iter().rev().take(2).all(|&p| p == 0.0));
        assert_eq!(out.u.forward(0.5, &[1.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(out.counters, Counters::default());
        // Sampling equals the uncontrolled annealed reference.
        let tr = Trainer::new(cfg, target).unwrap();
        let s = tr.sample(20, "eval", 0).unwrap();
        let (r, _) = simulate_endpoints(
            None,
            None,
            tr.potential(),
            tr.schedule(),
            tr.sim_config(),
            StreamSeed::new(3, "eval", 0),
            20,
            true,
        )
        .unwrap();
        assert_eq!(s.data(), r.view());
    }

    #[test]
    fn phases_only_touch_their_own_control() {
        let out = train(tiny(Mode::Naas), EnergyModel::<f64>::gmm_grid()).unwrap();
        assert_eq!(out.phases.len(), 2);
        let (pu, pv) = (out.phases[0], out.phases[1]);
        assert_eq!(pu.phase, Phase::U);
        assert_ne!(pu.u_before, pu.u_after);
        assert_eq!(pu.v_before, pu.v_after);
        assert_eq!(pv.u_before, pv.u_after);
        assert_ne!(pv.v_before, pv.v_after);
    }

    #[test]
    fn biased_mode_never_trains_v() {
        let out = train(tiny(Mode::NaasBiased), EnergyModel::<f64>::gmm_grid()).unwrap();
        assert!(out
            .phases
            .iter()
            .all(|p| p.phase == Phase::U && p.v_before == p.v_after));
        assert!(out.history.iter().all(|r| r.phase == Phase::U));
    }

    #[test]
    fn regression_never_triggers_simulation() {
        let a = train(tiny(Mode::Naas), EnergyModel::<f64>::gmm_grid())
            .unwrap()
            .counters;
        let cfg = TrainConfig {
            updates_u: 20,
            updates_v: 20,
            ..tiny(Mode::Naas)
        };
        let b = train(cfg, EnergyModel::<f64>::gmm_grid()).unwrap().counters;
        assert_eq!(a.refreshes, b.refreshes);
        assert_eq!(a.simulated_paths, b.simulated_paths);
        assert_eq!(a.adjoint_solves, b.adjoint_solves);
        assert_eq!(b.regression_steps, 4 * 20);
        assert_eq!(a.refreshes, 4);
    }

    #[test]
    fn only_surviving_paths_are_simulated() {
        // 11 entries per path and capacity 200: the last 19 of 40 paths survive.
        let cfg = TrainConfig {
            paths: 40,
            epochs_v: 1,
            ..tiny(Mode::Naas)
        };
        let mut tr = Trainer::new(cfg.clone(), EnergyModel::<f64>::gmm_grid()).unwrap();
        tr.refresh_u().unwrap();
        assert_eq!(tr.counters.simulated_paths, 19);
        assert_eq!(tr.buffer_u().len(), 200);
        // Equal to pushing every path in order.
        let mut full: BufferU<f64> = ReplayBuffer::new(200).unwrap();
        let trajs = simulate(
            Some(tr.v()),
            Some(tr.u()),
            tr.potential(),
            tr.schedule(),
            tr.sim_config(),
            StreamSeed::new(3, "paths", 0),
            0,
            40,
        )
        .unwrap();
        for t in &trajs {
            let adj = solve_lean_adjoint(t, tr.potential(), tr.schedule()).unwrap();
            full.push_trajectory(t, &adj, 1).unwrap();
        }
        assert!(full.iter().eq(tr.buffer_u().iter()));
    }

    #[test]
    fn self_target_drives_controls_to_zero() {
        // U_1 = U_0: every adjoint target is zero.
        let cfg = TrainConfig {
            epochs_u: 3,
            epochs_v: 3,
            updates_u: 30,
            updates_v: 30,
            lr_u: 1e-2,
            lr_v: 1e-2,
            ..tiny(Mode::Naas)
        };
        let mut tr = Trainer::new(cfg, EnergyModel::<f64>::gaussian(2, 1.0).unwrap()).unwrap();
        // Start from a non-zero control so the regression has work to do.
        let mut rng = stream(9, "init", 5, 0);
        for net in [&mut tr.u, &mut tr.v] {
            net.params_mut()
                .iter_mut()
                .for_each(|p| *p += rng.random_range(-0.05..0.05));
        }
        tr.run().unwrap();
        assert!(tr.buffer_u().iter().all(|e| e.a.iter().all(|&a| a == 0.0)));
        let traj = &simulate(
            Some(tr.v()),
            Some(tr.u()),
            tr.potential(),
            tr.schedule(),
            tr.sim_config(),
            StreamSeed::new(1, "x", 0),
            0,
            20,
        )
        .unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for t in traj {
            for k in 0..t.grid().len() - 1 {
                let net = if k < 10 { tr.v() } else { tr.u() };
                let c = net.forward(t.grid().time(k), t.state(k));
                total += c.iter().map(|v| v * v).sum::<f64>().sqrt();
                count += 1;
            }
        }
        assert!(total / (count as f64) <= 1e-2, "{}", total / count as f64);
    }

    #[test]
    fn frozen_buffer_loss_decreases() {
        let mut tr = Trainer::new(
            TrainConfig {
                lr_u: 1e-3,
                ..tiny(Mode::Naas)
            },
            EnergyModel::<f64>::gmm_grid(),
        )
        .unwrap();
        tr.refresh_u().unwrap();
        let refreshes = tr.counters.refreshes;
        let full_loss = |tr: &Trainer<f64>| {
            let entries: Vec<_> = tr.buffer_u().iter().cloned().collect();
            let times: Vec<f64> = entries.iter().map(|e| e.t).collect();
            let xs = Array2::from_shape_fn((entries.len(), 2), |(i, j)| entries[i].x[j]);
            let ys = Array2::from_shape_fn((entries.len(), 2), |(i, j)| {
                -tr.schedule().sigma(entries[i].t).unwrap() * entries[i].a[j]
            });
            tr.u().loss_and_grad(&times, xs.view(), ys.view()).0
        };
        let before = full_loss(&tr);
        let mut rng = stream(1, "batches", 99, 0);
        for _ in 0..20 {
            assert!(tr.fit_u(&mut rng).unwrap().is_finite());
        }
        let after = full_loss(&tr);
        assert!(after < before, "{after} vs {before}");
        assert_eq!(tr.counters.refreshes, refreshes);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = TrainConfig {
            eval_cadence: EvalCadence::Phase,
            ..tiny(Mode::Naas)
        };
        let a = train(cfg.clone(), EnergyModel::<f64>::gmm_grid()).unwrap();
        let b = train(cfg, EnergyModel::<f64>::gmm_grid()).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.history, b.history);
        assert!(a.history.iter().filter(|r| r.eval.is_some()).count() == 2);
    }

    #[test]
    fn baseline_trains_one_control_deterministically() {
        let cfg = tiny(Mode::AsBaseline);
        let a = train_as_baseline(cfg.clone(), EnergyModel::<f64>::gmm_grid()).unwrap();
        let b = train_as_baseline(cfg, EnergyModel::<f64>::gmm_grid()).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().any(|&p| p != 0.0));
    }

    #[test]
    fn baseline_on_its_reference_law_has_zero_targets() {
        // ν = N(0, σ̄²) is the reference terminal law, so ∇g ≡ 0.
        let mut tr = Trainer::new(
            tiny(Mode::AsBaseline),
            EnergyModel::<f64>::gaussian(2, 1.0).unwrap(),
        )
        .unwrap();
        tr.run().unwrap();
        assert!(tr
            .buffer_v()
            .iter()
            .all(|e| e.a0.iter().all(|&a| a.abs() < 1e-15)));
        assert!(tr
            .v()
            .forward(-0.5, &[0.3, 0.1])
            .iter()
            .all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn sample_of_zero_is_empty() {
        let tr = Trainer::new(tiny(Mode::Naas), EnergyModel::<f64>::gmm_grid()).unwrap();
        assert!(tr.sample(0, "eval", 0).unwrap().is_empty());
    }

    #[test]
    fn zero_nets_on_gaussian_self_target_match_moments() {
        let cfg = TrainConfig {
            n_prior: 20,
            n_anneal: 20,
            ..tiny(Mode::Naas)
        };
        let tr = Trainer::new(cfg, EnergyModel::<f64>::gaussian(2, 1.0).unwrap()).unwrap();
        let n = 20_000;
        let s = tr.sample(n, "eval", 1).unwrap();
        // The Euler–Maruyama variance recursion on the annealed stage.
        let mut var = 1.0;
        for j in 0..20 {
            let sig = tr.schedule().sigma(j as f64 / 20.0).unwrap();
            var = (1.0 - 0.5 * sig * sig / 20.0).powi(2) * var + sig * sig / 20.0;
        }
        for c in s.data().columns() {
            let m = c.sum() / n as f64;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(m.abs() < 3.0 * (var / n as f64).sqrt());
            assert!(
                (v - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt(),
                "{v} vs {var}"
            );
        }
    }
}
