//! Experiment configuration: a TOML file with one section per module.
//!
//! Every key is optional except `experiment.benchmark`, which selects the
//! target and the defaults of all other keys. Values are layered as
//! benchmark defaults < file < `NAAS_<SECTION>_<KEY>` environment variables
//! < command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use naas::energy::EnergyModel;
use naas::metrics::{BandwidthPolicy, SinkhornConfig};
use naas::trainer::{EvalCadence, Mode, TrainConfig};
use serde::Deserialize;

/// Prefix of environment overrides, e.g. `NAAS_TRAINER_LR_U=1e-4`.
pub const ENV_PREFIX: &str = "NAAS_";

const SECTIONS: [&str; 7] = [
    "experiment",
    "energy",
    "schedule",
    "dynamics",
    "net",
    "trainer",
    "metrics",
];

/// An invalid configuration. The CLI maps it to exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source_name, l, self.message),
            None => write!(f, "{}: {}", self.source_name, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    ManyWell,
    Funnel,
    Gmm40,
    MixtureOfStudents,
    GmmGrid,
    Bimodal,
    Gaussian,
}

impl Benchmark {
    pub const ALL: [Self; 7] = [
        Self::ManyWell,
        Self::Funnel,
        Self::Gmm40,
        Self::MixtureOfStudents,
        Self::GmmGrid,
        Self::Bimodal,
        Self::Gaussian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ManyWell => "mw54",
            Self::Funnel => "funnel",
            Self::Gmm40 => "gmm40",
            Self::MixtureOfStudents => "mos",
            Self::GmmGrid => "gmm-grid",
            Self::Bimodal => "bimodal",
            Self::Gaussian => "gaussian",
        }
    }

    /// Energy keys that apply to this benchmark, besides the clip bounds.
    fn energy_keys(self) -> &'static [&'static str] {
        match self {
            Self::ManyWell => &["dim", "wells", "delta"],
            Self::Funnel => &["dim", "variance"],
            Self::Gmm40 => &["dim", "modes"],
            Self::MixtureOfStudents => &["dim", "modes", "dof"],
            Self::GmmGrid => &[],
            Self::Bimodal => &["dim", "separation", "first_weight"],
            Self::Gaussian => &["dim", "sigma"],
        }
    }

    fn default_energy(self) -> EnergySpec {
        let e = EnergySpec {
            dim: 2,
            wells: 0,
            delta: 0.0,
            variance: 0.0,
            modes: 0,
            dof: 0.0,
            separation: 0.0,
            first_weight: 0.0,
            sigma: 0.0,
        };
        match self {
            Self::ManyWell => EnergySpec {
                dim: 5,
                wells: 5,
                delta: 4.0,
                ..e
            },
            Self::Funnel => EnergySpec {
                dim: 10,
                variance: 9.0,
                ..e
            },
            Self::Gmm40 => EnergySpec {
                dim: 50,
                modes: 40,
                ..e
            },
            Self::MixtureOfStudents => EnergySpec {
                dim: 50,
                modes: 10,
                dof: 2.0,
                ..e
            },
            Self::GmmGrid => e,
            Self::Bimodal => EnergySpec {
                dim: 4,
                separation: 1.0,
                first_weight: 2.0 / 3.0,
                ..e
            },
            Self::Gaussian => EnergySpec { sigma: 1.0, ..e },
        }
    }

    /// Hyperparameters of the published table; the grid, bimodal and
    /// Gaussian targets reuse the many-well column.
    pub fn default_train(self) -> TrainConfig {
        let mw = TrainConfig::default();
        let big = TrainConfig {
            paths: 512,
            energy_clip: Some(1000.0),
            adjoint_clip: Some(100.0),
            ..mw.clone()
        };
        match self {
            Self::Funnel => TrainConfig {
                stages: 10,
                lr_u: 1e-4,
                lr_v: 1e-4,
                sigma_bar: 1.0,
                sigma_max: 9.0,
                ..big
            },
            Self::Gmm40 => TrainConfig {
                stages: 5,
                lr_u: 1e-6,
                lr_v: 1e-8,
                sigma_bar: 50.0,
                sigma_max: 50.0,
                ..big
            },
            Self::MixtureOfStudents => TrainConfig {
                stages: 5,
                lr_u: 1e-4,
                lr_v: 1e-6,
                sigma_bar: 15.0,
                sigma_max: 1000.0,
                ..big
            },
            _ => mw,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|b| b.as_str()).collect();
                format!(
                    "unknown benchmark `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Target parameters; only the fields of the selected benchmark are used.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpec {
    pub dim: usize,
    pub wells: usize,
    pub delta: f64,
    pub variance: f64,
    pub modes: usize,
    pub dof: f64,
    pub separation: f64,
    pub first_weight: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub name: String,
    /// Root of the output tree; the run lives in `out/<benchmark>/<name>`.
    pub out: PathBuf,
    pub energy: EnergySpec,
    /// Includes the seed.
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Defaults for `benchmark`.
    pub fn for_benchmark(benchmark: Benchmark) -> Self {
        Self {
            benchmark,
            name: "default".into(),
            out: PathBuf::from("out"),
            energy: benchmark.default_energy(),
            train: benchmark.default_train(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.benchmark.as_str()).join(&self.name)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// The target density. Random mode centres come from the run seed.
    pub fn target(&self) -> naas::Result<EnergyModel<f64>> {
        let e = &self.energy;
        match self.benchmark {
            Benchmark::ManyWell => EnergyModel::many_well(e.dim, e.wells, e.delta),
            Benchmark::Funnel => EnergyModel::funnel(e.dim, e.variance),
            Benchmark::Gmm40 => EnergyModel::gmm40(e.dim, e.modes, self.seed()),
            Benchmark::MixtureOfStudents => {
                EnergyModel::student_mixture(e.dim, e.modes, e.dof, self.seed())
            }
            Benchmark::GmmGrid => Ok(EnergyModel::gmm_grid()),
            Benchmark::Bimodal => EnergyModel::bimodal(e.dim, e.separation, e.first_weight),
            Benchmark::Gaussian => EnergyModel::gaussian(e.dim, e.sigma),
        }
    }

    /// Parses a config file, applying `NAAS_*` overrides from `env`.
    pub fn parse(
        text: &str,
        source_name: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let err = |line: Option<usize>, message: String| ConfigError {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| line_of(text, s.start));
            err(line, e.message().trim().to_string())
        })?;
        apply_env(&mut table, env).map_err(|m| err(None, m))?;
        let raw = RawConfig::deserialize(table).map_err(|e| {
            // Spans are lost once the table is rebuilt; locate the key instead.
            let message = e.message().trim().to_string();
            let line = unknown_key_in(&message).and_then(|k| find_key(text, None, &k));
            err(line, message)
        })?;
        raw.resolve().map_err(|(section, key, message)| {
            err(key.and_then(|k| find_key(text, Some(section), k)), message)
        })
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
        Ok(Self::parse(&text, &path.display().to_string(), env)?)
    }

    /// The full effective configuration; parsing it reproduces `self`.
    pub fn to_resolved(&self) -> String {
        let t = &self.train;
        let e = &self.energy;
        let opt = |v: Option<f64>| v.map_or("\"none\"".to_string(), num);
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line("[experiment]".into());
        line(format!("benchmark = \"{}\"", self.benchmark));
        line(format!("name = {}", toml::Value::from(self.name.clone())));
        line(format!(
            "out = {}",
            toml::Value::from(self.out.display().to_string())
        ));
        line(format!("seed = {}", t.seed));
        line(String::new());
        line("[energy]".into());
        for key in self.benchmark.energy_keys() {
            let v = match *key {
                "dim" => e.dim.to_string(),
                "wells" => e.wells.to_string(),
                "delta" => num(e.delta),
                "variance" => num(e.variance),
                "modes" => e.modes.to_string(),
                "dof" => num(e.dof),
                "separation" => num(e.separation),
                "first_weight" => num(e.first_weight),
                "sigma" => num(e.sigma),
                _ => unreachable!("energy key list is closed"),
            };
            line(format!("{key} = {v}"));
        }
        line(format!("grad_clip = {}", opt(t.energy_clip)));
        line(format!("hvp_clip = {}", opt(t.adjoint_clip)));
        line(String::new());
        line("[schedule]".into());
        line(format!("sigma_bar = {}", num(t.sigma_bar)));
        line(format!("sigma_min = {}", num(t.sigma_min)));
        line(format!("sigma_max = {}", num(t.sigma_max)));
        line(String::new());
        line("[dynamics]".into());
        line(format!("n_prior = {}", t.n_prior));
        line(format!("n_anneal = {}", t.n_anneal));
        line(String::new());
        line("[net]".into());
        let hidden: Vec<String> = t.hidden.iter().map(|h| h.to_string()).collect();
        line(format!("hidden = [{}]", hidden.join(", ")));
        line(format!("time_embedding = {}", t.time_embedding));
        line(format!("max_frequency = {}", num(t.max_frequency)));
        line(String::new());
        line("[trainer]".into());
        line(format!("mode = \"{}\"", t.mode));
        line(format!("stages = {}", t.stages));
        line(format!("epochs_u = {}", t.epochs_u));
        line(format!("epochs_v = {}", t.epochs_v));
        line(format!("updates_u = {}", t.updates_u));
        line(format!("updates_v = {}", t.updates_v));
        line(format!("batch_size = {}", t.batch_size));
        line(format!("paths = {}", t.paths));
        line(format!("buffer_capacity = {}", t.buffer_capacity));
        line(format!("stride = {}", t.stride));
        line(format!("lr_u = {}", num(t.lr_u)));
        line(format!("lr_v = {}", num(t.lr_v)));
        line(format!("grad_clip = {}", opt(t.grad_clip)));
        line(String::new());
        line("[metrics]".into());
        line(format!("eval_samples = {}", t.eval_samples));
        line(format!("eval_cadence = \"{}\"", t.eval_cadence.as_str()));
        line(format!("sinkhorn_epsilon = {}", num(t.sinkhorn.epsilon)));
        line(format!("sinkhorn_max_iters = {}", t.sinkhorn.max_iters));
        line(format!("sinkhorn_tol = {}", num(t.sinkhorn.tol)));
        let bw = match t.mmd_bandwidth {
            BandwidthPolicy::Median => "\"median\"".to_string(),
            BandwidthPolicy::Fixed(h) => num(h),
        };
        line(format!("mmd_bandwidth = {bw}"));
        s
    }
}

/// Command-line flags, applied after the file and the environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    /// Euler–Maruyama steps per stage, for both stages.
    pub steps: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(n) = self.steps {
            cfg.train.n_prior = n;
            cfg.train.n_anneal = n;
        }
        cfg.train.validate()?;
        // Seeded targets depend on the seed.
        cfg.target()?;
        Ok(())
    }
}

/// Shortest round-tripping float literal that TOML reads back as a float.
fn num(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of `key = ...`, inside `[section]` when given.
fn find_key(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.trim());
            continue;
        }
        let Some((k, _)) = l.split_once('=') else {
            continue;
        };
        if k.trim() == key && (section.is_none() || current == section) {
            return Some(i + 1);
        }
    }
    None
}

fn unknown_key_in(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

/// Moves `NAAS_<SECTION>_<KEY>` variables into the table. Values are read as
/// TOML literals, falling back to plain strings.
fn apply_env(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), String> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (name, value) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let Some((section, key)) = SECTIONS.iter().find_map(|s| {
            rest.strip_prefix(s)
                .and_then(|r| r.strip_prefix('_'))
                .map(|k| (*s, k))
        }) else {
            return Err(format!(
                "environment variable {name} does not name a config section"
            ));
        };
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.clone()));
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key.to_string(), parsed);
            }
            _ => return Err(format!("`{section}` must be a section")),
        }
    }
    Ok(())
}

/// A positive bound, or `"none"` for no bound.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum Bound {
    Value(f64),
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum Bandwidth {
    Fixed(f64),
    Word(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    benchmark: Option<String>,
    name: Option<String>,
    out: Option<String>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnergy {
    dim: Option<usize>,
    wells: Option<usize>,
    delta: Option<f64>,
    variance: Option<f64>,
    modes: Option<usize>,
    dof: Option<f64>,
    separation: Option<f64>,
    first_weight: Option<f64>,
    sigma: Option<f64>,
    grad_clip: Option<Bound>,
    hvp_clip: Option<Bound>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    sigma_bar: Option<f64>,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    n_prior: Option<usize>,
    n_anneal: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    hidden: Option<Vec<usize>>,
    time_embedding: Option<usize>,
    max_frequency: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrainer {
    mode: Option<String>,
    stages: Option<usize>,
    epochs_u: Option<usize>,
    epochs_v: Option<usize>,
    updates_u: Option<usize>,
    updates_v: Option<usize>,
    batch_size: Option<usize>,
    paths: Option<usize>,
    buffer_capacity: Option<usize>,
    stride: Option<usize>,
    lr_u: Option<f64>,
    lr_v: Option<f64>,
    grad_clip: Option<Bound>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    eval_samples: Option<usize>,
    eval_cadence: Option<String>,
    sinkhorn_epsilon: Option<f64>,
    sinkhorn_max_iters: Option<usize>,
    sinkhorn_tol: Option<f64>,
    mmd_bandwidth: Option<Bandwidth>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    experiment: RawExperiment,
    energy: RawEnergy,
    schedule: RawSchedule,
    dynamics: RawDynamics,
    net: RawNet,
    trainer: RawTrainer,
    metrics: RawMetrics,
}

/// `(section, offending key, message)`.
type ResolveError = (&'static str, Option<&'static str>, String);

fn bound(v: Bound, section: &'static str, key: &'static str) -> Result<Option<f64>, ResolveError> {
    match v {
        Bound::Value(x) if x > 0.0 && x.is_finite() => Ok(Some(x)),
        Bound::Word(w) if w == "none" => Ok(None),
        other => Err((
            section,
            Some(key),
            format!("{section}.{key} must be a positive number or \"none\", got {other:?}"),
        )),
    }
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig, ResolveError> {
        let Some(name) = self.experiment.benchmark else {
            return Err((
                "experiment",
                None,
                "missing required key `benchmark` in section [experiment]".into(),
            ));
        };
        let benchmark: Benchmark = name
            .parse()
            .map_err(|m| ("experiment", Some("benchmark"), m))?;
        let mut cfg = ExperimentConfig::for_benchmark(benchmark);
        set!(cfg.name, self.experiment.name);
        if cfg.name.is_empty()
            || cfg.name.contains(['/', '\\'])
            || cfg.name == "."
            || cfg.name == ".."
        {
            return Err((
                "experiment",
                Some("name"),
                format!("invalid run name {:?}", cfg.name),
            ));
        }
        if let Some(out) = self.experiment.out {
            cfg.out = PathBuf::from(out);
        }
        let t = &mut cfg.train;
        set!(t.seed, self.experiment.seed);

        let en = self.energy;
        let given: [(&'static str, bool); 9] = [
            ("dim", en.dim.is_some()),
            ("wells", en.wells.is_some()),
            ("delta", en.delta.is_some()),
            ("variance", en.variance.is_some()),
            ("modes", en.modes.is_some()),
            ("dof", en.dof.is_some()),
            ("separation", en.separation.is_some()),
            ("first_weight", en.first_weight.is_some()),
            ("sigma", en.sigma.is_some()),
        ];
        for (key, present) in given {
            if present && !benchmark.energy_keys().contains(&key) {
                return Err((
                    "energy",
                    Some(key),
                    format!("energy.{key} does not apply to benchmark {benchmark}"),
                ));
            }
        }
        let e = &mut cfg.energy;
        set!(e.dim, en.dim);
        set!(e.wells, en.wells);
        set!(e.delta, en.delta);
        set!(e.variance, en.variance);
        set!(e.modes, en.modes);
        set!(e.dof, en.dof);
        set!(e.separation, en.separation);
        set!(e.first_weight, en.first_weight);
        set!(e.sigma, en.sigma);
        if let Some(b) = en.grad_clip {
            t.energy_clip = bound(b, "energy", "grad_clip")?;
        }
        if let Some(b) = en.hvp_clip {
            t.adjoint_clip = bound(b, "energy", "hvp_clip")?;
        }

        set!(t.sigma_bar, self.schedule.sigma_bar);
        set!(t.sigma_min, self.schedule.sigma_min);
        set!(t.sigma_max, self.schedule.sigma_max);
        set!(t.n_prior, self.dynamics.n_prior);
        set!(t.n_anneal, self.dynamics.n_anneal);
        set!(t.hidden, self.net.hidden);
        set!(t.time_embedding, self.net.time_embedding);
        set!(t.max_frequency, self.net.max_frequency);

        let tr = self.trainer;
        if let Some(m) = tr.mode {
            t.mode = m
                .parse::<Mode>()
                .map_err(|e| ("trainer", Some("mode"), e.to_string()))?;
        }
        set!(t.stages, tr.stages);
        set!(t.epochs_u, tr.epochs_u);
        set!(t.epochs_v, tr.epochs_v);
        set!(t.updates_u, tr.updates_u);
        set!(t.updates_v, tr.updates_v);
        set!(t.batch_size, tr.batch_size);
        set!(t.paths, tr.paths);
        set!(t.buffer_capacity, tr.buffer_capacity);
        set!(t.stride, tr.stride);
        set!(t.lr_u, tr.lr_u);
        set!(t.lr_v, tr.lr_v);
        if let Some(b) = tr.grad_clip {
            t.grad_clip = bound(b, "trainer", "grad_clip")?;
        }

        let me = self.metrics;
        set!(t.eval_samples, me.eval_samples);
        if let Some(c) = me.eval_cadence {
            t.eval_cadence = c
                .parse::<EvalCadence>()
                .map_err(|e| ("metrics", Some("eval_cadence"), e.to_string()))?;
        }
        let sk = SinkhornConfig {
            epsilon: me.sinkhorn_epsilon.unwrap_or(t.sinkhorn.epsilon),
            max_iters: me.sinkhorn_max_iters.unwrap_or(t.sinkhorn.max_iters),
            tol: me.sinkhorn_tol.unwrap_or(t.sinkhorn.tol),
        };
        if !(sk.epsilon > 0.0 && sk.tol > 0.0 && sk.max_iters > 0) {
            return Err((
                "metrics",
                Some("sinkhorn_epsilon"),
                "Sinkhorn settings must be positive".into(),
            ));
        }
        t.sinkhorn = sk;
        match me.mmd_bandwidth {
            None => {}
            Some(Bandwidth::Fixed(h)) if h > 0.0 => t.mmd_bandwidth = BandwidthPolicy::Fixed(h),
            Some(Bandwidth::Word(w)) if w == "median" => t.mmd_bandwidth = BandwidthPolicy::Median,
            Some(other) => return Err((
                "metrics",
                Some("mmd_bandwidth"),
                format!(
                    "metrics.mmd_bandwidth must be \"median\" or a positive number, got {other:?}"
                ),
            )),
        }

        if let Err(e) = cfg.train.validate() {
            let msg = match e {
                naas::NaasError::InvalidInput(m) => m,
                other => other.to_string(),
            };
            let key = KEY_SECTIONS
                .iter()
                .find(|(k, _)| msg.starts_with(&format!("{k} ")));
            return Err(match key {
                Some((k, s)) => (s, Some(k), msg),
                None => ("trainer", None, msg),
            });
        }
        if let Err(e) = cfg.target() {
            return Err(("energy", None, format!("invalid target: {e}")));
        }
        Ok(cfg)
    }
}

/// Where each validated field lives in the file.
const KEY_SECTIONS: [(&str, &str); 17] = [
    ("epochs_u", "trainer"),
    ("epochs_v", "trainer"),
    ("updates_u", "trainer"),
    ("updates_v", "trainer"),
    ("batch_size", "trainer"),
    ("paths", "trainer"),
    ("buffer_capacity", "trainer"),
    ("stride", "trainer"),
    ("n_prior", "dynamics"),
    ("n_anneal", "dynamics"),
    ("sigma_bar", "schedule"),
    ("sigma_min", "schedule"),
    ("sigma_max", "schedule"),
    ("lr_u", "trainer"),
    ("lr_v", "trainer"),
    ("grad_clip", "trainer"),
    ("energy_clip", "energy"),
];

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse(text, "test.cfg", Vec::new())
    }

    #[test]
    fn benchmark_selects_table_defaults() {
        let c = parse("[experiment]\nbenchmark = \"funnel\"\n").unwrap();
        assert_eq!(c.train.stages, 10);
        assert_eq!(c.train.sigma_max, 9.0);
        assert_eq!(c.train.adjoint_clip, Some(100.0));
        assert_eq!(c.energy.dim, 10);
        let mw = parse("[experiment]\nbenchmark = \"mw54\"\n").unwrap();
        assert_eq!(
            (mw.train.paths, mw.train.energy_clip, mw.train.adjoint_clip),
            (2048, Some(100.0), None)
        );
        assert_eq!((mw.train.lr_u, mw.train.lr_v), (1e-5, 1e-8));
    }

    #[test]
    fn missing_benchmark_names_the_key() {
        let e = parse("[trainer]\nstages = 1\n").unwrap_err();
        assert!(e.message.contains("benchmark"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let e = parse(
            "[experiment]\nbenchmark = \"mw54\"\n\n[trainer]\nstages = 1\nlearning_rate = 3\n",
        )
        .unwrap_err();
        assert_eq!(e.line, Some(6), "{e}");
        assert!(e.message.contains("learning_rate"));
        let e = parse("[experiment]\nbenchmark = \"mw54\"\n[bogus]\nx = 1\n").unwrap_err();
        assert!(e.message.contains("bogus"), "{e}");
    }

    #[test]
    fn invalid_values_point_at_their_line() {
        let e =
            parse("[experiment]\nbenchmark = \"mw54\"\n[trainer]\nmode = \"fast\"\n").unwrap_err();
        assert_eq!(e.line, Some(4));
        let e =
            parse("[experiment]\nbenchmark = \"mw54\"\n[trainer]\nbatch_size = 0\n").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        let e = parse("[experiment]\nbenchmark = \"mw54\"\n[energy]\ndof = 3.0\n").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        let e = parse("[experiment]\nbenchmark = \"mw54\"\nstages = = 2\n").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
    }

    #[test]
    fn resolved_echo_round_trips() {
        for b in Benchmark::ALL {
            let text = format!(
                "[experiment]\nbenchmark = \"{b}\"\nname = \"x y\"\nseed = 4\n[metrics]\nmmd_bandwidth = 0.5\n[energy]\nhvp_clip = \"none\"\n"
            );
            let c = parse(&text).unwrap();
            let again = parse(&c.to_resolved()).unwrap();
            assert_eq!(c, again);
            assert_eq!(c.to_resolved(), again.to_resolved());
        }
    }

    #[test]
    fn environment_overrides_file_values() {
        let text = "[experiment]\nbenchmark = \"gmm40\"\n[trainer]\nlr_u = 0.5\n";
        let env = vec![
            ("NAAS_TRAINER_LR_U".to_string(), "0.25".to_string()),
            ("NAAS_ENERGY_DIM".to_string(), "4".to_string()),
            ("NAAS_TRAINER_MODE".to_string(), "naas-biased".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = ExperimentConfig::parse(text, "t", env).unwrap();
        assert_eq!(c.train.lr_u, 0.25);
        assert_eq!(c.energy.dim, 4);
        assert_eq!(c.train.mode, Mode::NaasBiased);
        let bad = vec![("NAAS_NOPE_X".to_string(), "1".to_string())];
        assert!(ExperimentConfig::parse(text, "t", bad).is_err());
    }

    #[test]
    fn run_dir_layout() {
        let c =
            parse("[experiment]\nbenchmark = \"gmm-grid\"\nname = \"a\"\nout = \"o\"\n").unwrap();
        assert_eq!(c.run_dir(), Path::new("o/gmm-grid/a"));
        assert!(parse("[experiment]\nbenchmark = \"gmm-grid\"\nname = \"../x\"\n").is_err());
    }
}
