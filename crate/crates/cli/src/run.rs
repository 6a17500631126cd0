//! Commands: training, evaluation, sampling and single-key sweeps, with
//! their on-disk artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use naas::metrics::{mode_weights, write_scatter_svg, SampleSet};
use naas::trainer::{Evaluation, HistoryRow, Trainer};
use naas::Net;

use crate::config::{ExperimentConfig, Overrides};

const METRICS_HEADER: &str = "stage,phase,epoch,loss,sinkhorn,mmd,iw_variance,ess";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// One `metrics.csv` line. Everything in it is a function of (seed, config).
pub fn metrics_line(r: &HistoryRow) -> String {
    let e = r.eval.as_ref();
    format!(
        "{},{},{},{:?},{},{},{},{}",
        r.stage,
        r.phase.as_str(),
        r.epoch,
        r.loss,
        opt(e.map(|e| e.sinkhorn)),
        opt(e.map(|e| e.mmd)),
        opt(e.map(|e| e.iw_variance)),
        opt(e.map(|e| e.ess)),
    )
}

fn write_net(net: &Net, step: u64, path: &Path) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    net.write_checkpoint(step, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_net(path: &Path) -> Result<Net> {
    let r =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let (net, _) =
        Net::read_checkpoint(r).with_context(|| format!("reading {}", path.display()))?;
    Ok(net)
}

/// Writes `u.ckpt` and `v.ckpt` into `dir`.
pub fn write_checkpoint_dir(dir: &Path, u: &Net, v: &Net, stage: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_net(u, stage, &dir.join("u.ckpt"))?;
    write_net(v, stage, &dir.join("v.ckpt"))
}

pub fn read_checkpoint_dir(dir: &Path) -> Result<(Net, Net)> {
    Ok((
        read_net(&dir.join("u.ckpt"))?,
        read_net(&dir.join("v.ckpt"))?,
    ))
}

fn write_samples(set: &SampleSet<f64>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    set.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_svg(sets: &[&SampleSet<f64>], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_scatter_svg(sets, &mut w)?;
    w.flush()?;
    Ok(())
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub history: Vec<HistoryRow>,
    /// The last evaluation in the history, if any.
    pub last_eval: Option<Evaluation>,
}

/// Trains per `cfg` into `<out>/<benchmark>/<name>/`:
///
/// - `config.resolved`: the effective configuration;
/// - `centers.csv`: mode centres of mixture targets;
/// - `metrics.csv`: one row per epoch, deterministic given the config;
/// - `timing.csv`: wall-clock seconds per stage, kept apart from the metrics;
/// - `checkpoints/stage-<k>/{u,v}.ckpt` for `k = 0..=K` (`stage-0` is the initialisation);
/// - `samples/final.csv` and `plots/final.svg`: final samples against the target.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved"), cfg.to_resolved())?;
    let target = cfg.target()?;
    if target.mode_centers().is_some() {
        let mut w = BufWriter::new(File::create(dir.join("centers.csv"))?);
        target.write_centers_csv(&mut w)?;
        w.flush()?;
    }
    let mut trainer = Trainer::new(cfg.train.clone(), target)?;
    let ckpt = dir.join("checkpoints");
    write_checkpoint_dir(&ckpt.join("stage-0"), trainer.u(), trainer.v(), 0)?;

    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut timing = BufWriter::new(File::create(dir.join("timing.csv"))?);
    writeln!(timing, "stage,seconds")?;
    let mut written = 0;
    while trainer.stages_done() < cfg.train.stages {
        let start = Instant::now();
        trainer.run_stage()?;
        let k = trainer.stages_done();
        writeln!(timing, "{},{:.3}", k - 1, start.elapsed().as_secs_f64())?;
        for row in &trainer.history()[written..] {
            writeln!(metrics, "{}", metrics_line(row))?;
        }
        written = trainer.history().len();
        metrics.flush()?;
        timing.flush()?;
        write_checkpoint_dir(
            &ckpt.join(format!("stage-{k}")),
            trainer.u(),
            trainer.v(),
            k as u64,
        )?;
    }
    metrics.flush()?;
    timing.flush()?;
    if cfg.train.eval_samples > 0 {
        let generated = trainer.sample(cfg.train.eval_samples, "eval", u64::MAX - 1)?;
        write_samples(&generated, &dir.join("samples").join("final.csv"))?;
        let reference = trainer.reference()?.clone();
        write_svg(
            &[&generated, &reference],
            &dir.join("plots").join("final.svg"),
        )?;
    }
    let history = trainer.history().to_vec();
    let last_eval = history.iter().rev().find_map(|r| r.eval);
    Ok(TrainSummary {
        run_dir: dir,
        history,
        last_eval,
    })
}

/// Checkpoint directory of the last completed stage of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let root = run_dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&root).with_context(|| format!("listing {}", root.display()))? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(k) = name
            .to_str()
            .and_then(|n| n.strip_prefix("stage-"))
            .and_then(|k| k.parse().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| k > *b) {
            best = Some((k, entry.path()));
        }
    }
    best.map(|(_, p)| p)
        .with_context(|| format!("no checkpoints under {}", root.display()))
}

fn loaded_trainer(cfg: &ExperimentConfig, checkpoint: &Path, n: usize) -> Result<Trainer<f64>> {
    let target = cfg.target()?;
    let d = target.dim();
    let (u, v) = read_checkpoint_dir(checkpoint)?;
    for (name, net) in [("u", &u), ("v", &v)] {
        ensure!(
            net.dim() == d,
            "checkpoint {name} control has dimension {}, benchmark {} has dimension {d}",
            net.dim(),
            cfg.benchmark
        );
    }
    let mut tc = cfg.train.clone();
    tc.eval_samples = n;
    let mut trainer = Trainer::new(tc, target)?;
    trainer.set_nets(u, v)?;
    Ok(trainer)
}

/// One evaluation of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub checkpoint: String,
    pub n: usize,
    pub eval: Evaluation,
    /// Fraction of samples nearest to each mode centre, for mixtures.
    pub mode_weights: Option<Vec<f64>>,
}

impl EvalRow {
    pub const HEADER: &'static str =
        "checkpoint,n,sinkhorn,sinkhorn_converged,mmd,mmd_bandwidth,iw_variance,ess,mode_weights";

    pub fn to_csv(&self) -> String {
        let e = &self.eval;
        let weights = self.mode_weights.as_ref().map_or_else(String::new, |w| {
            w.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(";")
        });
        format!(
            "{},{},{:?},{},{:?},{:?},{:?},{:?},{}",
            self.checkpoint,
            self.n,
            e.sinkhorn,
            e.sinkhorn_converged,
            e.mmd,
            e.mmd_bandwidth,
            e.iw_variance,
            e.ess,
            weights
        )
    }
}

/// Samples `n` points from the checkpointed sampler, scores them against
/// exact target samples, appends a row to `<run>/eval.csv` and writes
/// `<run>/plots/eval.svg`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, n: usize) -> Result<EvalRow> {
    if n == 0 {
        bail!("--n-samples must be positive");
    }
    let mut trainer = loaded_trainer(cfg, checkpoint, n)?;
    let (eval, generated) = trainer.evaluate_with_samples()?;
    let mode_weights = match trainer.potential().target().mode_centers() {
        Some(c) => Some(mode_weights(generated.data(), &c)?),
        None => None,
    };
    let row = EvalRow {
        checkpoint: checkpoint.display().to_string(),
        n,
        eval,
        mode_weights,
    };
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join("eval.csv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{}", EvalRow::HEADER)?;
    }
    writeln!(f, "{}", row.to_csv())?;
    let reference = trainer.reference()?.clone();
    write_svg(
        &[&generated, &reference],
        &dir.join("plots").join("eval.svg"),
    )?;
    Ok(row)
}

/// Writes `n` samples from the checkpointed sampler as CSV to `out`.
pub fn run_sample(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    n: usize,
    out: &Path,
) -> Result<SampleSet<f64>> {
    let trainer = loaded_trainer(cfg, checkpoint, cfg.train.eval_samples)?;
    let set = trainer.sample(n, "eval", u64::MAX - 1)?;
    write_samples(&set, out)?;
    Ok(set)
}

/// A single-key sweep, e.g. `schedule.sigma_max=1,50`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub section: String,
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Sweep {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once('=')
            .context("sweep must look like section.key=v1,v2,...")?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .context("sweep key must be section.key")?;
        let values: Vec<String> = rhs
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        ensure!(!values.is_empty(), "sweep needs at least one value");
        Ok(Self {
            section: section.to_string(),
            key: key.to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub value: String,
    pub summary: TrainSummary,
    pub eval: Evaluation,
}

/// Trains one run per sweep value under otherwise identical settings, each in
/// its own directory `<run>/<benchmark>/<key>=<value>/`, evaluates the final sampler and
/// writes `<run>/ablation.csv`. The sweep value takes the place of the
/// matching environment override; `overrides` are applied on top, as for
/// [`run_train`].
pub fn run_ablation(
    cfg_text: &str,
    source_name: &str,
    env: &[(String, String)],
    overrides: &Overrides,
    sweep: &Sweep,
) -> Result<Vec<AblationCell>> {
    let var = format!(
        "{}{}_{}",
        crate::config::ENV_PREFIX,
        sweep.section.to_ascii_uppercase(),
        sweep.key.to_ascii_uppercase()
    );
    let mut cells = Vec::new();
    let mut root = None;
    for value in &sweep.values {
        let mut cell_env: Vec<(String, String)> =
            env.iter().filter(|(k, _)| *k != var).cloned().collect();
        cell_env.push((var.clone(), value.clone()));
        let mut cfg = ExperimentConfig::parse(cfg_text, source_name, cell_env)
            .with_context(|| format!("sweep value {}.{} = {value}", sweep.section, sweep.key))?;
        overrides.apply(&mut cfg)?;
        let run_root = cfg.run_dir();
        cfg.out = run_root.clone();
        cfg.name = format!("{}={value}", sweep.key);
        let summary = run_train(&cfg)?;
        let mut trainer = loaded_trainer(
            &cfg,
            &latest_checkpoint(&summary.run_dir)?,
            cfg.train.eval_samples,
        )?;
        let eval = trainer.evaluate()?;
        cells.push(AblationCell {
            value: value.clone(),
            summary,
            eval,
        });
        root = Some(run_root);
    }
    let root = root.expect("a sweep has at least one value");
    let mut w = BufWriter::new(File::create(root.join("ablation.csv"))?);
    writeln!(
        w,
        "{}.{},sinkhorn,mmd,iw_variance,ess",
        sweep.section, sweep.key
    )?;
    for c in &cells {
        writeln!(
            w,
            "{},{:?},{:?},{:?},{:?}",
            c.value, c.eval.sinkhorn, c.eval.mmd, c.eval.iw_variance, c.eval.ess
        )?;
    }
    w.flush()?;
    Ok(cells)
}
