use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use naas::trainer::Mode;
use naas_cli::config::ENV_PREFIX;
use naas_cli::run::{
    latest_checkpoint, run_ablation, run_eval, run_sample, run_train, EvalRow, Sweep,
};
use naas_cli::{ConfigError, ExperimentConfig, Overrides};

/// Non-equilibrium annealed adjoint sampler.
///
/// Any config key can also be set through the environment as
/// NAAS_<SECTION>_<KEY>, e.g. NAAS_TRAINER_LR_U=1e-4.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sampler and write metrics and checkpoints.
    Train(Common),
    /// Score a checkpoint against exact target samples.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default: the run's latest stage).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
    },
    /// Draw samples from a checkpoint into a CSV file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        /// Output CSV (default: <run>/samples/samples.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train once per value of a single config key, e.g. schedule.sigma_max=1,50.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: Sweep,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// naas, naas-biased or as-baseline.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output root; runs go to <out>/<benchmark>/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Euler–Maruyama steps per stage.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            out: self.out.clone(),
            steps: self.steps,
        }
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        self.overrides().apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn checkpoint_or_latest(cfg: &ExperimentConfig, given: Option<PathBuf>) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p),
        None => latest_checkpoint(&cfg.run_dir()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let summary = run_train(&cfg)?;
            println!("run directory: {}", summary.run_dir.display());
            if let Some(e) = summary.last_eval {
                println!(
                    "sinkhorn {:.6}  mmd {:.6}  iw_variance {:.4}",
                    e.sinkhorn, e.mmd, e.iw_variance
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            n_samples,
        } => {
            let cfg = common.load()?;
            let ckpt = checkpoint_or_latest(&cfg, checkpoint)?;
            let row = run_eval(&cfg, &ckpt, n_samples)?;
            println!("{}", EvalRow::HEADER);
            println!("{}", row.to_csv());
        }
        Command::Sample {
            common,
            checkpoint,
            n_samples,
            output,
        } => {
            let cfg = common.load()?;
            let ckpt = checkpoint_or_latest(&cfg, checkpoint)?;
            let out = output.unwrap_or_else(|| cfg.run_dir().join("samples").join("samples.csv"));
            run_sample(&cfg, &ckpt, n_samples, &out)?;
            println!("wrote {n_samples} samples to {}", out.display());
        }
        Command::Ablate { common, sweep } => {
            let text = std::fs::read_to_string(&common.config)
                .with_context(|| format!("cannot read config {}", common.config.display()))?;
            let env: Vec<(String, String)> = std::env::vars()
                .filter(|(k, _)| k.starts_with(ENV_PREFIX))
                .collect();
            let name = common.config.display().to_string();
            let cells = run_ablation(&text, &name, &env, &common.overrides(), &sweep)?;
            println!("{}.{}  sinkhorn  mmd", sweep.section, sweep.key);
            for c in cells {
                println!("{}  {:.6}  {:.6}", c.value, c.eval.sinkhorn, c.eval.mmd);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
