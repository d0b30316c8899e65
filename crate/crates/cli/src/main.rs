use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fbsde_cli::*;
use fbsde_core::config::{ExperimentConfig, PRESETS};
use fbsde_core::costs::PenaltyKind;
use fbsde_core::Result;

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Train and evaluate state-constrained deep FBSDE controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.N_I=10`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Logistic,
    Relu,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller (or an ensemble when the config has one).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; overrides FBSDE_OUTPUT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over noisy trials.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint stem (without extension); defaults to <out>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Disable diffusion noise.
        #[arg(long)]
        no_noise: bool,
        /// Sample initial states from the training box.
        #[arg(long)]
        sample_initial: bool,
        #[arg(long, default_value_t = 10_000)]
        latency_calls: usize,
        /// Penalty steepness for reported costs.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Walk several footsteps with a controller ensemble.
    Walk {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ensemble directory; defaults to <out>/ensemble.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Use freshly initialised members instead of a trained ensemble.
        #[arg(long, conflicts_with = "ensemble")]
        untrained: bool,
        #[arg(long)]
        footsteps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Force diffusion noise on.
        #[arg(long, conflicts_with = "no_noise")]
        noise: bool,
        /// Force diffusion noise off.
        #[arg(long)]
        no_noise: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a scalar penalty p(x) with c(x) = x into a CSV file.
    PenaltyPlot {
        #[arg(long, value_enum, default_value = "logistic")]
        kind: Kind,
        #[arg(long, default_value_t = 1.0)]
        lower: f64,
        #[arg(long, default_value_t = 5.0)]
        upper: f64,
        /// L, the logistic penalty height.
        #[arg(long, default_value_t = 5.0)]
        max_penalty: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        k: Vec<f64>,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, default_value_t = 7.0, allow_hyphen_values = true)]
        to: f64,
        #[arg(long, default_value_t = 801)]
        samples: usize,
        #[arg(long, default_value = "penalty.csv")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lstm_only: bool,
        /// Perturb one analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Print or write a preset configuration.
    ExportConfig {
        #[arg(long, value_parser = PRESETS)]
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let dir = output_dir(&cfg, out.as_deref());
            let s = cmd_train(&cfg, &dir)?;
            println!("trained {} iterations, final k = {}, output in {}", s.iterations_completed, s.final_k, dir.display());
        }
        Command::Eval { config, checkpoint, trials, seed, no_noise, sample_initial, latency_calls, k, out } => {
            let cfg = config.load()?;
            let dir = output_dir(&cfg, out.as_deref());
            let checkpoint = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_STEM));
            let args = EvalArgs { checkpoint, trials, seed, noise: !no_noise, sample_initial, latency_calls, k };
            let m = cmd_eval(&cfg, &args, &dir)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Walk { config, ensemble, untrained, footsteps, seed, noise, no_noise, out } => {
            let cfg = config.load()?;
            let dir = output_dir(&cfg, out.as_deref());
            let ensemble = if untrained { None } else { Some(ensemble.unwrap_or_else(|| dir.join(ENSEMBLE_DIR))) };
            let noise = if noise { Some(true) } else if no_noise { Some(false) } else { None };
            let s = cmd_walk(&cfg, &WalkArgs { ensemble, footsteps, seed, noise }, &dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::PenaltyPlot { kind, lower, upper, max_penalty, k, from, to, samples, out } => {
            let kind = match kind {
                Kind::Logistic => PenaltyKind::Logistic,
                Kind::Relu => PenaltyKind::Relu,
            };
            let args = PenaltyPlotArgs { kind, lower, upper, max_penalty, ks: k, from, to, samples };
            let r = cmd_penalty_plot(&args, &out)?;
            println!("wrote {} rows to {}", r.rows, out.display());
            println!("p(midpoint {}) = {:e}, symmetry error = {:e}", r.midpoint, r.value_at_midpoint, r.symmetry_error);
        }
        Command::Gradcheck { seed, lstm_only, corrupt_gradient } => {
            let report = cmd_gradcheck(seed, lstm_only, corrupt_gradient)?;
            for c in &report.checks {
                println!(
                    "{:<24} {:>6} params  max rel err {:.3e}  max abs err {:.3e}  {}",
                    c.name,
                    c.params,
                    c.max_rel_err,
                    c.max_abs_err,
                    if c.passed { "ok" } else { "FAILED" }
                );
            }
            let worst = report.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            println!("max relative error {worst:.3e}");
            if !report.passed() {
                return Ok(1);
            }
        }
        Command::ExportConfig { preset, out } => {
            let text = ExperimentConfig::preset(&preset)?.to_json()?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
