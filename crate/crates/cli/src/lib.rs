//! Command implementations behind the `fbsde` binary.
//!
//! Every command returns a [`Result`]; [`exit_code`] maps errors to the
//! process exit status (2 configuration, 3 training abort, 4 checkpoint).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fbsde_core::config::ExperimentConfig;
use fbsde_core::costs::{Constraint, KChange, PenaltyKind, PenaltySpec};
use fbsde_core::ensemble::{multi_step_rollout, train_ensemble, walk_noise, Ensemble, EnsembleMember, WalkFailure, MANIFEST_FILE};
use fbsde_core::gradcheck::{self, GradcheckOptions, GradcheckReport};
use fbsde_core::io::{linspace, write_json, write_jsonl, write_penalty_curve, write_trajectories_csv};
use fbsde_core::nn::ParamStore;
use fbsde_core::trainer::{evaluate, init_net, train, Abort, EvalOptions, LogRecord, Metrics};
use fbsde_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FILE: &str = "config.resolved.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "train_timing.jsonl";
pub const K_CHANGES_FILE: &str = "k_changes.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const ENSEMBLE_DIR: &str = "ensemble";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) => 2,
        Error::TrainingAborted { .. } => 3,
        Error::Checkpoint { .. } => 4,
        _ => 1,
    }
}

/// Output directory: explicit flag, then `FBSDE_OUTPUT_DIR`, then the config.
pub fn output_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.resolved_output_dir(), Path::to_path_buf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub iteration: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub id: usize,
    pub iterations_completed: usize,
    pub final_k: f64,
    pub abort: Option<Abort>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations_completed: usize,
    pub final_k: f64,
    pub abort: Option<Abort>,
    /// Per-member results when an ensemble was trained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<MemberSummary>,
}

fn write_run_logs(dir: &Path, prefix: &str, log: &[LogRecord], wall_ms: &[f64], k_changes: &[KChange]) -> Result<()> {
    write_jsonl(&dir.join(format!("{prefix}{LOG_FILE}")), log)?;
    let timing: Vec<Timing> = log.iter().zip(wall_ms).map(|(r, w)| Timing { iteration: r.iteration, wall_ms: *w }).collect();
    write_jsonl(&dir.join(format!("{prefix}{TIMING_FILE}")), &timing)?;
    write_jsonl(&dir.join(format!("{prefix}{K_CHANGES_FILE}")), k_changes)
}

/// Trains a single controller, or an ensemble when the config has an
/// `ensemble` table, writing the snapshot, logs and checkpoints into `out`.
/// An abort is written to the summary and then returned as an error.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(SNAPSHOT_FILE), cfg.to_json()?)?;
    let env = cfg.environment()?;
    let task = cfg.task(&env);
    let n = env.model().state_dim();

    let summary = if let Some(ens) = &cfg.ensemble {
        let dir = out.join(ENSEMBLE_DIR);
        match train_ensemble(&task, &cfg.penalty_schedule, &cfg.train, &cfg.net, ens, Some(&dir)) {
            Ok(build) => {
                let mut members = Vec::new();
                for (id, o) in build.outcomes.iter().enumerate() {
                    write_run_logs(out, &format!("member_{id}_"), &o.log, &o.wall_ms, &o.k_changes)?;
                    members.push(MemberSummary { id, iterations_completed: o.log.len(), final_k: o.final_k, abort: None });
                }
                TrainSummary {
                    iterations_completed: members.iter().map(|m| m.iterations_completed).sum(),
                    final_k: members.last().map_or(cfg.penalty_schedule.k, |m| m.final_k),
                    abort: None,
                    members,
                }
            }
            Err(Error::TrainingAborted { iteration, reason }) => {
                let abort = Abort { iteration, reason: reason.clone() };
                let summary = TrainSummary { iterations_completed: 0, final_k: cfg.penalty_schedule.k, abort: Some(abort), members: vec![] };
                write_json(&out.join(SUMMARY_FILE), &summary)?;
                return Err(Error::TrainingAborted { iteration, reason });
            }
            Err(e) => return Err(e),
        }
    } else {
        let mut net = init_net(&cfg.net, n, cfg.train.seed, 0)?;
        let outcome = train(&task, &cfg.penalty_schedule, &cfg.train, &mut net, Some(&out.join(CHECKPOINT_STEM)))?;
        write_run_logs(out, "", &outcome.log, &outcome.wall_ms, &outcome.k_changes)?;
        TrainSummary { iterations_completed: outcome.log.len(), final_k: outcome.final_k, abort: outcome.abort, members: vec![] }
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    if let Some(a) = &summary.abort {
        return Err(Error::TrainingAborted { iteration: a.iteration, reason: a.reason.clone() });
    }
    Ok(summary)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub noise: bool,
    pub sample_initial: bool,
    pub latency_calls: usize,
    /// Penalty steepness for reported costs; defaults to the run's final `k`.
    pub k: Option<f64>,
}

/// Penalty steepness recorded by the training run next to `checkpoint`.
fn recorded_k(checkpoint: &Path) -> Option<f64> {
    let summary = checkpoint.parent()?.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(summary).ok()?;
    serde_json::from_str::<TrainSummary>(&text).ok().map(|s| s.final_k)
}

/// Evaluates a checkpoint and writes `metrics.json` and `trajectories.csv` into `out`.
pub fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs, out: &Path) -> Result<Metrics> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let task = cfg.task(&env);
    let n = env.model().state_dim();
    let m = env.model().control_dim();
    let mut net = init_net(&cfg.net, n, cfg.train.seed, 0)?;
    let stored = ParamStore::load(&args.checkpoint)?;
    net.store.assign_from(&stored)?;
    let k = args.k.or_else(|| recorded_k(&args.checkpoint)).or(cfg.train.fixed_k).unwrap_or(cfg.penalty.k);
    let opts = EvalOptions {
        trials: args.trials.unwrap_or(cfg.train.eval_trials),
        seed: args.seed.unwrap_or(cfg.train.seed.wrapping_add(1)),
        noise: args.noise,
        sample_initial: args.sample_initial,
        latency_calls: args.latency_calls,
        k,
    };
    let evaluation = evaluate(&task, &cfg.train, &net, &opts)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &evaluation.metrics)?;
    let file = BufWriter::new(File::create(out.join("trajectories.csv"))?);
    write_trajectories_csv(file, &evaluation.trajectories, cfg.train.dt, n, m, &cfg.penalty)?;
    Ok(evaluation.metrics)
}

#[derive(Clone, Debug)]
pub struct WalkArgs {
    /// Directory holding the ensemble manifest; `None` walks untrained members.
    pub ensemble: Option<PathBuf>,
    pub footsteps: Option<usize>,
    pub seed: u64,
    pub noise: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkSummary {
    pub footsteps_completed: usize,
    pub members: Vec<usize>,
    pub failure: Option<WalkFailure>,
    pub min_knee_angle: f64,
    /// Fraction of stored states with `q₄ − q₅ < 0`.
    pub hyperextended_fraction: f64,
}

/// Multi-footstep walk; writes `walk.csv` and `walk_summary.json` into `out`.
pub fn cmd_walk(cfg: &ExperimentConfig, args: &WalkArgs, out: &Path) -> Result<WalkSummary> {
    cfg.validate()?;
    let ens_cfg = cfg.ensemble.clone().ok_or_else(|| Error::Config("walking needs an `ensemble` table".into()))?;
    let env = cfg.environment()?;
    let task = cfg.task(&env);
    let n = env.model().state_dim();
    let ensemble = match &args.ensemble {
        Some(dir) => Ensemble::load(dir, &cfg.net, n)?,
        None => {
            let nominals = ens_cfg.nominal_states.clone().unwrap_or_else(|| vec![cfg.train.initial_state.clone(); ens_cfg.size]);
            let members = nominals
                .into_iter()
                .enumerate()
                .map(|(id, nominal_state)| Ok(EnsembleMember { id, nominal_state, net: init_net(&cfg.net, n, cfg.train.seed, id as u64)? }))
                .collect::<Result<Vec<_>>>()?;
            Ensemble { members, scales: cfg.net.input_scale.clone() }
        }
    };
    let footsteps = args.footsteps.unwrap_or(ens_cfg.footsteps);
    let len = cfg.train.horizon_steps * env.model().noise_dim();
    let noise = walk_noise(args.seed, footsteps, len, cfg.train.dt, args.noise.unwrap_or(ens_cfg.walk_noise));
    let k = cfg.train.fixed_k.unwrap_or(cfg.penalty.k);
    let trace = multi_step_rollout(&ensemble, &task, &cfg.train, k, &cfg.train.initial_state, &noise)?;
    std::fs::create_dir_all(out)?;
    trace.write_csv(BufWriter::new(File::create(out.join("walk.csv"))?))?;
    let knees = trace.knee_angles();
    let summary = WalkSummary {
        footsteps_completed: trace.footsteps.len(),
        members: trace.footsteps.iter().map(|f| f.member).collect(),
        failure: trace.failure.clone(),
        min_knee_angle: knees.iter().copied().fold(f64::INFINITY, f64::min),
        hyperextended_fraction: knees.iter().filter(|k| **k < 0.0).count() as f64 / knees.len().max(1) as f64,
    };
    write_json(&out.join("walk_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct PenaltyPlotArgs {
    pub kind: PenaltyKind,
    pub lower: f64,
    pub upper: f64,
    pub max_penalty: f64,
    pub ks: Vec<f64>,
    pub from: f64,
    pub to: f64,
    pub samples: usize,
}

impl Default for PenaltyPlotArgs {
    fn default() -> Self {
        Self { kind: PenaltyKind::Logistic, lower: 1.0, upper: 5.0, max_penalty: 5.0, ks: vec![1.0, 2.0, 5.0], from: -1.0, to: 7.0, samples: 801 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenaltyPlotReport {
    pub midpoint: f64,
    /// Largest `p(midpoint)` over the requested steepness values.
    pub value_at_midpoint: f64,
    /// Largest `|p(μ − a) − p(μ + a)|` over the sampled offsets.
    pub symmetry_error: f64,
    pub rows: usize,
}

pub fn penalty_plot_spec(args: &PenaltyPlotArgs) -> Result<PenaltySpec> {
    let spec = PenaltySpec {
        kind: args.kind,
        k: args.ks.first().copied().unwrap_or(1.0),
        max_penalty: (args.kind == PenaltyKind::Logistic).then_some(args.max_penalty),
        constraints: vec![Constraint::component(0, Some(args.lower), Some(args.upper))],
    };
    spec.validate(1)?;
    Ok(spec)
}

/// Writes `kind,k,x,p` samples of the scalar penalty to `path`.
pub fn cmd_penalty_plot(args: &PenaltyPlotArgs, path: &Path) -> Result<PenaltyPlotReport> {
    if args.ks.is_empty() || args.samples == 0 || !(args.from < args.to) {
        return Err(Error::Usage("penalty-plot needs at least one k, one sample and from < to".into()));
    }
    let spec = penalty_plot_spec(args)?;
    let xs = linspace(args.from, args.to, args.samples);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_penalty_curve(BufWriter::new(File::create(path)?), &spec, &args.ks, &xs)?;
    let mu = 0.5 * (args.lower + args.upper);
    let mut value_at_midpoint: f64 = 0.0;
    let mut symmetry_error: f64 = 0.0;
    for &k in &args.ks {
        let s = spec.with_k(k);
        value_at_midpoint = value_at_midpoint.max(s.value(&[mu]).abs());
        for x in &xs {
            let a = x - mu;
            symmetry_error = symmetry_error.max((s.value(&[mu - a]) - s.value(&[mu + a])).abs());
        }
    }
    Ok(PenaltyPlotReport { midpoint: mu, value_at_midpoint, symmetry_error, rows: xs.len() * args.ks.len() })
}

pub fn cmd_gradcheck(seed: u64, lstm_only: bool, corrupt: bool) -> Result<GradcheckReport> {
    let opts = GradcheckOptions { seed, corrupt, ..GradcheckOptions::default() };
    if lstm_only {
        gradcheck::run_only(&["lstm"], &opts)
    } else {
        gradcheck::run(&opts)
    }
}

/// Whether `dir` holds a trained ensemble.
pub fn has_ensemble(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).exists()
}
