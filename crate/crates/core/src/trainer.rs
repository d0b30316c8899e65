//! Training loop, evaluation and their records.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::costs::{CostSpec, KChange, PenaltySpec, ScheduleConfig, ScheduleState};
use crate::dynamics::{JumpMap, SdeModel};
use crate::error::{Error, Result};
use crate::fbsde::{batch_loss_and_grad, rollout_batch, Controller, GradMode, LossOptions, NetConfig, Problem, Reduction, Trajectory, ValueNet};
use crate::nn::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Terminal loss only, fixed initial state.
    Continuous,
    /// Terminal loss on the post-jump state plus the value-function loss.
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub mode: TrainMode,
    /// Weight of the value-function loss in hybrid mode.
    pub lambda: f64,
    pub reduction: Reduction,
    pub grad_mode: GradMode,
    pub seed: u64,
    pub initial_state: Vec<f64>,
    /// Half-widths of the uniform box around `initial_state`; `None` keeps it fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_half_width: Option<Vec<f64>>,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Largest fraction of a batch that may diverge before training aborts.
    pub max_drop_fraction: f64,
    /// Trains at this steepness without the schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_k: Option<f64>,
    pub eval_trials: usize,
}

impl TrainConfig {
    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon_steps == 0 || self.batch_size == 0 || self.eval_trials == 0 {
            return bad("train.horizon_steps, train.batch_size and train.eval_trials must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("train.dt must be positive");
        }
        if self.initial_state.len() != n || self.initial_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("train.initial_state needs {n} finite entries")));
        }
        if let Some(w) = &self.initial_half_width {
            if w.len() != n || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("train.initial_half_width needs {n} non-negative entries")));
            }
        }
        if !(self.lambda >= 0.0) || !(0.0..=1.0).contains(&self.max_drop_fraction) {
            return bad("train.lambda must be non-negative and train.max_drop_fraction in [0, 1]");
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("train.optimizer.learning_rate must be positive");
        }
        if let Some(k) = self.fixed_k {
            if !(k > 0.0 && k.is_finite()) {
                return bad("train.fixed_k must be positive");
            }
        }
        Ok(())
    }
}

/// The system, its costs and its constraints.
#[derive(Clone, Copy)]
pub struct Task<'a> {
    pub model: &'a dyn SdeModel,
    pub jump: Option<&'a dyn JumpMap>,
    pub costs: &'a CostSpec,
    /// Constraints used for violation statistics and, when `constrained`, the penalty.
    pub penalty: &'a PenaltySpec,
    pub constrained: bool,
}

impl Task<'_> {
    pub(crate) fn problem<'b>(&'b self, penalty: Option<&'b PenaltySpec>, cfg: &TrainConfig) -> Problem<'b> {
        Problem { model: self.model, costs: self.costs, penalty, jump: self.jump, dt: cfg.dt, steps: cfg.horizon_steps }
    }

    /// Whether any stored state (pre-jump) violates a constraint.
    pub fn violates(&self, traj: &Trajectory) -> bool {
        (0..=traj.steps()).any(|k| !self.penalty.satisfied(traj.state(k)))
    }
}

const STREAM_NOISE: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_EVAL_NOISE: u64 = 3;
const STREAM_EVAL_INIT: u64 = 4;
const STREAM_NET: u64 = 5;

/// Freshly initialised network for ensemble member `member` (0 for single runs).
pub fn init_net(config: &NetConfig, state_dim: usize, seed: u64, member: u64) -> Result<ValueNet> {
    ValueNet::new(config.clone(), state_dim, &mut stream_rng(seed, STREAM_NET, 0, member))
}

/// Independent generator per `(seed, purpose, iteration, batch index)`.
pub fn stream_rng(seed: u64, purpose: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ (iteration << 24) ^ index);
    rng
}

/// `len` increments `Δw ~ N(0, Δt)`.
pub fn sample_noise(rng: &mut impl Rng, len: usize, dt: f64) -> Vec<f64> {
    let s = dt.sqrt();
    (0..len).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample_initial(rng: &mut impl Rng, center: &[f64], half: Option<&Vec<f64>>) -> Vec<f64> {
    match half {
        None => center.to_vec(),
        Some(w) => center.iter().zip(w).map(|(c, w)| if *w > 0.0 { c + rng.random_range(-*w..=*w) } else { *c }).collect(),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub mean_episode_cost: f64,
    /// Steepness used during this iteration.
    pub k: f64,
    /// Kept batch elements with at least one violating state.
    pub violations: usize,
    /// Batch elements dropped after diverging.
    pub dropped: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub k_changes: Vec<KChange>,
    /// Wall time per iteration; kept apart from the log, which is deterministic.
    pub wall_ms: Vec<f64>,
    pub final_k: f64,
    pub abort: Option<Abort>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<Self> {
        match &self.abort {
            Some(a) => Err(Error::TrainingAborted { iteration: a.iteration, reason: a.reason.clone() }),
            None => Ok(self),
        }
    }
}

pub(crate) fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::RolloutDivergence { .. } | Error::IntegrationBlowup { .. } | Error::Numerical(_) | Error::Domain(_))
}

/// Runs `cfg.iterations` optimisation steps on `net`. Aborts are reported in
/// the outcome; the last checkpoint (if any) stays on disk.
pub fn train(
    task: &Task,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    net: &mut ValueNet,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    let n = task.model.state_dim();
    cfg.validate(n)?;
    task.costs.validate(n, task.model.control_dim())?;
    task.penalty.validate(n)?;
    schedule.validate()?;

    let mut sched = ScheduleState::new(ScheduleConfig { enabled: schedule.enabled && cfg.fixed_k.is_none(), ..schedule.clone() });
    if let Some(k) = cfg.fixed_k {
        sched.k = k;
    }
    let mut adam = Adam::new(cfg.optimizer, net.num_params());
    let opts = LossOptions {
        grad_mode: cfg.grad_mode,
        value_weight: (cfg.mode == TrainMode::Hybrid).then_some(cfg.lambda),
    };
    let mut out = TrainOutcome { log: Vec::new(), k_changes: Vec::new(), wall_ms: Vec::new(), final_k: sched.k, abort: None };
    let m = cfg.batch_size;
    let noise_len = cfg.horizon_steps * task.model.noise_dim();

    for it in 1..=cfg.iterations {
        let started = Instant::now();
        let k = sched.k;
        let pen = task.penalty.with_k(k);
        let problem = task.problem(task.constrained.then_some(&pen), cfg);
        let x0: Vec<Vec<f64>> = (0..m)
            .map(|j| sample_initial(&mut stream_rng(cfg.seed, STREAM_INIT, it as u64, j as u64), &cfg.initial_state, cfg.initial_half_width.as_ref()))
            .collect();
        let noise: Vec<Vec<f64>> =
            (0..m).map(|j| sample_noise(&mut stream_rng(cfg.seed, STREAM_NOISE, it as u64, j as u64), noise_len, cfg.dt)).collect();

        let results = batch_loss_and_grad(net, &problem, &x0, &noise, &opts);
        let mut kept = Vec::with_capacity(m);
        let mut dropped = 0;
        for r in results {
            match r {
                Ok(o) => kept.push(o),
                Err(e) if is_divergence(&e) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() || dropped as f64 > cfg.max_drop_fraction * m as f64 {
            out.abort = Some(Abort { iteration: it, reason: format!("{dropped} of {m} rollouts diverged") });
            break;
        }
        let factor = cfg.reduction.factor(kept.len());
        let mut grad = vec![0.0; net.num_params()];
        let mut loss = 0.0;
        let mut cost = 0.0;
        let mut violations = 0;
        for o in &kept {
            grad.iter_mut().zip(&o.grad).for_each(|(g, e)| *g += e);
            loss += o.loss;
            cost += o.trajectory.episode_cost(cfg.dt);
            violations += usize::from(task.violates(&o.trajectory));
        }
        loss *= factor;
        grad.iter_mut().for_each(|g| *g *= factor);
        let mean_cost = cost / kept.len() as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            out.abort = Some(Abort { iteration: it, reason: "non-finite loss or gradient".into() });
            break;
        }
        let grad_norm = adam.step(net.store.flat_mut(), &mut grad)?;
        if net.store.flat().iter().any(|p| !p.is_finite()) {
            out.abort = Some(Abort { iteration: it, reason: "non-finite parameters".into() });
            break;
        }
        if let Some(change) = sched.update(mean_cost, violations == 0) {
            out.k_changes.push(change);
        }
        out.log.push(LogRecord { iteration: it, loss, mean_episode_cost: mean_cost, k, violations, dropped, grad_norm });
        out.final_k = sched.k;
        if let Some(stem) = checkpoint {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
                net.save(stem)?;
            }
        }
        out.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    if let (Some(stem), None) = (checkpoint, &out.abort) {
        net.save(stem)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub trials: usize,
    pub seed: u64,
    /// Zero noise when false.
    pub noise: bool,
    /// Draw initial states from the training box instead of the fixed start.
    pub sample_initial: bool,
    /// Timed single-step controller calls.
    pub latency_calls: usize,
    /// Steepness of the penalty inside the reported costs.
    pub k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStats {
    pub index: usize,
    /// Fraction of completed trials in which this constraint is violated.
    pub violation_rate: f64,
    pub max_excursion: f64,
    pub mean_max_excursion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub trials: usize,
    pub diverged: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    /// Mean `‖x_N − x̄‖` (post-jump when a jump map is set).
    pub terminal_error: f64,
    /// Fraction of trials with any violation; diverged trials count as violating.
    pub violation_rate: f64,
    /// Fraction of evaluated states that violate any constraint.
    pub step_violation_rate: f64,
    pub constraints: Vec<ConstraintStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub calls: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub stats: TrialStats,
    pub latency: LatencyStats,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// `None` for diverged trials.
    pub trajectories: Vec<Option<Trajectory>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

/// Noisy rollouts without learning, aggregated into [`Metrics`].
pub fn evaluate(task: &Task, cfg: &TrainConfig, net: &ValueNet, opts: &EvalOptions) -> Result<Evaluation> {
    let n = task.model.state_dim();
    cfg.validate(n)?;
    if opts.trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    let pen = task.penalty.with_k(opts.k);
    let problem = task.problem(task.constrained.then_some(&pen), cfg);
    let noise_len = cfg.horizon_steps * task.model.noise_dim();
    let half = if opts.sample_initial { cfg.initial_half_width.as_ref() } else { None };
    let x0: Vec<Vec<f64>> =
        (0..opts.trials).map(|j| sample_initial(&mut stream_rng(opts.seed, STREAM_EVAL_INIT, 0, j as u64), &cfg.initial_state, half)).collect();
    let noise: Vec<Vec<f64>> = (0..opts.trials)
        .map(|j| {
            if opts.noise {
                sample_noise(&mut stream_rng(opts.seed, STREAM_EVAL_NOISE, 0, j as u64), noise_len, cfg.dt)
            } else {
                vec![0.0; noise_len]
            }
        })
        .collect();
    let mut trajectories = Vec::with_capacity(opts.trials);
    for r in rollout_batch(net, &problem, &x0, &noise) {
        match r {
            Ok(t) => trajectories.push(Some(t)),
            Err(e) if is_divergence(&e) => trajectories.push(None),
            Err(e) => return Err(e),
        }
    }

    let done: Vec<&Trajectory> = trajectories.iter().flatten().collect();
    let costs: Vec<f64> = done.iter().map(|t| t.episode_cost(cfg.dt)).collect();
    let (mean_cost, std_cost) = mean_std(&costs);
    let errors: Vec<f64> = done
        .iter()
        .map(|t| t.terminal_state.iter().zip(&task.costs.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    let diverged = opts.trials - done.len();
    let violating = done.iter().filter(|t| task.violates(t)).count() + diverged;
    let (mut bad_states, mut states) = (0usize, 0usize);
    for t in &done {
        for k in 0..=t.steps() {
            states += 1;
            bad_states += usize::from(!task.penalty.satisfied(t.state(k)));
        }
    }
    let constraints = task
        .penalty
        .constraints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let per_trial: Vec<f64> =
                done.iter().map(|t| (0..=t.steps()).map(|k| c.excursion(t.state(k))).fold(0.0, f64::max)).collect();
            ConstraintStats {
                index: i,
                violation_rate: per_trial.iter().filter(|e| **e > 0.0).count() as f64 / done.len().max(1) as f64,
                max_excursion: per_trial.iter().copied().fold(0.0, f64::max),
                mean_max_excursion: mean_std(&per_trial).0,
            }
        })
        .collect();
    let stats = TrialStats {
        trials: opts.trials,
        diverged,
        mean_cost,
        std_cost,
        terminal_error: mean_std(&errors).0,
        violation_rate: violating as f64 / opts.trials as f64,
        step_violation_rate: bad_states as f64 / states.max(1) as f64,
        constraints,
    };
    let latency = measure_latency(task, cfg, net, done.first().copied(), &x0[0], opts.latency_calls)?;
    Ok(Evaluation { metrics: Metrics { stats, latency }, trajectories })
}

/// Times `calls` controller steps (network forward pass plus control law)
/// along a stored trajectory, restarting at its end.
pub fn measure_latency(
    task: &Task,
    cfg: &TrainConfig,
    net: &ValueNet,
    traj: Option<&Trajectory>,
    x0: &[f64],
    calls: usize,
) -> Result<LatencyStats> {
    let mut ctl = Controller::new(net, task.model, task.costs, cfg.horizon_steps);
    let steps = cfg.horizon_steps;
    let state = |k: usize| traj.map_or(x0, |t| t.state(k));
    let mut samples = Vec::with_capacity(calls);
    for c in 0..calls {
        let k = c % steps;
        if k == 0 {
            ctl.reset(state(0))?;
        }
        let started = Instant::now();
        let u = ctl.act(state(k))?;
        samples.push(started.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(u);
    }
    if samples.is_empty() {
        return Ok(LatencyStats { calls: 0, median_ms: 0.0, mean_ms: 0.0, p95_ms: 0.0 });
    }
    let mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    Ok(LatencyStats { calls, median_ms: pick(0.5), mean_ms, p95_ms: pick(0.95) })
}
