//! Controller ensembles for multi-footstep walking.
//!
//! Each member is a hybrid-mode network trained around its own nominal
//! initial state. During a walk the member whose nominal state is closest to
//! the footstep's initial state (in whitened coordinates) controls the whole
//! footstep, after which the heel-strike map produces the next initial state.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costs::ScheduleConfig;
use crate::error::{Error, Result};
use crate::fbsde::{rollout, NetConfig, Trajectory, ValueNet};
use crate::nn::Tape;
use crate::trainer::{init_net, is_divergence, sample_noise, stream_rng, train, Task, TrainConfig, TrainMode, TrainOutcome};

/// Swing-knee angle indices: the knee is hyperextended when `x[3] − x[4] < 0`.
pub const KNEE: (usize, usize) = (3, 4);

const STREAM_WALK: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of members when `nominal_states` is absent.
    pub size: usize,
    /// Explicit nominal initial states; generated from the first member when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_states: Option<Vec<Vec<f64>>>,
    /// Half-width of the training box for each joint angle.
    pub angle_half_width_deg: f64,
    /// Half-width of the training box for each joint velocity.
    pub velocity_half_width_deg: f64,
    /// Footsteps per walk.
    pub footsteps: usize,
    /// Diffusion noise during walks.
    pub walk_noise: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { size: 3, nominal_states: None, angle_half_width_deg: 3.0, velocity_half_width_deg: 9.5, footsteps: 3, walk_noise: false }
    }
}

impl EnsembleConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(states) = &self.nominal_states {
            if states.is_empty() {
                return Err(Error::Config("ensemble.nominal_states must not be empty".into()));
            }
            if states.iter().any(|s| s.len() != n || s.iter().any(|v| !v.is_finite())) {
                return Err(Error::Config(format!("ensemble.nominal_states entries need {n} finite values")));
            }
        } else if self.size == 0 {
            return Err(Error::Config("ensemble.size must be at least 1".into()));
        }
        let widths = [self.angle_half_width_deg, self.velocity_half_width_deg];
        if widths.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("ensemble half-widths must be non-negative".into()));
        }
        if self.footsteps == 0 {
            return Err(Error::Config("ensemble.footsteps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.nominal_states.as_ref().map_or(self.size, Vec::len)
    }

    /// Box half-widths in radians: angles first, then velocities.
    pub fn half_width(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| if i < n / 2 { self.angle_half_width_deg } else { self.velocity_half_width_deg }.to_radians())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub id: usize,
    pub nominal_state: Vec<f64>,
    pub net: ValueNet,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<EnsembleMember>,
    /// Per-dimension distance scales.
    pub scales: Vec<f64>,
}

/// Member with the smallest `Σ ((x₀ − nominal) / scale)²`; ties go to the lowest id.
pub fn select_controller<'a>(members: &'a [EnsembleMember], x0: &[f64], scales: &[f64]) -> Result<&'a EnsembleMember> {
    if members.is_empty() {
        return Err(Error::Usage("cannot select from an empty ensemble".into()));
    }
    if x0.len() != scales.len() || members.iter().any(|m| m.nominal_state.len() != x0.len()) {
        return Err(Error::Usage("state, scale and nominal dimensions differ".into()));
    }
    let dist = |m: &EnsembleMember| -> f64 { x0.iter().zip(&m.nominal_state).zip(scales).map(|((x, c), s)| ((x - c) / s).powi(2)).sum() };
    let mut best = &members[0];
    let mut best_d = dist(best);
    for m in &members[1..] {
        let d = dist(m);
        if d < best_d || (d == best_d && m.id < best.id) {
            best = m;
            best_d = d;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Footstep {
    pub member: usize,
    /// Pre-impact states `x_0 … x_N`; `terminal_state` holds the post-impact state.
    pub trajectory: Trajectory,
}

impl Footstep {
    pub fn pre_impact(&self) -> &[f64] {
        self.trajectory.state(self.trajectory.steps())
    }

    pub fn post_impact(&self) -> &[f64] {
        &self.trajectory.terminal_state
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkFailure {
    pub footstep: usize,
    /// Integration step at which the rollout diverged, when known.
    pub step: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkTrace {
    pub dt: f64,
    pub footsteps: Vec<Footstep>,
    pub failure: Option<WalkFailure>,
}

impl WalkTrace {
    /// `q₄ − q₅` at every stored state, footstep after footstep.
    pub fn knee_angles(&self) -> Vec<f64> {
        self.footsteps
            .iter()
            .flat_map(|f| (0..=f.trajectory.steps()).map(move |k| f.trajectory.state(k)[KNEE.0] - f.trajectory.state(k)[KNEE.1]))
            .collect()
    }

    /// One row per stored state: `footstep,member,step,t,x1…xn,u1…um,knee`.
    /// The control columns are empty on the pre-impact row.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let Some(first) = self.footsteps.first() else {
            writeln!(w, "footstep,member,step,t,knee")?;
            return Ok(());
        };
        let (n, m) = (first.trajectory.state_dim, first.trajectory.control_dim);
        let mut header = vec!["footstep".to_string(), "member".into(), "step".into(), "t".into()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("knee".into());
        writeln!(w, "{}", header.join(","))?;
        let mut offset = 0;
        for (s, f) in self.footsteps.iter().enumerate() {
            let steps = f.trajectory.steps();
            for k in 0..=steps {
                let x = f.trajectory.state(k);
                let mut row = vec![s.to_string(), f.member.to_string(), k.to_string(), ((offset + k) as f64 * self.dt).to_string()];
                row.extend(x.iter().map(f64::to_string));
                if k < steps {
                    row.extend(f.trajectory.control(k).iter().map(f64::to_string));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), m));
                }
                row.push((x[KNEE.0] - x[KNEE.1]).to_string());
                writeln!(w, "{}", row.join(","))?;
            }
            offset += steps;
        }
        Ok(())
    }
}

/// Per-footstep noise for a walk; zeros when `enabled` is false.
pub fn walk_noise(seed: u64, footsteps: usize, len: usize, dt: f64, enabled: bool) -> Vec<Vec<f64>> {
    (0..footsteps)
        .map(|s| if enabled { sample_noise(&mut stream_rng(seed, STREAM_WALK, 0, s as u64), len, dt) } else { vec![0.0; len] })
        .collect()
}

/// Walks `noise.len()` footsteps from `x0`, re-selecting the controller at
/// the start of every footstep. The penalty (when `task.constrained`) uses
/// steepness `k`. A diverging footstep ends the walk with a failure record.
pub fn multi_step_rollout(ensemble: &Ensemble, task: &Task, cfg: &TrainConfig, k: f64, x0: &[f64], noise: &[Vec<f64>]) -> Result<WalkTrace> {
    if task.jump.is_none() {
        return Err(Error::Usage("walking needs a jump map".into()));
    }
    let pen = task.penalty.with_k(k);
    let problem = task.problem(task.constrained.then_some(&pen), cfg);
    let mut trace = WalkTrace { dt: cfg.dt, footsteps: Vec::with_capacity(noise.len()), failure: None };
    let mut x = x0.to_vec();
    let mut tape = Tape::new();
    for (s, w) in noise.iter().enumerate() {
        let member = select_controller(&ensemble.members, &x, &ensemble.scales)?;
        match rollout(&member.net, &problem, &x, w, &mut tape) {
            Ok(t) => {
                x = t.terminal_state.clone();
                trace.footsteps.push(Footstep { member: member.id, trajectory: t });
            }
            Err(e) if is_divergence(&e) => {
                let step = match e {
                    Error::RolloutDivergence { step } | Error::IntegrationBlowup { step } => Some(step),
                    _ => None,
                };
                trace.failure = Some(WalkFailure { footstep: s, step, reason: e.to_string() });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}

/// Manifest entry pointing at a member checkpoint stem relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub nominal_state: Vec<f64>,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub members: Vec<ManifestEntry>,
    pub scales: Vec<f64>,
}

pub const MANIFEST_FILE: &str = "ensemble.json";

pub fn member_stem(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("member_{id}"))
}

impl Ensemble {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            members: self
                .members
                .iter()
                .map(|m| ManifestEntry { id: m.id, nominal_state: m.nominal_state.clone(), checkpoint: format!("member_{}", m.id) })
                .collect(),
            scales: self.scales.clone(),
        }
    }

    /// Writes every member checkpoint and the manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in &self.members {
            m.net.save(&member_stem(dir, m.id))?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: &Path, config: &NetConfig, state_dim: usize) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
        if manifest.scales.len() != state_dim || manifest.members.iter().any(|m| m.nominal_state.len() != state_dim) {
            return Err(Error::Checkpoint { path, reason: format!("manifest does not describe a {state_dim}-dimensional system") });
        }
        let mut members = Vec::with_capacity(manifest.members.len());
        for e in manifest.members {
            let mut net = init_net(config, state_dim, 0, e.id as u64)?;
            net.load_params(&dir.join(&e.checkpoint))?;
            members.push(EnsembleMember { id: e.id, nominal_state: e.nominal_state, net });
        }
        Ok(Self { members, scales: manifest.scales })
    }
}

/// Nominal states reached by walking `first` from `start` without noise:
/// `start`, then each post-impact state, `count` in total.
pub fn generate_nominals(first: &EnsembleMember, scales: &[f64], task: &Task, cfg: &TrainConfig, k: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    let solo = Ensemble { members: vec![first.clone()], scales: scales.to_vec() };
    let len = cfg.horizon_steps * task.model.noise_dim();
    let trace = multi_step_rollout(&solo, task, cfg, k, &first.nominal_state, &walk_noise(0, count.saturating_sub(1), len, cfg.dt, false))?;
    if let Some(f) = trace.failure {
        return Err(Error::Numerical(format!("nominal generation diverged in footstep {}: {}", f.footstep, f.reason)));
    }
    let mut out = vec![first.nominal_state.clone()];
    out.extend(trace.footsteps.iter().map(|f| f.post_impact().to_vec()));
    Ok(out)
}

pub struct EnsembleBuild {
    pub ensemble: Ensemble,
    pub outcomes: Vec<TrainOutcome>,
}

/// Trains one hybrid-mode member per nominal state. Member `i` uses seed
/// `cfg.seed + i` and a uniform box of the configured half-widths around its
/// nominal. Checkpoints land in `dir` as they finish; an abort fails the
/// build and keeps the members already written.
pub fn train_ensemble(
    task: &Task,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    net_config: &NetConfig,
    ens: &EnsembleConfig,
    dir: Option<&Path>,
) -> Result<EnsembleBuild> {
    let n = task.model.state_dim();
    ens.validate(n)?;
    net_config.validate(n)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let scales = net_config.input_scale.clone();
    let count = ens.members();
    let mut nominals = ens.nominal_states.clone().unwrap_or_else(|| vec![cfg.initial_state.clone()]);
    let mut members = Vec::with_capacity(count);
    let mut outcomes = Vec::with_capacity(count);
    for id in 0..count {
        let member_cfg = TrainConfig {
            mode: TrainMode::Hybrid,
            seed: cfg.seed.wrapping_add(id as u64),
            initial_state: nominals[id].clone(),
            initial_half_width: Some(ens.half_width(n)),
            ..cfg.clone()
        };
        let mut net = init_net(net_config, n, member_cfg.seed, id as u64)?;
        let stem = dir.map(|d| member_stem(d, id));
        let outcome = train(task, schedule, &member_cfg, &mut net, stem.as_deref())?;
        if let Some(a) = &outcome.abort {
            return Err(Error::TrainingAborted { iteration: a.iteration, reason: format!("ensemble member {id}: {}", a.reason) });
        }
        let member = EnsembleMember { id, nominal_state: nominals[id].clone(), net };
        if id == 0 && nominals.len() < count {
            nominals = generate_nominals(&member, &scales, task, cfg, outcome.final_k, count)?;
        }
        outcomes.push(outcome);
        members.push(member);
    }
    let ensemble = Ensemble { members, scales };
    if let Some(d) = dir {
        std::fs::write(d.join(MANIFEST_FILE), serde_json::to_string_pretty(&ensemble.manifest())?)?;
    }
    Ok(EnsembleBuild { ensemble, outcomes })
}
