//! Experiment configuration: schema, presets, overrides and validation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::costs::{Constraint, ControlCost, CostSpec, PenaltyKind, PenaltySpec, ScheduleConfig, Weight};
use crate::dynamics::biped::NOMINAL_STATE;
use crate::dynamics::{BipedParams, CartPoleParams};
use crate::ensemble::EnsembleConfig;
use crate::env::{EnvConfig, Environment, LqToyParams};
use crate::error::{Error, Result};
use crate::fbsde::{GradMode, H0Mode, NetConfig, Reduction, V0Mode};
use crate::nn::AdamConfig;
use crate::trainer::{Task, TrainConfig, TrainMode};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FBSDE_OUTPUT_DIR";

pub const PRESETS: [&str; 3] = ["cartpole", "biped", "lq_toy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub costs: CostSpec,
    /// Constraints. Always used for violation statistics; added to the
    /// state cost only when `constrained` is true.
    pub penalty: PenaltySpec,
    pub constrained: bool,
    pub penalty_schedule: ScheduleConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    pub output_dir: PathBuf,
}

/// Short names accepted by `--set`.
const ALIASES: [(&str, &str); 6] = [
    ("train.N_I", "train.iterations"),
    ("train.N", "train.horizon_steps"),
    ("train.M", "train.batch_size"),
    ("N_I", "train.iterations"),
    ("N", "train.horizon_steps"),
    ("M", "train.batch_size"),
];

fn resolve_alias(path: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == path).map_or(path, |(_, p)| p)
}

/// Sets `path=value` inside a JSON tree. Path segments are object keys or
/// array indices; the value is parsed as JSON and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` must look like path=value")))?;
    let path = resolve_alias(path.trim());
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| Error::Config(format!("`{path}`: `{part}` is not an array index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("`{path}`: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("`{path}`: `{part}` is inside a scalar"))),
        };
    }
    Err(Error::Config("empty override path".into()))
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.into_inner().to_string())
            } else {
                Error::Config(format!("{path}: {}", e.into_inner()))
            }
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    /// Reads a config file, applies `--set` overrides and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: invalid JSON: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg = Self::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(&self.env)
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.environment()?;
        let (n, m) = (env.model().state_dim(), env.model().control_dim());
        self.costs.validate(n, m)?;
        self.penalty.validate(n)?;
        self.penalty_schedule.validate()?;
        if self.penalty.k != self.penalty_schedule.k {
            return Err(Error::Config(format!(
                "penalty.k ({}) and penalty_schedule.k ({}) must agree",
                self.penalty.k, self.penalty_schedule.k
            )));
        }
        self.net.validate(n)?;
        self.train.validate(n)?;
        if let Some(e) = &self.ensemble {
            e.validate(n)?;
            if env.jump().is_none() {
                return Err(Error::Config("ensemble: only environments with a jump map can walk".into()));
            }
        }
        Ok(())
    }

    /// `FBSDE_OUTPUT_DIR` when set, `output_dir` otherwise.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }

    pub fn task<'a>(&'a self, env: &'a Environment) -> Task<'a> {
        Task { model: env.model(), jump: env.jump(), costs: &self.costs, penalty: &self.penalty, constrained: self.constrained }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cartpole" => Ok(cartpole()),
            "biped" => Ok(biped()),
            "lq_toy" => Ok(lq_toy()),
            other => Err(Error::Usage(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")))),
        }
    }
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig { learning_rate: lr, ..AdamConfig::default() }
}

fn cartpole() -> ExperimentConfig {
    let q = Weight::Diag(vec![0.5, 1.0, 0.1, 0.1]);
    ExperimentConfig {
        env: EnvConfig::Cartpole(CartPoleParams::default()),
        costs: CostSpec {
            q: q.clone(),
            q_terminal: q,
            target: vec![0.0, PI, 0.0, 0.0],
            control: ControlCost::Saturating { r: vec![0.1], u_max: vec![10.0] },
            terminal_penalty: false,
        },
        penalty: PenaltySpec {
            kind: PenaltyKind::Logistic,
            k: 1.5,
            max_penalty: Some(15.0),
            constraints: vec![Constraint::component(0, Some(-1.5), Some(1.5)), Constraint::component(2, Some(-2.5), Some(2.5))],
        },
        constrained: true,
        penalty_schedule: ScheduleConfig::default(),
        net: NetConfig {
            lstm: vec![16, 16],
            v0: V0Mode::Scalar,
            v0_layers: vec![8, 16, 8, 1],
            h0: H0Mode::Trainable,
            h0_width: 8,
            input_center: vec![0.0; 4],
            input_scale: vec![1.5, PI, 2.5, 5.0],
            v0_init: 0.0,
        },
        train: TrainConfig {
            iterations: 4000,
            horizon_steps: 275,
            dt: 1.0 / 110.0,
            batch_size: 128,
            optimizer: adam(1e-3),
            mode: TrainMode::Continuous,
            lambda: 1.0,
            reduction: Reduction::Sum,
            grad_mode: GradMode::Full,
            seed: 0,
            initial_state: vec![0.0; 4],
            initial_half_width: None,
            checkpoint_every: 500,
            max_drop_fraction: 0.5,
            fixed_k: None,
            eval_trials: 256,
        },
        ensemble: None,
        output_dir: PathBuf::from("runs/cartpole"),
    }
}

/// Slope of the ReLU knee penalty.
const KNEE_PENALTY_WEIGHT: f64 = 100.0;

fn biped() -> ExperimentConfig {
    let ens = EnsembleConfig::default();
    ExperimentConfig {
        env: EnvConfig::Biped(BipedParams::default()),
        costs: CostSpec {
            q: Weight::Diag(vec![10.0; 10]),
            q_terminal: Weight::Diag(vec![100.0; 10]),
            target: NOMINAL_STATE.to_vec(),
            control: ControlCost::Quadratic { r: vec![2.0, 0.2, 0.2, 2.0] },
            terminal_penalty: true,
        },
        penalty: PenaltySpec {
            kind: PenaltyKind::Relu,
            k: KNEE_PENALTY_WEIGHT,
            max_penalty: None,
            constraints: vec![Constraint { terms: vec![(3, 1.0), (4, -1.0)], min: Some(0.0), max: None }],
        },
        constrained: true,
        penalty_schedule: ScheduleConfig { enabled: false, k: KNEE_PENALTY_WEIGHT, ..ScheduleConfig::default() },
        net: NetConfig {
            lstm: vec![32, 32],
            v0: V0Mode::Network,
            v0_layers: vec![8, 16, 8, 1],
            h0: H0Mode::Network,
            h0_width: 8,
            input_center: NOMINAL_STATE.to_vec(),
            input_scale: [vec![0.5; 5], vec![2.0; 5]].concat(),
            v0_init: 0.0,
        },
        train: TrainConfig {
            iterations: 6000,
            horizon_steps: 35,
            dt: 0.01,
            batch_size: 64,
            optimizer: adam(1e-3),
            mode: TrainMode::Hybrid,
            lambda: 1.0,
            reduction: Reduction::Sum,
            grad_mode: GradMode::Full,
            seed: 0,
            initial_state: NOMINAL_STATE.to_vec(),
            initial_half_width: Some(ens.half_width(10)),
            checkpoint_every: 500,
            max_drop_fraction: 0.5,
            fixed_k: None,
            eval_trials: 256,
        },
        ensemble: Some(ens),
        output_dir: PathBuf::from("runs/biped"),
    }
}

fn lq_toy() -> ExperimentConfig {
    ExperimentConfig {
        env: EnvConfig::LqToy(LqToyParams { noise_scale: 0.1 }),
        costs: CostSpec {
            q: Weight::Diag(vec![1.0, 0.1]),
            q_terminal: Weight::Diag(vec![1.0, 1.0]),
            target: vec![0.0, 0.0],
            control: ControlCost::Quadratic { r: vec![1.0] },
            terminal_penalty: false,
        },
        penalty: PenaltySpec {
            kind: PenaltyKind::Logistic,
            k: 1.5,
            max_penalty: Some(1.0),
            constraints: vec![Constraint::component(0, Some(-10.0), Some(10.0))],
        },
        constrained: false,
        penalty_schedule: ScheduleConfig { enabled: false, ..ScheduleConfig::default() },
        net: NetConfig {
            lstm: vec![16],
            v0: V0Mode::Scalar,
            v0_layers: vec![8, 1],
            h0: H0Mode::Trainable,
            h0_width: 8,
            input_center: vec![0.0; 2],
            input_scale: vec![1.0; 2],
            v0_init: 0.0,
        },
        train: TrainConfig {
            iterations: 2000,
            horizon_steps: 50,
            dt: 0.02,
            batch_size: 32,
            optimizer: adam(1e-2),
            mode: TrainMode::Continuous,
            lambda: 1.0,
            reduction: Reduction::Mean,
            grad_mode: GradMode::Full,
            seed: 0,
            initial_state: vec![1.0, 0.0],
            initial_half_width: None,
            checkpoint_every: 0,
            max_drop_fraction: 0.5,
            fixed_k: None,
            eval_trials: 256,
        },
        ensemble: None,
        output_dir: PathBuf::from("runs/lq_toy"),
    }
}
