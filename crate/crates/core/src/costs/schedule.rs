//! Adaptive penalty-steepness schedule.
//!
//! Every `eta` iterations the standard deviation of the last `eta` episode
//! costs is compared with `beta`. When it is below `beta`, or the iteration
//! is a multiple of `eta_max`, the schedule applies
//! `k += δ, δ += Δ_δ, β *= γ, γ += Δ` and then clamps `δ ≥ 0`, `γ ≤ 1`.
//! Updates only happen while the sampled trajectories violate constraints.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What happens at a check iteration whose trajectories satisfy the constraints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Stop growing `k` for the rest of training.
    Freeze,
    /// Skip this check but keep the schedule live.
    Continue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub enabled: bool,
    /// Initial steepness.
    pub k: f64,
    pub delta: f64,
    /// Increment applied to `delta` after each update.
    pub delta_accel: f64,
    /// Convergence threshold; `None` sets it from the first window.
    pub beta: Option<f64>,
    /// Multiplier on the first window's standard deviation when `beta` is `None`.
    pub beta_scale: f64,
    pub gamma: f64,
    /// Increment applied to `gamma` after each update.
    pub gamma_accel: f64,
    pub eta: usize,
    pub eta_max: usize,
    pub policy: SchedulePolicy,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 1.5,
            delta: 0.5,
            delta_accel: -0.25,
            beta: None,
            beta_scale: 1.0,
            gamma: 0.9,
            gamma_accel: 0.02,
            eta: 500,
            eta_max: 2000,
            policy: SchedulePolicy::Freeze,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("penalty_schedule.k must be positive, got {}", self.k)));
        }
        if self.eta == 0 || self.eta_max == 0 {
            return Err(Error::Config("penalty_schedule.eta and eta_max must be at least 1".into()));
        }
        if !(self.delta >= 0.0) || !self.delta_accel.is_finite() || !self.gamma_accel.is_finite() {
            return Err(Error::Config("penalty_schedule.delta must be non-negative and accelerations finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("penalty_schedule.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0) {
                return Err(Error::Config(format!("penalty_schedule.beta must be non-negative, got {b}")));
            }
        }
        if !(self.beta_scale > 0.0) {
            return Err(Error::Config("penalty_schedule.beta_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Record emitted whenever `k` changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KChange {
    pub iteration: usize,
    pub k_old: f64,
    pub k: f64,
    pub delta: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Standard deviation of the window that triggered the update.
    pub cost_sd: f64,
    /// `true` when the update was forced by `eta_max`.
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub k: f64,
    pub delta: f64,
    pub beta: Option<f64>,
    pub gamma: f64,
    pub window: VecDeque<f64>,
    pub iteration: usize,
    pub frozen: bool,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig) -> Self {
        Self {
            k: config.k,
            delta: config.delta,
            beta: config.beta,
            gamma: config.gamma,
            window: VecDeque::with_capacity(config.eta),
            iteration: 0,
            frozen: false,
            config,
        }
    }

    /// Standard deviation (population) of the current window.
    pub fn window_sd(&self) -> f64 {
        let n = self.window.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = self.window.iter().sum::<f64>() / n;
        (self.window.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Advances one training iteration.
    pub fn update(&mut self, episode_cost: f64, constraints_satisfied: bool) -> Option<KChange> {
        self.iteration += 1;
        if self.window.len() == self.config.eta {
            self.window.pop_front();
        }
        self.window.push_back(episode_cost);
        if !self.config.enabled || self.frozen || self.iteration % self.config.eta != 0 {
            return None;
        }
        if constraints_satisfied {
            if self.config.policy == SchedulePolicy::Freeze {
                self.frozen = true;
            }
            return None;
        }
        let sd = self.window_sd();
        let beta = *self.beta.get_or_insert(sd * self.config.beta_scale);
        let forced = self.iteration % self.config.eta_max == 0;
        let converged = sd < beta;
        let mut event = None;
        if converged || forced {
            let k_old = self.k;
            self.k += self.delta;
            self.delta += self.config.delta_accel;
            self.beta = Some(self.gamma * beta);
            self.gamma += self.config.gamma_accel;
            event = Some((k_old, forced && !converged));
        }
        self.delta = self.delta.max(0.0);
        self.gamma = self.gamma.min(1.0);
        event.filter(|(k_old, _)| *k_old != self.k).map(|(k_old, forced)| KChange {
            iteration: self.iteration,
            k_old,
            k: self.k,
            delta: self.delta,
            beta: self.beta.unwrap_or(beta),
            gamma: self.gamma,
            cost_sd: sd,
            forced,
        })
    }
}
