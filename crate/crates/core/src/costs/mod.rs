//! State, terminal and control costs.
//!
//! Every cost exposes its value together with its gradient so the rollout
//! can splice it into the tape as a single mapped node.

pub mod penalty;
pub mod schedule;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use penalty::{Constraint, PenaltyKind, PenaltySpec};
pub use schedule::{KChange, SchedulePolicy, ScheduleConfig, ScheduleState};

use crate::error::{Error, Result};

/// Weight matrix given either as its diagonal or in full (row lists).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn dim(&self) -> usize {
        match self {
            Weight::Diag(d) => d.len(),
            Weight::Full(rows) => rows.len(),
        }
    }

    pub fn scaled(&self, s: f64) -> Weight {
        match self {
            Weight::Diag(d) => Weight::Diag(d.iter().map(|v| v * s).collect()),
            Weight::Full(rows) => Weight::Full(rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()),
        }
    }

    /// `W d`.
    pub fn apply(&self, d: &[f64]) -> Vec<f64> {
        match self {
            Weight::Diag(w) => w.iter().zip(d).map(|(a, b)| a * b).collect(),
            Weight::Full(rows) => rows.iter().map(|r| r.iter().zip(d).map(|(a, b)| a * b).sum()).collect(),
        }
    }

    fn validate(&self, name: &str, n: usize) -> Result<()> {
        if self.dim() != n {
            return Err(Error::Config(format!("{name} must be {n} x {n}, got dimension {}", self.dim())));
        }
        match self {
            Weight::Diag(d) => {
                if let Some(v) = d.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                    return Err(Error::Config(format!("{name} diagonal entries must be finite and non-negative, got {v}")));
                }
            }
            Weight::Full(rows) => {
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!("{name} rows must all have length {n}")));
                }
                let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("{name} has non-finite entries")));
                }
                if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                    return Err(Error::Config(format!("{name} must be symmetric")));
                }
                let min_eig = m.symmetric_eigenvalues().min();
                if min_eig < -1e-10 * (1.0 + m.amax()) {
                    return Err(Error::Config(format!("{name} must be positive semidefinite (eigenvalue {min_eig})")));
                }
            }
        }
        Ok(())
    }
}

/// Per-channel control cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlCost {
    /// `r(u) = Σ c_i ∫₀^{u_i} sig⁻¹(v/U_i) dv` with `sig(v) = 2/(1+e^{−v}) − 1`;
    /// the optimal control saturates at `±U_i`.
    Saturating { r: Vec<f64>, u_max: Vec<f64> },
    /// `r(u) = ½ Σ c_i u_i²`; the optimal control is unbounded.
    Quadratic { r: Vec<f64> },
}

impl ControlCost {
    pub fn weights(&self) -> &[f64] {
        match self {
            ControlCost::Saturating { r, .. } | ControlCost::Quadratic { r } => r,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights().len()
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.dim() != m {
            return Err(Error::Config(format!("control weight R must have {m} entries, got {}", self.dim())));
        }
        if let Some(c) = self.weights().iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("control weights must be positive, got {c}")));
        }
        if let ControlCost::Saturating { u_max, .. } = self {
            if u_max.len() != m {
                return Err(Error::Config(format!("u_max must have {m} entries, got {}", u_max.len())));
            }
            if let Some(u) = u_max.iter().find(|u| !(**u > 0.0 && u.is_finite())) {
                return Err(Error::Config(format!("u_max entries must be positive, got {u}")));
            }
        }
        Ok(())
    }

    /// Maps the logits `z = −R⁻¹Gᵀv` to the control.
    pub fn control_from_logits(&self, z: &[f64]) -> Vec<f64> {
        match self {
            ControlCost::Saturating { u_max, .. } => z.iter().zip(u_max).map(|(z, m)| m * (0.5 * z).tanh()).collect(),
            ControlCost::Quadratic { .. } => z.to_vec(),
        }
    }

    /// `r(u)` and `dr/du`. Errors outside the open saturation box.
    pub fn cost(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            ControlCost::Saturating { r, u_max } => {
                let mut total = 0.0;
                let mut grad = Vec::with_capacity(u.len());
                for ((&c, &m), &ui) in r.iter().zip(u_max).zip(u) {
                    if !(ui.abs() < m) {
                        return Err(Error::Domain(format!("control {ui} outside the saturation box (-{m}, {m})")));
                    }
                    total += c * saturating_integral(ui, m);
                    grad.push(c * ((m + ui) / (m - ui)).ln());
                }
                Ok((total, grad))
            }
            ControlCost::Quadratic { r } => {
                let total = 0.5 * r.iter().zip(u).map(|(c, v)| c * v * v).sum::<f64>();
                Ok((total, r.iter().zip(u).map(|(c, v)| c * v).collect()))
            }
        }
    }

    /// `r(u(z))` and its gradient with respect to the logits. Finite even when
    /// `tanh` rounds to `±1`.
    pub fn cost_of_logits(&self, z: &[f64]) -> (f64, Vec<f64>) {
        match self {
            ControlCost::Saturating { r, u_max } => {
                let mut total = 0.0;
                let mut grad = Vec::with_capacity(z.len());
                for ((&c, &m), &zi) in r.iter().zip(u_max).zip(z) {
                    let s = (0.5 * zi).tanh();
                    let u = m * s;
                    total += c * saturating_integral(u, m);
                    // dr/du = c·sig⁻¹(u/m) = c·z, du/dz = m(1 − s²)/2.
                    grad.push(c * zi * 0.5 * m * (1.0 - s * s));
                }
                (total, grad)
            }
            ControlCost::Quadratic { r } => {
                let total = 0.5 * r.iter().zip(z).map(|(c, v)| c * v * v).sum::<f64>();
                (total, r.iter().zip(z).map(|(c, v)| c * v).collect())
            }
        }
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `∫₀^u sig⁻¹(v/m) dv = (m+u)ln(m+u) + (m−u)ln(m−u) − 2m ln m`.
pub fn saturating_integral(u: f64, m: f64) -> f64 {
    // Scaled by m to keep the logarithms near unity: m·[(1+s)ln(1+s) + (1−s)ln(1−s)].
    let s = u / m;
    m * (xlogx(1.0 + s) + xlogx(1.0 - s))
}

/// `sig(v) = 2/(1+e^{−v}) − 1 = tanh(v/2)`.
pub fn sig(v: f64) -> f64 {
    (0.5 * v).tanh()
}

/// `sig⁻¹(s) = ln((1+s)/(1−s))` for `|s| < 1`.
pub fn sig_inv(s: f64) -> f64 {
    2.0 * s.atanh()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub q: Weight,
    pub q_terminal: Weight,
    pub target: Vec<f64>,
    pub control: ControlCost,
    /// Whether the penalty also enters the terminal cost.
    pub terminal_penalty: bool,
}

impl CostSpec {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        self.q.validate("q", n)?;
        self.q_terminal.validate("q_terminal", n)?;
        if self.target.len() != n {
            return Err(Error::Config(format!("target must have {n} entries, got {}", self.target.len())));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("target must be finite".into()));
        }
        self.control.validate(m)
    }

    fn quadratic(&self, w: &Weight, x: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = x.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let wd = w.apply(&d);
        (0.5 * d.iter().zip(&wd).map(|(a, b)| a * b).sum::<f64>(), wd)
    }

    /// `q̄(x) = ½(x−x̄)ᵀQ(x−x̄) + p(x)` and its gradient.
    pub fn state_cost(&self, x: &[f64], pen: Option<&PenaltySpec>) -> (f64, Vec<f64>) {
        let (mut v, mut g) = self.quadratic(&self.q, x);
        if let Some(p) = pen {
            let (pv, pg) = p.value_grad(x);
            v += pv;
            g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        }
        (v, g)
    }

    /// `q_N(x)` and its gradient; includes the penalty when `terminal_penalty`.
    pub fn terminal_cost(&self, x: &[f64], pen: Option<&PenaltySpec>) -> (f64, Vec<f64>) {
        let (mut v, mut g) = self.quadratic(&self.q_terminal, x);
        if let (true, Some(p)) = (self.terminal_penalty, pen) {
            let (pv, pg) = p.value_grad(x);
            v += pv;
            g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        }
        (v, g)
    }

    pub fn control_cost(&self, u: &[f64]) -> Result<f64> {
        self.control.cost(u).map(|(v, _)| v)
    }
}
