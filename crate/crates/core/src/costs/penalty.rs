//! Soft state-constraint penalties on linear constraint maps
//! `c_i(x) = Σ_j w_ij x_j` with bounds `b_min ≤ c_i ≤ b_max`.
//!
//! Logistic rows with both bounds use
//!
//! ```text
//! p_i = Lσ(k(c−b_max)) − Lσ(k(c−b_min)) + L − 2Lσ(k(μ−b_max)),  μ = (b_min+b_max)/2
//! ```
//!
//! An upper-only row reduces to `Lσ(k(c−b_max))` and a lower-only row to
//! `Lσ(k(b_min−c))`. ReLU rows use `k(ReLU(b_min−c) + ReLU(c−b_max))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::logistic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    /// Sparse `(state index, coefficient)` pairs.
    pub terms: Vec<(usize, f64)>,
    /// `None` means unbounded below.
    pub min: Option<f64>,
    /// `None` means unbounded above.
    pub max: Option<f64>,
}

impl Constraint {
    /// Bounds on a single state component.
    pub fn component(index: usize, min: Option<f64>, max: Option<f64>) -> Self {
        Self { terms: vec![(index, 1.0)], min, max }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, w)| w * x[i]).sum()
    }

    /// Distance outside the bounds (0 when feasible).
    pub fn excursion(&self, x: &[f64]) -> f64 {
        let c = self.eval(x);
        let below = self.min.map_or(0.0, |b| (b - c).max(0.0));
        let above = self.max.map_or(0.0, |b| (c - b).max(0.0));
        below + above
    }

    pub fn satisfied(&self, x: &[f64]) -> bool {
        let c = self.eval(x);
        self.min.is_none_or(|b| c >= b) && self.max.is_none_or(|b| c <= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Bounded valley of height `max_penalty` (L).
    Logistic,
    /// Unbounded hinge with slope `k`.
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// Steepness `k`; the slope for ReLU rows.
    pub k: f64,
    /// `L`, required for logistic rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_penalty: Option<f64>,
    pub constraints: Vec<Constraint>,
}

impl PenaltySpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("penalty k must be positive, got {}", self.k)));
        }
        if self.kind == PenaltyKind::Logistic {
            match self.max_penalty {
                Some(l) if l > 0.0 && l.is_finite() => {}
                Some(l) => return Err(Error::Config(format!("penalty max_penalty must be positive, got {l}"))),
                None => return Err(Error::Config("logistic penalty needs `max_penalty`".into())),
            }
        }
        for (r, c) in self.constraints.iter().enumerate() {
            if c.terms.is_empty() {
                return Err(Error::Config(format!("constraint {r} has no terms")));
            }
            if let Some(&(i, _)) = c.terms.iter().find(|(i, _)| *i >= n) {
                return Err(Error::Config(format!("constraint {r} refers to state index {i} (dimension {n})")));
            }
            if c.min.is_none() && c.max.is_none() {
                return Err(Error::Config(format!("constraint {r} needs at least one bound")));
            }
            if let (Some(lo), Some(hi)) = (c.min, c.max) {
                if !(lo < hi) {
                    return Err(Error::Config(format!("constraint {r} needs min < max, got [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }

    /// Per-row penalty and its derivative with respect to `c_i`.
    pub fn row(&self, c: &Constraint, ci: f64) -> (f64, f64) {
        let k = self.k;
        match self.kind {
            PenaltyKind::Logistic => {
                let l = self.max_penalty.unwrap_or(0.0);
                let term = |z: f64| {
                    let s = logistic(z);
                    (s, s * (1.0 - s))
                };
                match (c.min, c.max) {
                    (Some(lo), Some(hi)) => {
                        // L[σ(kd − a) − σ(kd + a) + 1 − 2σ(−a)] with d = c − μ,
                        // a = k(hi − lo)/2, written with tanh(z/2) = 2σ(z) − 1.
                        let half = 0.5 * k * (hi - lo);
                        let kd = k * (ci - 0.5 * (lo + hi));
                        let tp = (0.5 * (kd + half)).tanh();
                        let tm = (0.5 * (kd - half)).tanh();
                        let v = (l * ((0.5 * half).tanh() - 0.5 * (tp - tm))).max(0.0);
                        (v, 0.25 * l * k * (tp * tp - tm * tm))
                    }
                    (None, Some(hi)) => {
                        let (s, d) = term(k * (ci - hi));
                        (l * s, l * k * d)
                    }
                    (Some(lo), None) => {
                        let (s, d) = term(k * (lo - ci));
                        (l * s, -l * k * d)
                    }
                    (None, None) => (0.0, 0.0),
                }
            }
            PenaltyKind::Relu => {
                let mut v = 0.0;
                let mut d = 0.0;
                if let Some(lo) = c.min {
                    if ci < lo {
                        v += k * (lo - ci);
                        d -= k;
                    }
                }
                if let Some(hi) = c.max {
                    if ci > hi {
                        v += k * (ci - hi);
                        d += k;
                    }
                }
                (v, d)
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.constraints.iter().map(|c| self.row(c, c.eval(x)).0).sum()
    }

    pub fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; x.len()];
        let mut total = 0.0;
        for c in &self.constraints {
            let (v, d) = self.row(c, c.eval(x));
            total += v;
            for &(i, w) in &c.terms {
                grad[i] += d * w;
            }
        }
        (total, grad)
    }

    pub fn satisfied(&self, x: &[f64]) -> bool {
        self.constraints.iter().all(|c| c.satisfied(x))
    }

    /// Indices of violated rows.
    pub fn violations(&self, x: &[f64]) -> Vec<usize> {
        self.constraints.iter().enumerate().filter(|(_, c)| !c.satisfied(x)).map(|(i, _)| i).collect()
    }

    pub fn with_k(&self, k: f64) -> Self {
        Self { k, ..self.clone() }
    }
}
