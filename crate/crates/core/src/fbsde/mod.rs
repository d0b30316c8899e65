//! Joint forward/backward SDE rollouts, the saturated control law and the
//! training losses.
//!
//! Per step `k` the rollout records on the tape
//!
//! ```text
//! V_x     = vx_net(x_k, t_k/T, H_k)
//! z       = −R⁻¹ G(x_k)ᵀ V_x,   u = U ⊙ tanh(z/2)
//! y_{k+1} = y_k − (q̄(x_k) + r(u))Δt + V_xᵀ Σ(x_k) Δw_k
//! x_{k+1} = x_k + (F(x_k) + G(x_k)u)Δt + Σ(x_k) Δw_k
//! ```
//!
//! `F`, `G`, the costs and the jump map enter as mapped nodes carrying exact
//! Jacobians, so gradients reach the parameters through the whole trajectory.

pub mod net;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{ControlCost, CostSpec, PenaltySpec};
use crate::dynamics::{JumpMap, SdeModel};
use crate::error::{Error, Result};
use crate::nn::{LstmState, Tape, Var};

pub use net::{H0Mode, NetConfig, V0Mode, ValueNet};

/// Everything a rollout needs apart from the network and the noise.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a dyn SdeModel,
    pub costs: &'a CostSpec,
    pub penalty: Option<&'a PenaltySpec>,
    /// Applied to `x_N` before the terminal cost.
    pub jump: Option<&'a dyn JumpMap>,
    pub dt: f64,
    pub steps: usize,
}

impl Problem<'_> {
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn noise_len(&self) -> usize {
        self.steps * self.model.noise_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.model.state_dim(), self.model.control_dim());
        if self.model.noise_dim() != m {
            return Err(Error::Config("noise and control dimensions must agree".into()));
        }
        if self.steps == 0 || !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("rollouts need at least one step and a positive dt".into()));
        }
        self.costs.validate(n, m)?;
        if let Some(p) = self.penalty {
            p.validate(n)?;
        }
        Ok(())
    }
}

/// Whether gradients flow through the state trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Full,
    /// Every `x_{k+1}` enters the graph as a constant.
    StopDynamics,
}

/// Batch reduction of the terminal loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub fn factor(self, count: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count.max(1) as f64,
        }
    }
}

/// Stored values of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub state_dim: usize,
    pub control_dim: usize,
    /// `(N+1)·n`, row per step.
    pub x: Vec<f64>,
    /// `N+1` value estimates.
    pub y: Vec<f64>,
    /// `N·m`.
    pub u: Vec<f64>,
    /// `N·ν`.
    pub dw: Vec<f64>,
    /// `q̄(x_k) + r(u_k)`, penalty included.
    pub run_cost: Vec<f64>,
    /// Penalty part of `run_cost`.
    pub penalty: Vec<f64>,
    /// `V_xᵀ Σ Δw_k`.
    pub vx_sigma_dw: Vec<f64>,
    /// `x_N`, or the post-jump state when a jump map is set.
    pub terminal_state: Vec<f64>,
    pub terminal_cost: f64,
    /// Final recurrent state per layer.
    pub hidden: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.run_cost.len()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.x[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        &self.u[k * self.control_dim..(k + 1) * self.control_dim]
    }

    /// `q_N − y_N`.
    pub fn terminal_residual(&self) -> f64 {
        self.terminal_cost - self.y[self.steps()]
    }

    /// Cost-to-go targets `Ṽ(x_k)` for `k = 0..=N`, accumulated backwards.
    pub fn value_targets(&self, dt: f64) -> Vec<f64> {
        let n = self.steps();
        let mut v = vec![0.0; n + 1];
        v[n] = self.terminal_cost;
        for k in (0..n).rev() {
            v[k] = v[k + 1] + (self.run_cost[k] * dt - self.vx_sigma_dw[k]);
        }
        v
    }

    pub fn value_target(&self, k: usize, dt: f64) -> f64 {
        self.value_targets(dt)[k]
    }

    /// Measured episode cost `Ṽ(x₀)`.
    pub fn episode_cost(&self, dt: f64) -> f64 {
        self.value_targets(dt)[0]
    }
}

/// `u* = U ⊙ sig(−R⁻¹G(x)ᵀV_x)`, kept strictly inside the saturation box.
pub fn optimal_control(vx: &[f64], x: &[f64], costs: &CostSpec, model: &dyn SdeModel) -> Vec<f64> {
    let z = control_logits(vx, x, costs.control.weights(), model);
    let mut u = costs.control.control_from_logits(&z);
    if let ControlCost::Saturating { u_max, .. } = &costs.control {
        for (ui, m) in u.iter_mut().zip(u_max) {
            let b = m.next_down();
            *ui = ui.clamp(-b, b);
        }
    }
    u
}

/// `z = −R⁻¹G(x)ᵀV_x`.
pub fn control_logits(vx: &[f64], x: &[f64], r: &[f64], model: &dyn SdeModel) -> Vec<f64> {
    let (n, m) = (model.state_dim(), model.control_dim());
    let g = model.control_matrix(x);
    (0..m).map(|j| -(0..n).map(|i| g[i * m + j] * vx[i]).sum::<f64>() / r[j]).collect()
}

/// First-order condition `G(x)ᵀV_x + ∇r(u)`, zero at the optimal control.
pub fn stationarity_residual(vx: &[f64], x: &[f64], u: &[f64], costs: &CostSpec, model: &dyn SdeModel) -> Result<Vec<f64>> {
    let (n, m) = (model.state_dim(), model.control_dim());
    let g = model.control_matrix(x);
    let (_, dr) = costs.control.cost(u)?;
    Ok((0..m).map(|j| (0..n).map(|i| g[i * m + j] * vx[i]).sum::<f64>() + dr[j]).collect())
}

struct Recorded {
    traj: Trajectory,
    y_n: Var,
    x_n: Var,
}

fn check_finite(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::RolloutDivergence { step })
    }
}

fn record(net: &ValueNet, p: &Problem, x0: &[f64], noise: &[f64], mode: GradMode, tape: &mut Tape) -> Result<Recorded> {
    let (n, m) = (p.model.state_dim(), p.model.control_dim());
    let steps = p.steps;
    if x0.len() != n || noise.len() != steps * m {
        return Err(Error::Usage(format!(
            "rollout expects x0 of length {n} and noise of length {}, got {} and {}",
            steps * m,
            x0.len(),
            noise.len()
        )));
    }
    tape.clear();
    tape.load_params(&net.store);
    let sigma = p.model.noise_scale();
    let neg_inv_r: Vec<f64> = p.costs.control.weights().iter().map(|c| -1.0 / c).collect();
    let saturation = match &p.costs.control {
        ControlCost::Saturating { u_max, .. } => Some(u_max.clone()),
        ControlCost::Quadratic { .. } => None,
    };

    let mut x = tape.constant(x0);
    let mut y = net.v0(tape, x, 0.0)?;
    let mut state: LstmState = net.initial_state(tape, x)?;

    let mut traj = Trajectory {
        state_dim: n,
        control_dim: m,
        x: Vec::with_capacity((steps + 1) * n),
        y: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps * m),
        dw: noise.to_vec(),
        run_cost: Vec::with_capacity(steps),
        penalty: Vec::with_capacity(steps),
        vx_sigma_dw: Vec::with_capacity(steps),
        terminal_state: Vec::new(),
        terminal_cost: 0.0,
        hidden: Vec::new(),
    };
    traj.x.extend_from_slice(x0);
    traj.y.push(tape.scalar_value(y));
    check_finite(&traj.y, 0)?;

    for k in 0..steps {
        let xk = tape.value(x).to_vec();
        let (vx, next_state) = net.vx(tape, x, k as f64 / steps as f64, &state)?;
        state = next_state;

        let (f, g) = match mode {
            GradMode::Full => {
                let lin = p.model.linearize(&xk);
                (tape.mapped(x, &lin.drift, &lin.drift_jac)?, tape.mapped(x, &lin.control, &lin.control_jac)?)
            }
            GradMode::StopDynamics => (tape.constant(&p.model.drift(&xk)), tape.constant(&p.model.control_matrix(&xk))),
        };

        let gtv = tape.matvec_t(g, vx, n, m)?;
        let nir = tape.constant(&neg_inv_r);
        let z = tape.mul(gtv, nir)?;
        let u = match &saturation {
            Some(u_max) => {
                let half = tape.scale(z, 0.5);
                let s = tape.tanh(half);
                let um = tape.constant(u_max);
                tape.mul(s, um)?
            }
            None => z,
        };

        let (qv, qg) = p.costs.state_cost(&xk, p.penalty);
        let q = tape.mapped(x, &[qv], &qg)?;
        let zv = tape.value(z).to_vec();
        let (rv, rg) = p.costs.control.cost_of_logits(&zv);
        let r = tape.mapped(z, &[rv], &rg)?;
        let run = tape.add(q, r)?;

        let dw = tape.constant(&noise[k * m..(k + 1) * m]);
        let gdw = tape.matvec(g, dw, n, m)?;
        let sdw = tape.scale(gdw, sigma);
        let corr = tape.dot(vx, sdw)?;

        let run_dt = tape.scale(run, p.dt);
        let y_drift = tape.sub(y, run_dt)?;
        y = tape.add(y_drift, corr)?;

        let gu = tape.matvec(g, u, n, m)?;
        let vel = tape.add(f, gu)?;
        let step = tape.scale(vel, p.dt);
        let moved = tape.add(x, step)?;
        let x_next = tape.add(moved, sdw)?;

        check_finite(tape.value(x_next), k + 1)?;
        check_finite(tape.value(y), k + 1)?;
        traj.u.extend_from_slice(tape.value(u));
        traj.run_cost.push(tape.scalar_value(run));
        traj.penalty.push(p.penalty.map_or(0.0, |pen| pen.value(&xk)));
        traj.vx_sigma_dw.push(tape.scalar_value(corr));
        traj.y.push(tape.scalar_value(y));
        traj.x.extend_from_slice(tape.value(x_next));

        x = match mode {
            GradMode::Full => x_next,
            GradMode::StopDynamics => {
                let v = tape.value(x_next).to_vec();
                tape.constant(&v)
            }
        };
    }
    traj.hidden = state.layers.iter().map(|(h, c)| (tape.value(*h).to_vec(), tape.value(*c).to_vec())).collect();
    Ok(Recorded { traj, y_n: y, x_n: x })
}

/// Records the terminal cost node and fills the terminal fields.
fn terminal_node(p: &Problem, rec: &mut Recorded, mode: GradMode, tape: &mut Tape) -> Result<Var> {
    let xn = tape.value(rec.x_n).to_vec();
    let (x_plus, x_plus_node) = match p.jump {
        Some(jump) => {
            let (xp, jac) = jump.linearize(&xn)?;
            let node = match mode {
                GradMode::Full => tape.mapped(rec.x_n, &xp, &jac)?,
                GradMode::StopDynamics => tape.constant(&xp),
            };
            (xp, node)
        }
        None => (xn, rec.x_n),
    };
    let (qv, qg) = p.costs.terminal_cost(&x_plus, p.penalty);
    check_finite(&[qv], p.steps)?;
    rec.traj.terminal_state = x_plus;
    rec.traj.terminal_cost = qv;
    Ok(tape.mapped(x_plus_node, &[qv], &qg)?)
}

/// Forward rollout without gradients.
pub fn rollout(net: &ValueNet, p: &Problem, x0: &[f64], noise: &[f64], tape: &mut Tape) -> Result<Trajectory> {
    let mut rec = record(net, p, x0, noise, GradMode::StopDynamics, tape)?;
    terminal_node(p, &mut rec, GradMode::StopDynamics, tape)?;
    Ok(rec.traj)
}

/// Rollouts of a batch on parallel tapes; results keep the input order.
pub fn rollout_batch(net: &ValueNet, p: &Problem, x0: &[Vec<f64>], noise: &[Vec<f64>]) -> Vec<Result<Trajectory>> {
    x0.par_iter()
        .zip(noise.par_iter())
        .map_init(Tape::new, |tape, (x, w)| rollout(net, p, x, w, tape))
        .collect()
}

/// Which loss to differentiate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub grad_mode: GradMode,
    /// Weight of the value-function term; `None` trains on the terminal loss only.
    pub value_weight: Option<f64>,
}

/// One batch element's loss, gradient and trajectory.
#[derive(Clone, Debug)]
pub struct ElementOutcome {
    pub trajectory: Trajectory,
    /// `(q_N − y_N)²`.
    pub fbsde_loss: f64,
    /// `Σ_i (V₀(x_i, t_i) − Ṽ_i)²`, zero without a value weight.
    pub value_loss: f64,
    pub loss: f64,
    /// Gradient of `loss`, laid out like the parameter store.
    pub grad: Vec<f64>,
}

/// Builds the per-element loss on the tape and runs the reverse sweep.
pub fn loss_and_grad(
    net: &ValueNet,
    p: &Problem,
    x0: &[f64],
    noise: &[f64],
    opts: &LossOptions,
    tape: &mut Tape,
) -> Result<ElementOutcome> {
    let mut rec = record(net, p, x0, noise, opts.grad_mode, tape)?;
    let q_n = terminal_node(p, &mut rec, opts.grad_mode, tape)?;
    let resid = tape.sub(q_n, rec.y_n)?;
    let fb = tape.square(resid);
    let fbsde_loss = tape.scalar_value(fb);
    let mut root = fb;
    let mut value_loss = 0.0;
    if let Some(lambda) = opts.value_weight {
        let lv = value_term(net, &rec.traj, p.dt, tape)?;
        value_loss = tape.scalar_value(lv);
        let weighted = tape.scale(lv, lambda);
        root = tape.add(fb, weighted)?;
    }
    let loss = tape.scalar_value(root);
    check_finite(&[loss], p.steps)?;
    tape.backward(root)?;
    let mut grad = vec![0.0; net.num_params()];
    tape.accumulate_param_grads(&net.store, &mut grad);
    Ok(ElementOutcome { trajectory: rec.traj, fbsde_loss, value_loss, loss, grad })
}

/// Records `Σ_i (V₀(x_i, t_i) − Ṽ_i)²` with states and targets as constants.
fn value_term(net: &ValueNet, traj: &Trajectory, dt: f64, tape: &mut Tape) -> Result<Var> {
    let steps = traj.steps();
    let mut acc: Option<Var> = None;
    for (i, target) in traj.value_targets(dt).iter().enumerate() {
        let xi = tape.constant(traj.state(i));
        let v = net.v0(tape, xi, i as f64 / steps as f64)?;
        let t = tape.scalar(*target);
        let d = tape.sub(v, t)?;
        let sq = tape.square(d);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc.expect("a trajectory has at least one state"))
}

/// Value-function loss of a fixed trajectory and its parameter gradient.
pub fn value_loss_and_grad(net: &ValueNet, traj: &Trajectory, dt: f64) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    tape.load_params(&net.store);
    let lv = value_term(net, traj, dt, &mut tape)?;
    let value = tape.scalar_value(lv);
    tape.backward(lv)?;
    let mut grad = vec![0.0; net.num_params()];
    tape.accumulate_param_grads(&net.store, &mut grad);
    Ok((value, grad))
}

/// [`loss_and_grad`] over a batch on parallel tapes, in input order.
pub fn batch_loss_and_grad(
    net: &ValueNet,
    p: &Problem,
    x0: &[Vec<f64>],
    noise: &[Vec<f64>],
    opts: &LossOptions,
) -> Vec<Result<ElementOutcome>> {
    x0.par_iter()
        .zip(noise.par_iter())
        .map_init(Tape::new, |tape, (x, w)| loss_and_grad(net, p, x, w, opts, tape))
        .collect()
}

/// `Σ_j (q_N(x_Nʲ) − y_Nʲ)²`, optionally averaged.
pub fn fbsde_loss(batch: &[Trajectory], reduction: Reduction) -> f64 {
    reduction.factor(batch.len()) * batch.iter().map(|t| t.terminal_residual().powi(2)).sum::<f64>()
}

/// Terminal loss plus `λ Σ_j Σ_i (V₀(x_iʲ, t_i) − Ṽ_iʲ)²`.
pub fn hybrid_loss(batch: &[Trajectory], net: &ValueNet, dt: f64, lambda: f64, reduction: Reduction) -> Result<f64> {
    let mut lv = 0.0;
    for t in batch {
        let steps = t.steps();
        for (i, target) in t.value_targets(dt).iter().enumerate() {
            lv += (net.v0_value(t.state(i), i as f64 / steps as f64)? - target).powi(2);
        }
    }
    Ok(fbsde_loss(batch, reduction) + reduction.factor(batch.len()) * lambda * lv)
}

/// Stateful single-step inference: network forward pass plus the control law.
pub struct Controller<'a> {
    net: &'a ValueNet,
    model: &'a dyn SdeModel,
    costs: &'a CostSpec,
    steps: usize,
    tape: Tape,
    hidden: Vec<(Vec<f64>, Vec<f64>)>,
    k: usize,
}

impl<'a> Controller<'a> {
    pub fn new(net: &'a ValueNet, model: &'a dyn SdeModel, costs: &'a CostSpec, steps: usize) -> Self {
        Self { net, model, costs, steps: steps.max(1), tape: Tape::new(), hidden: Vec::new(), k: 0 }
    }

    /// Initialises the recurrent state from `x0`.
    pub fn reset(&mut self, x0: &[f64]) -> Result<()> {
        self.tape.clear();
        self.tape.load_params(&self.net.store);
        let x = self.tape.constant(x0);
        let s = self.net.initial_state(&mut self.tape, x)?;
        self.hidden = s.layers.iter().map(|(h, c)| (self.tape.value(*h).to_vec(), self.tape.value(*c).to_vec())).collect();
        self.k = 0;
        Ok(())
    }

    /// `V_x` at the current step, advancing the recurrent state.
    pub fn value_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let tape = &mut self.tape;
        tape.clear();
        tape.load_params(&self.net.store);
        let layers = self.hidden.iter().map(|(h, c)| (tape.constant(h), tape.constant(c))).collect();
        let xv = tape.constant(x);
        let (vx, next) = self.net.vx(tape, xv, self.k as f64 / self.steps as f64, &LstmState { layers })?;
        self.hidden = next.layers.iter().map(|(h, c)| (tape.value(*h).to_vec(), tape.value(*c).to_vec())).collect();
        self.k += 1;
        Ok(tape.value(vx).to_vec())
    }

    pub fn act(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let vx = self.value_gradient(x)?;
        Ok(optimal_control(&vx, x, self.costs, self.model))
    }
}
