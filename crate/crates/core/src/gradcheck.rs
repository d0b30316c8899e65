//! Central finite-difference checks of every parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costs::{Constraint, ControlCost, CostSpec, PenaltyKind, PenaltySpec, Weight};
use crate::dynamics::biped::NOMINAL_STATE;
use crate::dynamics::{Biped, BipedParams, CartPole, CartPoleParams, HeelStrike};
use crate::error::{Error, Result};
use crate::fbsde::{loss_and_grad, value_loss_and_grad, GradMode, H0Mode, LossOptions, NetConfig, Problem, V0Mode, ValueNet};
use crate::nn::{Activation, Dense, LstmStack, Mlp, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub seed: u64,
    /// Perturbs one analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, rel_tol: 1e-5, abs_floor: 1e-8, seed: 0, corrupt: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub params: usize,
    pub failures: usize,
    /// Largest `|a − n| / max(|a|, |n|)` over entries whose error exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Compares `grad` from `eval` with central differences of its loss.
pub fn check<T>(
    name: &str,
    target: &mut T,
    store: impl Fn(&mut T) -> &mut ParamStore,
    eval: impl Fn(&T) -> Result<(f64, Vec<f64>)>,
    opts: &GradcheckOptions,
) -> Result<CheckResult> {
    let (_, mut analytic) = eval(target)?;
    if opts.corrupt {
        if let Some(g) = analytic.first_mut() {
            *g += 1e-3 * (1.0 + g.abs());
        }
    }
    let count = analytic.len();
    let (mut failures, mut max_rel, mut max_abs) = (0, 0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let orig = store(target).flat()[i];
        store(target).flat_mut()[i] = orig + opts.step;
        let (lp, _) = eval(target)?;
        store(target).flat_mut()[i] = orig - opts.step;
        let (lm, _) = eval(target)?;
        store(target).flat_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * opts.step);
        let abs = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        max_abs = max_abs.max(abs);
        if abs > opts.abs_floor {
            max_rel = max_rel.max(abs / scale);
        }
        if !(abs <= (opts.rel_tol * scale).max(opts.abs_floor)) {
            failures += 1;
        }
    }
    Ok(CheckResult { name: name.to_string(), params: count, failures, max_rel_err: max_rel, max_abs_err: max_abs, passed: failures == 0 })
}

fn tape_eval(store: &ParamStore, build: impl Fn(&mut Tape) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    tape.load_params(store);
    let root = build(&mut tape)?;
    let loss = tape.scalar_value(root);
    tape.backward(root)?;
    let mut grad = vec![0.0; store.len()];
    tape.accumulate_param_grads(store, &mut grad);
    Ok((loss, grad))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dense_graph(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", 5, &[7, 6, 3], Activation::Tanh, &mut rng);
    let sig = Dense::new(&mut store, "sig", 3, 4, Activation::Sigmoid, &mut rng);
    let relu = Dense::new(&mut store, "relu", 5, 4, Activation::Relu, &mut rng);
    for v in store.flat_mut() {
        *v += 0.1 * rng.random_range(-1.0..1.0);
    }
    let x = uniform(&mut rng, 5);
    let target = uniform(&mut rng, 4);
    check(
        "dense",
        &mut store,
        |s| s,
        |s| {
            tape_eval(s, |t| {
                let xv = t.constant(&x);
                let h = mlp.forward(t, xv)?;
                let a = sig.forward(t, h)?;
                let b = relu.forward(t, xv)?;
                let tv = t.constant(&target);
                let d = t.sub(a, tv)?;
                let sq = t.square(d);
                let l1 = t.sum(sq);
                let sp = t.softplus(b);
                let ab = t.mul(a, sp)?;
                let l2 = t.sum(ab);
                let e = t.exp(h);
                let le = t.log(e);
                let l3 = t.dot(le, h)?;
                let l12 = t.add(l1, l2)?;
                Ok(t.add(l12, l3)?)
            })
        },
        opts,
    )
}

fn lstm_graph(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut store = ParamStore::new();
    let lstm = LstmStack::new(&mut store, "lstm", 3, &[4, 3], 2, &mut rng);
    let h0: Vec<Vec<f64>> = [4, 4, 3, 3].iter().map(|&n| uniform(&mut rng, n)).collect();
    let xs: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 3)).collect();
    let ys: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 2)).collect();
    check(
        "lstm",
        &mut store,
        |s| s,
        |s| {
            tape_eval(s, |t| {
                let layers = vec![(t.constant(&h0[0]), t.constant(&h0[1])), (t.constant(&h0[2]), t.constant(&h0[3]))];
                let mut state = crate::nn::LstmState { layers };
                let mut total = t.scalar(0.0);
                for (x, y) in xs.iter().zip(&ys) {
                    let xv = t.constant(x);
                    let (out, next) = lstm.step(t, xv, &state)?;
                    state = next;
                    let yv = t.constant(y);
                    let d = t.sub(out, yv)?;
                    let sq = t.square(d);
                    let s = t.sum(sq);
                    total = t.add(total, s)?;
                }
                let (h, c) = state.layers[1];
                let hc = t.dot(h, c)?;
                Ok(t.add(total, hc)?)
            })
        },
        opts,
    )
}

fn small_net(n: usize, v0: V0Mode, h0: H0Mode, seed: u64, center: &[f64]) -> Result<ValueNet> {
    let cfg = NetConfig {
        lstm: vec![4, 3],
        v0,
        v0_layers: vec![4, 3, 1],
        h0,
        h0_width: 3,
        input_center: center.to_vec(),
        input_scale: vec![1.0; n],
        v0_init: 0.3,
    };
    let mut net = ValueNet::new(cfg, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in net.store.flat_mut() {
        *v += 0.1 * rng.random_range(-1.0..1.0);
    }
    Ok(net)
}

fn cartpole_rollout(opts: &GradcheckOptions) -> Result<CheckResult> {
    let model = CartPole::new(CartPoleParams::default());
    let target = vec![0.0, std::f64::consts::PI, 0.0, 0.0];
    let costs = CostSpec {
        q: Weight::Diag(vec![0.1, 1.0, 0.1, 0.1]),
        q_terminal: Weight::Diag(vec![0.5, 2.0, 0.5, 0.5]),
        target: target.clone(),
        control: ControlCost::Saturating { r: vec![0.5], u_max: vec![10.0] },
        terminal_penalty: true,
    };
    let pen = PenaltySpec {
        kind: PenaltyKind::Logistic,
        k: 2.0,
        max_penalty: Some(1.0),
        constraints: vec![Constraint::component(0, Some(-0.5), Some(0.5)), Constraint::component(2, Some(-0.8), Some(0.8))],
    };
    let dt = 0.05;
    let problem = Problem { model: &model, costs: &costs, penalty: Some(&pen), jump: None, dt, steps: 2 };
    let mut net = small_net(4, V0Mode::Scalar, H0Mode::Trainable, opts.seed.wrapping_add(2), &target)?;
    let x0 = [0.3, 2.9, 0.6, -0.4];
    let noise = [0.11, -0.07];
    let lopts = LossOptions { grad_mode: GradMode::Full, value_weight: None };
    check(
        "rollout_cartpole",
        &mut net,
        |n| &mut n.store,
        |n| {
            let out = loss_and_grad(n, &problem, &x0, &noise, &lopts, &mut Tape::new())?;
            Ok((out.loss, out.grad))
        },
        opts,
    )
}

fn biped_hybrid_rollout(opts: &GradcheckOptions) -> Result<CheckResult> {
    let biped = Biped::new(BipedParams::default())?;
    let jump = HeelStrike::new(biped.clone());
    let costs = CostSpec {
        q: Weight::Diag(vec![0.1; 10]),
        q_terminal: Weight::Diag(vec![0.2; 10]),
        target: NOMINAL_STATE.to_vec(),
        control: ControlCost::Quadratic { r: vec![5.0; 4] },
        terminal_penalty: true,
    };
    let pen = PenaltySpec {
        kind: PenaltyKind::Relu,
        k: 1.0,
        max_penalty: None,
        constraints: vec![Constraint { terms: vec![(3, 1.0), (4, -1.0)], min: Some(0.0), max: None }],
    };
    let dt = 0.01;
    let problem = Problem { model: &biped, costs: &costs, penalty: Some(&pen), jump: Some(&jump), dt, steps: 2 };
    let mut net = small_net(10, V0Mode::Network, H0Mode::Network, opts.seed.wrapping_add(3), &NOMINAL_STATE)?;
    let x0 = NOMINAL_STATE;
    let noise = [0.05, -0.02, 0.03, 0.01, -0.04, 0.02, 0.0, 0.06];
    let lambda = 0.5;
    let hybrid = LossOptions { grad_mode: GradMode::Full, value_weight: Some(lambda) };
    let terminal = LossOptions { value_weight: None, ..hybrid };
    // Value targets are detached, so the reference loss freezes them at the base parameters.
    let frozen = loss_and_grad(&net, &problem, &x0, &noise, &hybrid, &mut Tape::new())?.trajectory;
    check(
        "rollout_biped_hybrid",
        &mut net,
        |n| &mut n.store,
        |n| {
            let fb = loss_and_grad(n, &problem, &x0, &noise, &terminal, &mut Tape::new())?;
            let (lv, _) = value_loss_and_grad(n, &frozen, dt)?;
            let full = loss_and_grad(n, &problem, &x0, &noise, &hybrid, &mut Tape::new())?;
            Ok((fb.loss + lambda * lv, full.grad))
        },
        opts,
    )
}

/// Runs every check.
/// Names accepted by [`run_only`].
pub const CHECKS: [&str; 4] = ["dense", "lstm", "rollout_cartpole", "rollout_biped_hybrid"];

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    run_only(&CHECKS, opts)
}

/// Runs the named subset of [`CHECKS`] in their canonical order.
pub fn run_only(names: &[&str], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(bad) = names.iter().find(|n| !CHECKS.contains(n)) {
        return Err(Error::Usage(format!("unknown gradient check `{bad}`")));
    }
    let mut checks = Vec::new();
    for name in CHECKS.iter().filter(|c| names.contains(c)) {
        checks.push(match *name {
            "dense" => dense_graph(opts)?,
            "lstm" => lstm_graph(opts)?,
            "rollout_cartpole" => cartpole_rollout(opts)?,
            _ => biped_hybrid_rollout(opts)?,
        });
    }
    Ok(GradcheckReport { checks })
}
