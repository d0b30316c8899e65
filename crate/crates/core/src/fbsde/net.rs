//! Value-gradient network with its initial-value and initial-state heads.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, LstmStack, LstmState, Mlp, ParamId, ParamStore, Tape, Var};

/// How `V(x₀, t₀)` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum V0Mode {
    /// One trainable scalar, for a fixed initial state.
    Scalar,
    /// Dense network of `(x, t/T)`.
    Network,
}

/// How the initial LSTM hidden and cell states are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum H0Mode {
    /// Trainable vectors, for a fixed initial state.
    Trainable,
    /// One small dense network of `x₀` per hidden and per cell state.
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// LSTM layer widths.
    pub lstm: Vec<usize>,
    pub v0: V0Mode,
    /// Layer widths of the network head (last entry must be 1).
    pub v0_layers: Vec<usize>,
    pub h0: H0Mode,
    /// Width of the hidden layer inside each initial-state network.
    pub h0_width: usize,
    /// Inputs are `(x − input_center) / input_scale`.
    pub input_center: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Initial value of the scalar head.
    pub v0_init: f64,
}

impl NetConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.lstm.is_empty() || self.lstm.contains(&0) {
            return Err(Error::Config("net.lstm needs at least one non-zero layer width".into()));
        }
        if self.v0 == V0Mode::Network && (self.v0_layers.last() != Some(&1) || self.v0_layers.contains(&0)) {
            return Err(Error::Config("net.v0_layers must be non-zero widths ending in 1".into()));
        }
        if self.h0 == H0Mode::Network && self.h0_width == 0 {
            return Err(Error::Config("net.h0_width must be positive".into()));
        }
        if self.input_center.len() != n || self.input_scale.len() != n {
            return Err(Error::Config(format!("net.input_center and net.input_scale need {n} entries")));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("net.input_scale entries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum V0Head {
    Scalar(ParamId),
    Network(Mlp),
}

#[derive(Clone, Debug)]
enum H0Head {
    Trainable(Vec<(ParamId, ParamId)>),
    /// `(hidden net, cell net)` per layer, each dense(n→w, tanh) → dense(w→H).
    Network(Vec<([Dense; 2], [Dense; 2])>),
}

/// Parameters `(θ, φ, ϕ)` and the layers that use them.
#[derive(Clone, Debug)]
pub struct ValueNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub state_dim: usize,
    vx: LstmStack,
    v0: V0Head,
    h0: H0Head,
    inv_scale: Vec<f64>,
}

impl ValueNet {
    pub fn new(config: NetConfig, state_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(state_dim)?;
        let n = state_dim;
        let mut store = ParamStore::new();
        let vx = LstmStack::new(&mut store, "vx", n + 1, &config.lstm, n, rng);
        let v0 = match config.v0 {
            V0Mode::Scalar => V0Head::Scalar(store.add("v0.value", &[1], vec![config.v0_init])),
            V0Mode::Network => V0Head::Network(Mlp::new(&mut store, "v0", n + 1, &config.v0_layers, Activation::Tanh, rng)),
        };
        let h0 = match config.h0 {
            H0Mode::Trainable => H0Head::Trainable(
                config
                    .lstm
                    .iter()
                    .enumerate()
                    .map(|(l, &h)| {
                        (store.add(format!("h0.{l}.h"), &[h], vec![0.0; h]), store.add(format!("h0.{l}.c"), &[h], vec![0.0; h]))
                    })
                    .collect(),
            ),
            H0Mode::Network => {
                let w = config.h0_width;
                let mut pair = |name: String, h: usize, rng: &mut _| {
                    [
                        Dense::new(&mut store, &format!("{name}.0"), n, w, Activation::Tanh, rng),
                        Dense::new(&mut store, &format!("{name}.1"), w, h, Activation::Identity, rng),
                    ]
                };
                let mut heads = Vec::new();
                for (l, &h) in config.lstm.iter().enumerate() {
                    let hn = pair(format!("h0.{l}.h"), h, rng);
                    let cn = pair(format!("h0.{l}.c"), h, rng);
                    heads.push((hn, cn));
                }
                H0Head::Network(heads)
            }
        };
        let inv_scale = config.input_scale.iter().map(|s| 1.0 / s).collect();
        Ok(Self { config, store, state_dim, vx, v0, h0, inv_scale })
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Normalized state node.
    pub fn normalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.constant(&self.config.input_center);
        let s = tape.constant(&self.inv_scale);
        let d = tape.sub(x, c)?;
        Ok(tape.mul(d, s)?)
    }

    fn input(&self, tape: &mut Tape, x: Var, t_frac: f64) -> Result<Var> {
        let xn = self.normalize(tape, x)?;
        let t = tape.scalar(t_frac);
        Ok(tape.concat(xn, t))
    }

    /// `V₀(x, t)`; the scalar head ignores its inputs.
    pub fn v0(&self, tape: &mut Tape, x: Var, t_frac: f64) -> Result<Var> {
        match &self.v0 {
            V0Head::Scalar(id) => Ok(tape.param(*id)),
            V0Head::Network(mlp) => {
                let inp = self.input(tape, x, t_frac)?;
                Ok(mlp.forward(tape, inp)?)
            }
        }
    }

    pub fn initial_state(&self, tape: &mut Tape, x0: Var) -> Result<LstmState> {
        let layers = match &self.h0 {
            H0Head::Trainable(ids) => ids.iter().map(|&(h, c)| (tape.param(h), tape.param(c))).collect(),
            H0Head::Network(heads) => {
                let xn = self.normalize(tape, x0)?;
                let mut layers = Vec::with_capacity(heads.len());
                for (hn, cn) in heads {
                    let hh = hn[0].forward(tape, xn)?;
                    let h = hn[1].forward(tape, hh)?;
                    let ch = cn[0].forward(tape, xn)?;
                    let c = cn[1].forward(tape, ch)?;
                    layers.push((h, c));
                }
                layers
            }
        };
        Ok(LstmState { layers })
    }

    /// `V_x(x, t)` and the advanced recurrent state.
    pub fn vx(&self, tape: &mut Tape, x: Var, t_frac: f64, state: &LstmState) -> Result<(Var, LstmState)> {
        let inp = self.input(tape, x, t_frac)?;
        Ok(self.vx.step(tape, inp, state)?)
    }

    /// Evaluates `V₀(x, t)` without recording gradients for later use.
    pub fn v0_value(&self, x: &[f64], t_frac: f64) -> Result<f64> {
        let mut tape = Tape::new();
        tape.load_params(&self.store);
        let xv = tape.constant(x);
        let v = self.v0(&mut tape, xv, t_frac)?;
        Ok(tape.scalar_value(v))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.store.save(stem)
    }

    /// Loads parameters saved from a network with the same configuration.
    pub fn load_params(&mut self, stem: &Path) -> Result<()> {
        let loaded = ParamStore::load(stem)?;
        self.store.assign_from(&loaded).map_err(|e| match e {
            Error::Checkpoint { .. } => e,
            other => Error::Checkpoint { path: stem.to_path_buf(), reason: other.to_string() },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config(n: usize, v0: V0Mode, h0: H0Mode) -> NetConfig {
        NetConfig {
            lstm: vec![6, 5],
            v0,
            v0_layers: vec![4, 3, 1],
            h0,
            h0_width: 3,
            input_center: vec![0.0; n],
            input_scale: vec![1.0; n],
            v0_init: 0.0,
        }
    }

    #[test]
    fn output_dimension_matches_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ValueNet::new(small_config(4, V0Mode::Scalar, H0Mode::Trainable), 4, &mut rng).unwrap();
        let mut t = Tape::new();
        t.load_params(&net.store);
        let x = t.constant(&[0.1, 0.2, 0.3, 0.4]);
        let s = net.initial_state(&mut t, x).unwrap();
        let (vx, s2) = net.vx(&mut t, x, 0.0, &s).unwrap();
        assert_eq!(t.dim(vx), 4);
        assert_eq!(s2.layers.iter().map(|(h, _)| t.dim(*h)).collect::<Vec<_>>(), vec![6, 5]);
    }

    #[test]
    fn network_heads_shape_hidden_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ValueNet::new(small_config(10, V0Mode::Network, H0Mode::Network), 10, &mut rng).unwrap();
        let mut t = Tape::new();
        t.load_params(&net.store);
        let x = t.constant(&[0.1; 10]);
        let s = net.initial_state(&mut t, x).unwrap();
        for (l, (h, c)) in s.layers.iter().enumerate() {
            assert_eq!(t.dim(*h), [6, 5][l]);
            assert_eq!(t.dim(*c), [6, 5][l]);
        }
        assert!(net.v0_value(&[0.1; 10], 0.5).unwrap().is_finite());
        assert_eq!(net.store.entry(net.store.find("h0.1.c.1.weight").unwrap()).shape, vec![5, 3]);
    }

    #[test]
    fn scalar_head_reads_its_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = NetConfig { v0_init: 2.5, ..small_config(2, V0Mode::Scalar, H0Mode::Trainable) };
        let net = ValueNet::new(cfg, 2, &mut rng).unwrap();
        assert_eq!(net.v0_value(&[9.0, 9.0], 0.0).unwrap(), 2.5);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bad = NetConfig { input_scale: vec![1.0, 0.0], ..small_config(2, V0Mode::Scalar, H0Mode::Trainable) };
        assert!(ValueNet::new(bad, 2, &mut rng).is_err());
        let bad = NetConfig { v0_layers: vec![4, 2], ..small_config(2, V0Mode::Network, H0Mode::Trainable) };
        assert!(ValueNet::new(bad, 2, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ValueNet::new(small_config(3, V0Mode::Network, H0Mode::Network), 3, &mut rng).unwrap();
        net.save(&stem).unwrap();
        let mut other = ValueNet::new(small_config(3, V0Mode::Network, H0Mode::Network), 3, &mut rng).unwrap();
        assert_ne!(other.store.flat(), net.store.flat());
        other.load_params(&stem).unwrap();
        assert_eq!(other.store.flat(), net.store.flat());
        let mut mismatched = ValueNet::new(small_config(3, V0Mode::Scalar, H0Mode::Trainable), 3, &mut rng).unwrap();
        assert!(matches!(mismatched.load_params(&stem), Err(Error::Checkpoint { .. })));
    }
}
