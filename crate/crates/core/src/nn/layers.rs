//! Dense and LSTM layers recorded on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    /// Weights uniform in `±1/sqrt(inputs)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), &[outputs, inputs], uniform(rng, outputs * inputs, bound));
        let bias = store.add(format!("{name}.bias"), &[outputs], vec![0.0; outputs]);
        Self { weight, bias, inputs, outputs, activation }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let wx = tape.matvec(w, x, self.outputs, self.inputs)?;
        let z = tape.add(wx, b)?;
        Ok(self.activation.apply(tape, z))
    }
}

/// Stack of dense layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes` lists the output width of every layer; hidden layers use
    /// `hidden`, the last layer is linear.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        sizes: &[usize],
        hidden: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut width = inputs;
        for (i, &out) in sizes.iter().enumerate() {
            let act = if i + 1 == sizes.len() { Activation::Identity } else { hidden };
            layers.push(Dense::new(store, &format!("{name}.{i}"), width, out, act, rng));
            width = out;
        }
        Self { layers }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var, NnError> {
        for layer in &self.layers {
            x = layer.forward(tape, x)?;
        }
        Ok(x)
    }
}

/// Single LSTM cell. The gate weights are stored as one `(4·hidden) x
/// (input + hidden)` matrix acting on `[x; h]`, gate blocks in the order
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Gate weights uniform in `±1/sqrt(input + hidden)`; forget-gate bias 1.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input + hidden;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), &[4 * hidden, fan_in], uniform(rng, 4 * hidden * fan_in, bound));
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), &[4 * hidden], b);
        Self { weight, bias, input, hidden }
    }

    /// One time step; returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var), NnError> {
        let hd = self.hidden;
        if tape.dim(x) != self.input {
            return Err(NnError::Shape { op: "lstm input", expected: self.input, got: tape.dim(x) });
        }
        if tape.dim(h) != hd {
            return Err(NnError::Shape { op: "lstm hidden state", expected: hd, got: tape.dim(h) });
        }
        if tape.dim(c) != hd {
            return Err(NnError::Shape { op: "lstm cell state", expected: hd, got: tape.dim(c) });
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xh = tape.concat(x, h);
        let wxh = tape.matvec(w, xh, 4 * hd, self.input + hd)?;
        let z = tape.add(wxh, b)?;
        let zi = tape.slice(z, 0, hd)?;
        let zf = tape.slice(z, hd, hd)?;
        let zg = tape.slice(z, 2 * hd, hd)?;
        let zo = tape.slice(z, 3 * hd, hd)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Recurrent state of an [`LstmStack`]: `(h, c)` per layer.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub layers: Vec<(Var, Var)>,
}

/// Stacked LSTM cells followed by a linear output head.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
    pub head: Dense,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut cells = Vec::with_capacity(hidden.len());
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            cells.push(LstmCell::new(store, &format!("{name}.lstm{i}"), width, h, rng));
            width = h;
        }
        let head = Dense::new(store, &format!("{name}.head"), width, output, Activation::Identity, rng);
        Self { cells, head }
    }

    pub fn input_dim(&self) -> usize {
        self.cells.first().map(|c| c.input).unwrap_or(self.head.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.head.outputs
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.hidden).collect()
    }

    /// Advances every layer by one step and applies the head to the top
    /// hidden state.
    pub fn step(&self, tape: &mut Tape, x: Var, state: &LstmState) -> Result<(Var, LstmState), NnError> {
        if state.layers.len() != self.cells.len() {
            return Err(NnError::Shape { op: "lstm stack state", expected: self.cells.len(), got: state.layers.len() });
        }
        let mut inp = x;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, &(h, c)) in self.cells.iter().zip(&state.layers) {
            let (h2, c2) = cell.step(tape, inp, h, c)?;
            next.push((h2, c2));
            inp = h2;
        }
        let out = self.head.forward(tape, inp)?;
        Ok((out, LstmState { layers: next }))
    }
}
