//! Minimal reverse-mode autodiff, dense/LSTM layers and the optimizer.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{Activation, Dense, LstmCell, LstmStack, LstmState, Mlp};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Tape, Var};
