pub mod config;
pub mod costs;
pub mod dynamics;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod fbsde;
pub mod gradcheck;
pub mod io;
pub mod lq;
pub mod nn;
pub mod trainer;

pub use error::{Error, NnError, Result};
