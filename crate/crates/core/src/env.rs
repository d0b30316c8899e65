//! The concrete environments selectable from a configuration file.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Biped, BipedParams, CartPole, CartPoleParams, DoubleIntegrator, HeelStrike, JumpMap, SdeModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Cartpole(CartPoleParams),
    Biped(BipedParams),
    LqToy(LqToyParams),
}

/// Planar double integrator `ṗ = v, v̇ = u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqToyParams {
    pub noise_scale: f64,
}

#[derive(Clone, Debug)]
pub enum Environment {
    CartPole(CartPole),
    Biped { biped: Biped, heel_strike: HeelStrike },
    LqToy(DoubleIntegrator),
}

impl Environment {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        Ok(match cfg {
            EnvConfig::Cartpole(p) => {
                let positive = [p.cart_mass, p.pole_mass, p.pole_length, p.gravity];
                if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(p.noise_scale >= 0.0) {
                    return Err(Error::Config("cart-pole masses, length and gravity must be positive".into()));
                }
                Environment::CartPole(CartPole::new(p.clone()))
            }
            EnvConfig::Biped(p) => {
                let biped = Biped::new(p.clone()).map_err(|e| Error::Config(e.to_string()))?;
                Environment::Biped { heel_strike: HeelStrike::new(biped.clone()), biped }
            }
            EnvConfig::LqToy(p) => {
                if !(p.noise_scale >= 0.0 && p.noise_scale.is_finite()) {
                    return Err(Error::Config("lq_toy noise_scale must be non-negative".into()));
                }
                Environment::LqToy(DoubleIntegrator { noise_scale: p.noise_scale })
            }
        })
    }

    pub fn model(&self) -> &dyn SdeModel {
        match self {
            Environment::CartPole(m) => m,
            Environment::Biped { biped, .. } => biped,
            Environment::LqToy(m) => m,
        }
    }

    /// Reset applied at the end of every rollout, if any.
    pub fn jump(&self) -> Option<&dyn JumpMap> {
        match self {
            Environment::Biped { heel_strike, .. } => Some(heel_strike),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Environment::CartPole(_) => "cartpole",
            Environment::Biped { .. } => "biped",
            Environment::LqToy(_) => "lq_toy",
        }
    }
}
