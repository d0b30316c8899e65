//! Cart-pole with a point-mass pole. State `[x, θ, ẋ, θ̇]`, θ = 0 hanging down.
//!
//! ```text
//! (M+m)ẍ − mℓ sinθ θ̇² + mℓ cosθ θ̈ = u
//! mℓ²θ̈ + mℓ cosθ ẍ + mgℓ sinθ     = 0
//! ```

use serde::{Deserialize, Serialize};

use super::dual::{unpack, Dual, Real};
use super::{Linearization, SdeModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleParams {
    /// Cart mass (kg).
    pub cart_mass: f64,
    /// Pole tip mass (kg).
    pub pole_mass: f64,
    /// Pole length (m).
    pub pole_length: f64,
    pub gravity: f64,
    /// Diffusion scale σ (force units).
    pub noise_scale: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self { cart_mass: 1.0, pole_mass: 0.01, pole_length: 0.5, gravity: 9.81, noise_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CartPole {
    pub params: CartPoleParams,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Self {
        assert!(
            params.cart_mass > 0.0 && params.pole_mass > 0.0 && params.pole_length > 0.0,
            "cart-pole masses and length must be positive"
        );
        Self { params }
    }

    /// Returns `(F(x), G(x))` with `G` flattened (`4 x 1`).
    fn eval<T: Real>(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let CartPoleParams { cart_mass: mc, pole_mass: mp, pole_length: l, gravity: g, .. } = self.params;
        let (th, xd, thd) = (x[1], x[2], x[3]);
        let (s, c) = (th.sin(), th.cos());
        // Inverse of [[M+m, mℓc], [mℓc, mℓ²]] is [[mℓ², −mℓc], [−mℓc, M+m]] / det.
        let det = (s * s * mp + mc) * (mp * l * l);
        let rhs1 = s * thd * thd * (mp * l);
        let rhs2 = -(s * (mp * g * l));
        let ml2 = T::cst(mp * l * l);
        let mlc = c * (mp * l);
        let xdd = (ml2 * rhs1 - mlc * rhs2) / det;
        let thdd = (T::cst(mc + mp) * rhs2 - mlc * rhs1) / det;
        let g3 = ml2 / det;
        let g4 = -mlc / det;
        (vec![xd, thd, xdd, thdd], vec![T::cst(0.0), T::cst(0.0), g3, g4])
    }

    /// Solves the two coupled equations for `(ẍ, θ̈)`.
    pub fn accel(&self, state: &[f64], u: f64) -> (f64, f64) {
        let (f, g) = self.eval(state);
        (f[2] + g[2] * u, f[3] + g[3] * u)
    }

    /// Residuals of both equations of motion at the given accelerations.
    pub fn residual(&self, state: &[f64], u: f64, xdd: f64, thdd: f64) -> (f64, f64) {
        let CartPoleParams { cart_mass: mc, pole_mass: mp, pole_length: l, gravity: g, .. } = self.params;
        let (th, thd) = (state[1], state[3]);
        let r1 = (mc + mp) * xdd - mp * l * th.sin() * thd * thd + mp * l * th.cos() * thdd - u;
        let r2 = mp * l * l * thdd + mp * l * th.cos() * xdd + mp * g * l * th.sin();
        (r1, r2)
    }
}

impl SdeModel for CartPole {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn noise_scale(&self) -> f64 {
        self.params.noise_scale
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x).0
    }
    fn control_matrix(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x).1
    }
    fn linearize(&self, x: &[f64]) -> Linearization {
        let xd = Dual::<4>::seed(x);
        let (f, g) = self.eval(&xd);
        let (drift, drift_jac) = unpack(&f);
        let (control, control_jac) = unpack(&g);
        Linearization { drift, drift_jac, control, control_jac }
    }
}
