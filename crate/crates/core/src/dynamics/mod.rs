//! Control-affine SDE models `dx = (F(x) + G(x)u)dt + Σ(x)dw`.
//!
//! Every model here uses the diffusion `Σ(x) = σ·G(x)`: noise enters exactly
//! through the actuated channels, so `range(G) ⊆ range(Σ)` holds whenever
//! `σ ≠ 0` and the noise dimension equals the control dimension.

pub mod biped;
pub mod cartpole;
pub mod dual;

use nalgebra::DMatrix;

pub use biped::{Biped, BipedParams, HeelStrike};
pub use cartpole::{CartPole, CartPoleParams};

use crate::error::{Error, Result};

/// Drift and control matrix at a state, with their state Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    /// `F(x)`, length `n`.
    pub drift: Vec<f64>,
    /// `dF/dx`, row-major `n x n`.
    pub drift_jac: Vec<f64>,
    /// `G(x)`, row-major `n x m`.
    pub control: Vec<f64>,
    /// `d vec(G)/dx`, row-major `(n·m) x n`.
    pub control_jac: Vec<f64>,
}

pub trait SdeModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize {
        self.control_dim()
    }
    /// `σ` in `Σ(x) = σ·G(x)`.
    fn noise_scale(&self) -> f64;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major `n x m`.
    fn control_matrix(&self, x: &[f64]) -> Vec<f64>;
    fn linearize(&self, x: &[f64]) -> Linearization;

    /// Row-major `n x ν`.
    fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let s = self.noise_scale();
        self.control_matrix(x).into_iter().map(|g| s * g).collect()
    }

    /// `F(x) + G(x)u`.
    fn velocity(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let m = self.control_dim();
        let g = self.control_matrix(x);
        let mut f = self.drift(x);
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += (0..m).map(|j| g[i * m + j] * u[j]).sum::<f64>();
        }
        f
    }
}

/// Deterministic reset applied at the end of a continuous phase.
pub trait JumpMap: Send + Sync {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Post-jump state and its Jacobian (row-major `n x n`).
    fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// One Euler–Maruyama step `x + (F + G u)Δt + Σ Δw`. `step` only labels the
/// error when the result is not finite.
pub fn em_step(model: &dyn SdeModel, x: &[f64], u: &[f64], dw: &[f64], dt: f64, step: usize) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(Error::Usage(format!("time step must be positive, got {dt}")));
    }
    let nu = model.noise_dim();
    let vel = model.velocity(x, u);
    let sigma = model.diffusion(x);
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + vel[i] * dt + (0..nu).map(|j| sigma[i * nu + j] * dw[j]).sum::<f64>())
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationBlowup { step });
    }
    Ok(next)
}

/// Classical RK4 step of the noise-free dynamics under a constant control.
/// Only used to validate the models.
pub fn rk4_step(model: &dyn SdeModel, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    let shift = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> { base.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = model.velocity(x, u);
    let k2 = model.velocity(&shift(x, &k1, dt / 2.0), u);
    let k3 = model.velocity(&shift(x, &k2, dt / 2.0), u);
    let k4 = model.velocity(&shift(x, &k3, dt), u);
    (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Least-squares residual of expressing every column of `G(x)` in the
/// column space of `Σ(x)`; near zero when `range(G) ⊆ range(Σ)`.
pub fn range_inclusion_residual(model: &dyn SdeModel, x: &[f64]) -> f64 {
    let (n, m, nu) = (model.state_dim(), model.control_dim(), model.noise_dim());
    let g = DMatrix::from_row_slice(n, m, &model.control_matrix(x));
    let s = DMatrix::from_row_slice(n, nu, &model.diffusion(x));
    let svd = s.clone().svd(true, true);
    let coeffs = match svd.solve(&g, 1e-12) {
        Ok(c) => c,
        Err(_) => return f64::INFINITY,
    };
    (&s * coeffs - &g).norm()
}

/// The planar double integrator `ṗ = v, v̇ = u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleIntegrator {
    pub noise_scale: f64,
}

impl SdeModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn noise_scale(&self) -> f64 {
        self.noise_scale
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![x[1], 0.0]
    }
    fn control_matrix(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 1.0]
    }
    fn linearize(&self, x: &[f64]) -> Linearization {
        Linearization {
            drift: self.drift(x),
            drift_jac: vec![0.0, 1.0, 0.0, 0.0],
            control: self.control_matrix(x),
            control_jac: vec![0.0; 4],
        }
    }
}

/// Central-difference check helper shared by the model tests.
#[cfg(test)]
pub(crate) fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let out = f(x).len();
    let n = x.len();
    let mut jac = vec![0.0; out * n];
    for c in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for r in 0..out {
            jac[r * n + c] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        sigma: f64,
    }

    impl SdeModel for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn noise_scale(&self) -> f64 {
            self.sigma
        }
        fn drift(&self, _x: &[f64]) -> Vec<f64> {
            vec![1.0]
        }
        fn control_matrix(&self, _x: &[f64]) -> Vec<f64> {
            vec![1.0]
        }
        fn linearize(&self, x: &[f64]) -> Linearization {
            Linearization { drift: self.drift(x), drift_jac: vec![0.0], control: vec![1.0], control_jac: vec![0.0] }
        }
    }

    #[test]
    fn pure_drift_step() {
        let m = Scalar { sigma: 0.0 };
        let x = em_step(&m, &[0.0], &[0.0], &[0.0], 0.01, 0).unwrap();
        assert_eq!(x, vec![0.01]);
    }

    #[test]
    fn zero_drift_zero_input_is_identity() {
        let m = DoubleIntegrator { noise_scale: 0.3 };
        let x = em_step(&m, &[1.5, 0.0], &[0.0], &[0.0], 0.1, 0).unwrap();
        assert_eq!(x, vec![1.5, 0.0]);
    }

    #[test]
    fn additive_noise_enters_exactly() {
        let m = Scalar { sigma: 1.0 };
        let x = em_step(&m, &[0.5], &[0.0], &[0.1], 0.01, 0).unwrap();
        assert!((x[0] - 0.5 - 0.01 - 0.1).abs() < 1e-16);
    }

    #[test]
    fn step_is_linear_in_noise() {
        let m = DoubleIntegrator { noise_scale: 0.7 };
        let x = [0.2, -0.3];
        let base = em_step(&m, &x, &[0.4], &[0.0], 0.05, 0).unwrap();
        let a = em_step(&m, &x, &[0.4], &[0.3], 0.05, 0).unwrap();
        let b = em_step(&m, &x, &[0.4], &[0.6], 0.05, 0).unwrap();
        for i in 0..2 {
            assert!(((b[i] - base[i]) - 2.0 * (a[i] - base[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn blowup_reports_step() {
        let m = Scalar { sigma: 1.0 };
        let err = em_step(&m, &[0.0], &[0.0], &[f64::INFINITY], 0.1, 17).unwrap_err();
        assert!(matches!(err, Error::IntegrationBlowup { step: 17 }));
    }

    #[test]
    fn nonpositive_dt_is_rejected() {
        let m = Scalar { sigma: 1.0 };
        assert!(em_step(&m, &[0.0], &[0.0], &[0.0], 0.0, 0).is_err());
    }

    #[test]
    fn double_integrator_range_inclusion() {
        let m = DoubleIntegrator { noise_scale: 0.1 };
        assert!(range_inclusion_residual(&m, &[0.3, 0.1]) < 1e-9);
    }
}
