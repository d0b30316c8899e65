//! Discrete-time Riccati reference for the Euler-discretized double integrator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Finite-horizon stochastic LQR with `x' = A x + B u + w`, `w ~ N(0, W)`,
/// stage cost `½(xᵀQx + uᵀRu)` and terminal cost `½xᵀQ_N x`.
#[derive(Clone, Debug)]
pub struct LqProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct LqSolution {
    /// `P_0 … P_N`.
    pub p: Vec<DMatrix<f64>>,
    /// Feedback gains `K_0 … K_{N-1}` with `u = −K x`.
    pub gains: Vec<DMatrix<f64>>,
    /// Noise-induced constants `c_0 … c_N`.
    pub offsets: Vec<f64>,
}

impl LqSolution {
    /// Expected cost-to-go from `x` at step `k`.
    pub fn value(&self, x: &DVector<f64>, k: usize) -> f64 {
        0.5 * (x.transpose() * &self.p[k] * x)[(0, 0)] + self.offsets[k]
    }
}

impl LqProblem {
    /// Euler discretization of `ṗ = v, v̇ = u` with costs scaled by `dt`
    /// and diffusion `σ·[0; 1]`.
    pub fn double_integrator(dt: f64, steps: usize, q: [f64; 2], r: f64, q_terminal: [f64; 2], sigma: f64) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, dt]),
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&q)) * dt,
            r: DMatrix::from_element(1, 1, r * dt),
            q_terminal: DMatrix::from_diagonal(&DVector::from_row_slice(&q_terminal)),
            w: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, sigma * sigma * dt]),
            steps,
        }
    }

    pub fn solve(&self) -> Result<LqSolution> {
        let n = self.steps;
        let mut p = vec![DMatrix::zeros(self.a.nrows(), self.a.ncols()); n + 1];
        let mut gains = vec![DMatrix::zeros(self.b.ncols(), self.a.ncols()); n];
        let mut offsets = vec![0.0; n + 1];
        p[n] = self.q_terminal.clone();
        for k in (0..n).rev() {
            let next = &p[k + 1];
            let btp = self.b.transpose() * next;
            let s = &self.r + &btp * &self.b;
            let s_inv = s.try_inverse().ok_or_else(|| Error::Numerical("Riccati step is singular".into()))?;
            let gain = &s_inv * &btp * &self.a;
            let atp = self.a.transpose() * next;
            let pk = &self.q + &atp * &self.a - &atp * &self.b * &gain;
            offsets[k] = offsets[k + 1] + 0.5 * (next * &self.w).trace();
            p[k] = 0.5 * (&pk + pk.transpose());
            gains[k] = gain;
        }
        Ok(LqSolution { p, gains, offsets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn problem(sigma: f64) -> LqProblem {
        LqProblem::double_integrator(0.02, 50, [1.0, 0.1], 1.0, [1.0, 1.0], sigma)
    }

    fn closed_loop_cost(lq: &LqProblem, sol: &LqSolution, x0: &DVector<f64>, noise: impl Fn(usize) -> DVector<f64>) -> f64 {
        let mut x = x0.clone();
        let mut cost = 0.0;
        for k in 0..lq.steps {
            let u = -&sol.gains[k] * &x;
            cost += 0.5 * ((x.transpose() * &lq.q * &x)[(0, 0)] + (u.transpose() * &lq.r * &u)[(0, 0)]);
            x = &lq.a * &x + &lq.b * &u + noise(k);
        }
        cost + 0.5 * (x.transpose() * &lq.q_terminal * &x)[(0, 0)]
    }

    #[test]
    fn deterministic_closed_loop_cost_equals_the_value() {
        let lq = problem(0.0);
        let sol = lq.solve().unwrap();
        let x0 = DVector::from_row_slice(&[1.0, -0.5]);
        let cost = closed_loop_cost(&lq, &sol, &x0, |_| DVector::zeros(2));
        assert!((cost - sol.value(&x0, 0)).abs() < 1e-12);
    }

    #[test]
    fn optimal_gain_beats_perturbed_gains() {
        let lq = problem(0.0);
        let sol = lq.solve().unwrap();
        let x0 = DVector::from_row_slice(&[1.0, 0.3]);
        let best = sol.value(&x0, 0);
        for scale in [0.9, 1.1] {
            let mut other = sol.clone();
            other.gains.iter_mut().for_each(|g| *g *= scale);
            assert!(closed_loop_cost(&lq, &other, &x0, |_| DVector::zeros(2)) > best);
        }
    }

    #[test]
    fn monte_carlo_matches_the_stochastic_value() {
        let lq = problem(0.5);
        let sol = lq.solve().unwrap();
        let x0 = DVector::from_row_slice(&[1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sd = lq.w[(1, 1)].sqrt();
        let samples: Vec<f64> = (0..20_000)
            .map(|_| {
                let draws: Vec<f64> = (0..lq.steps).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); sd * z }).collect();
                closed_loop_cost(&lq, &sol, &x0, |k| DVector::from_row_slice(&[0.0, draws[k]]))
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let se = (var / samples.len() as f64).sqrt();
        assert!((mean - sol.value(&x0, 0)).abs() < 4.0 * se, "{mean} vs {}", sol.value(&x0, 0));
        assert!(sol.offsets[0] > 0.0);
    }

    #[test]
    fn value_matrices_are_symmetric_positive_definite() {
        let sol = problem(0.1).solve().unwrap();
        for p in &sol.p {
            assert!((p - p.transpose()).norm() < 1e-12);
            assert!(p.clone().symmetric_eigenvalues().iter().all(|e| *e > 0.0));
        }
    }
}
