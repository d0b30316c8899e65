//! Planar five-link biped with a pinned stance foot.
//!
//! Links are indexed stance shin (1), stance thigh (2), torso (3), swing
//! thigh (4), swing shin (5). Every angle is absolute, measured
//! counter-clockwise from the upward vertical, and every link direction
//! `e(q) = (−sin q, cos q)` points from the foot side towards the hip
//! (from the hip upwards for the torso). The swing knee does not
//! hyperextend while `q₄ − q₅ ≥ 0`.
//!
//! Each body centre of mass is `p_i = p₀ + Σ_j a_ij e(q_j)` for the stance
//! foot `p₀`, which gives
//!
//! ```text
//! M_jk = B_jk cos(q_j − q_k) + I_j δ_jk,   B_jk = Σ_i m_i a_ij a_ik
//! (C q̇)_j = Σ_k B_jk sin(q_j − q_k) q̇_k²
//! G_j = −g sin(q_j) Σ_i m_i a_ij
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dual::{solve, unpack, Dual, Real};
use super::{JumpMap, Linearization, SdeModel};
use crate::error::{Error, Result};

/// Condition number above which the inertia matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BipedParams {
    pub shin_mass: f64,
    pub thigh_mass: f64,
    pub torso_mass: f64,
    /// Moments of inertia about each link's centre of mass.
    pub shin_inertia: f64,
    pub thigh_inertia: f64,
    pub torso_inertia: f64,
    pub shin_length: f64,
    pub thigh_length: f64,
    pub torso_length: f64,
    /// Centre-of-mass distance from the knee.
    pub shin_com: f64,
    /// Centre-of-mass distance from the hip.
    pub thigh_com: f64,
    /// Centre-of-mass distance from the hip.
    pub torso_com: f64,
    pub gravity: f64,
    /// Diffusion scale σ (torque units).
    pub noise_scale: f64,
}

impl Default for BipedParams {
    fn default() -> Self {
        Self {
            shin_mass: 3.2,
            thigh_mass: 6.8,
            torso_mass: 20.0,
            shin_inertia: 0.93,
            thigh_inertia: 1.08,
            torso_inertia: 2.22,
            shin_length: 0.4,
            thigh_length: 0.4,
            torso_length: 0.625,
            shin_com: 0.128,
            thigh_com: 0.163,
            torso_com: 0.2,
            gravity: 9.81,
            noise_scale: 0.5,
        }
    }
}

impl BipedParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("shin_mass", self.shin_mass),
            ("thigh_mass", self.thigh_mass),
            ("torso_mass", self.torso_mass),
            ("shin_length", self.shin_length),
            ("thigh_length", self.thigh_length),
            ("torso_length", self.torso_length),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("biped {name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("shin_inertia", self.shin_inertia),
            ("thigh_inertia", self.thigh_inertia),
            ("torso_inertia", self.torso_inertia),
            ("shin_com", self.shin_com),
            ("thigh_com", self.thigh_com),
            ("torso_com", self.torso_com),
            ("gravity", self.gravity),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("biped {name} must be non-negative, got {v}")));
            }
        }
        if !self.noise_scale.is_finite() {
            return Err(Error::Config("biped noise_scale must be finite".into()));
        }
        Ok(())
    }

    fn masses(&self) -> [f64; 5] {
        [self.shin_mass, self.thigh_mass, self.torso_mass, self.thigh_mass, self.shin_mass]
    }

    fn inertias(&self) -> [f64; 5] {
        [self.shin_inertia, self.thigh_inertia, self.torso_inertia, self.thigh_inertia, self.shin_inertia]
    }

    /// Centre-of-mass coefficient table `a_ij`.
    fn com_table(&self) -> [[f64; 5]; 5] {
        let (ls, lt) = (self.shin_length, self.thigh_length);
        let (ds, dt, db) = (self.shin_com, self.thigh_com, self.torso_com);
        [
            [ls - ds, 0.0, 0.0, 0.0, 0.0],
            [ls, lt - dt, 0.0, 0.0, 0.0],
            [ls, lt, db, 0.0, 0.0],
            [ls, lt, 0.0, -dt, 0.0],
            [ls, lt, 0.0, -lt, -ds],
        ]
    }

    /// Swing-foot coefficients: `p_swing = p₀ + Σ_j f_j e(q_j)`.
    fn swing_foot(&self) -> [f64; 5] {
        [self.shin_length, self.thigh_length, 0.0, -self.thigh_length, -self.shin_length]
    }
}

/// Unit link direction.
pub fn link_dir<T: Real>(q: T) -> [T; 2] {
    [-q.sin(), q.cos()]
}

/// Derivative of [`link_dir`] with respect to the angle.
fn link_dir_deriv<T: Real>(q: T) -> [T; 2] {
    [-q.cos(), -q.sin()]
}

/// Mid-stance state `[q; q̇]` used as the default footstep start.
pub const NOMINAL_STATE: [f64; 10] = [0.10, 0.50, -0.10, -0.35, -0.40, -1.50, -0.50, 0.00, -0.55, -2.00];

#[derive(Clone, Debug, PartialEq)]
pub struct Biped {
    pub params: BipedParams,
    inertia: [f64; 5],
    /// `B_jk`.
    coupling: [[f64; 5]; 5],
    /// `Σ_i m_i a_ij`.
    first_moment: [f64; 5],
    total_mass: f64,
}

impl Biped {
    pub fn new(params: BipedParams) -> Result<Self> {
        params.validate()?;
        let m = params.masses();
        let a = params.com_table();
        let mut coupling = [[0.0; 5]; 5];
        let mut first_moment = [0.0; 5];
        for j in 0..5 {
            for i in 0..5 {
                first_moment[j] += m[i] * a[i][j];
            }
            for k in 0..5 {
                coupling[j][k] = (0..5).map(|i| m[i] * a[i][j] * a[i][k]).sum();
            }
        }
        Ok(Self { params, inertia: params.inertias(), coupling, first_moment, total_mass: m.iter().sum() })
    }

    /// Row-major `5 x 5`.
    pub fn mass_matrix<T: Real>(&self, q: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(25);
        for j in 0..5 {
            for k in 0..5 {
                let mut v = (q[j] - q[k]).cos() * self.coupling[j][k];
                if j == k {
                    v = v + self.inertia[j];
                }
                out.push(v);
            }
        }
        out
    }

    /// Row-major `5 x 5` Coriolis matrix with `C_jk = B_jk sin(q_j − q_k) q̇_k`.
    pub fn coriolis<T: Real>(&self, q: &[T], qd: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(25);
        for j in 0..5 {
            for k in 0..5 {
                out.push((q[j] - q[k]).sin() * qd[k] * self.coupling[j][k]);
            }
        }
        out
    }

    pub fn gravity<T: Real>(&self, q: &[T]) -> Vec<T> {
        let g = self.params.gravity;
        (0..5).map(|j| -(q[j].sin() * (g * self.first_moment[j]))).collect()
    }

    /// Kinetic plus potential energy with the stance foot at the origin.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let (q, qd) = (&x[..5], &x[5..10]);
        let m = self.mass_matrix(q);
        let kinetic: f64 = (0..5).map(|j| (0..5).map(|k| 0.5 * qd[j] * m[j * 5 + k] * qd[k]).sum::<f64>()).sum();
        let potential: f64 = (0..5).map(|j| self.params.gravity * self.first_moment[j] * q[j].cos()).sum();
        kinetic + potential
    }

    /// `q̈ = M(q)⁻¹(u − C(q, q̇)q̇ − G(q))` for a full generalized force `u`.
    pub fn accel(&self, q: &[f64], qd: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let m = self.mass_matrix(q);
        let cond = condition_number(&m, 5);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::Numerical(format!("biped inertia matrix ill-conditioned (cond {cond:.3e})")));
        }
        let c = self.coriolis(q, qd);
        let g = self.gravity(q);
        let rhs: Vec<f64> = (0..5).map(|j| u[j] - (0..5).map(|k| c[j * 5 + k] * qd[k]).sum::<f64>() - g[j]).collect();
        solve(m, rhs, 5, 1).ok_or_else(|| Error::Numerical("singular biped inertia matrix".into()))
    }

    /// Returns `(F(x), G(x))` with `G` flattened (`10 x 4`).
    fn eval<T: Real>(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let (q, qd) = (&x[..5], &x[5..10]);
        let m = self.mass_matrix(q);
        let c = self.coriolis(q, qd);
        let g = self.gravity(q);
        // Right-hand sides: [−Cq̇ − G | T] as a 5 x 5 block.
        let mut rhs = vec![T::cst(0.0); 25];
        for j in 0..5 {
            let mut acc = -g[j];
            for k in 0..5 {
                acc = acc - c[j * 5 + k] * qd[k];
            }
            rhs[j * 5] = acc;
            if j > 0 {
                rhs[j * 5 + j] = T::cst(1.0);
            }
        }
        let sol = solve(m, rhs, 5, 5).unwrap_or_else(|| vec![T::cst(f64::NAN); 25]);
        let mut drift = Vec::with_capacity(10);
        drift.extend_from_slice(qd);
        drift.extend((0..5).map(|j| sol[j * 5]));
        let mut ctrl = vec![T::cst(0.0); 40];
        for j in 0..5 {
            for a in 0..4 {
                ctrl[(5 + j) * 4 + a] = sol[j * 5 + 1 + a];
            }
        }
        (drift, ctrl)
    }

    /// Hip, knee, foot and torso-tip positions with the stance foot at the
    /// origin: `[stance foot, stance knee, hip, torso tip, swing knee, swing foot]`.
    pub fn joint_positions(&self, q: &[f64]) -> [[f64; 2]; 6] {
        let p = &self.params;
        let e: Vec<[f64; 2]> = q.iter().map(|&a| link_dir(a)).collect();
        let add = |a: [f64; 2], b: [f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
        let foot = [0.0, 0.0];
        let knee = add(foot, e[0], p.shin_length);
        let hip = add(knee, e[1], p.thigh_length);
        let tip = add(hip, e[2], p.torso_length);
        let sknee = add(hip, e[3], -p.thigh_length);
        let sfoot = add(sknee, e[4], -p.shin_length);
        [foot, knee, hip, tip, sknee, sfoot]
    }
}

fn condition_number(m: &[f64], n: usize) -> f64 {
    let sv = DMatrix::from_row_slice(n, n, m).singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl SdeModel for Biped {
    fn state_dim(&self) -> usize {
        10
    }
    fn control_dim(&self) -> usize {
        4
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
        let xd = Dual::<10>::seed(x);
        let (f, g) = self.eval(&xd);
        let (drift, drift_jac) = unpack(&f);
        let (control, control_jac) = unpack(&g);
        Linearization { drift, drift_jac, control, control_jac }
    }
}

/// Rigid, non-rebounding impact at the swing foot followed by the leg swap
/// `q⁺ = Ĩ q⁻`, `q̇⁺ = Ĩ q̇_impact`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeelStrike {
    pub biped: Biped,
}

impl HeelStrike {
    pub fn new(biped: Biped) -> Self {
        Self { biped }
    }

    /// Reverses the link ordering.
    pub fn angle_map<T: Copy>(q: &[T]) -> Vec<T> {
        q.iter().rev().copied().collect()
    }

    fn eval<T: Real>(&self, x: &[T]) -> Option<Vec<T>> {
        let b = &self.biped;
        let (q, qd) = (&x[..5], &x[5..10]);
        let foot = b.params.swing_foot();
        let mq = b.mass_matrix(q);
        // Extended coordinates [q, p₀] with a free stance foot.
        const N: usize = 9;
        let mut a = vec![T::cst(0.0); N * N];
        let mut rhs = vec![T::cst(0.0); N];
        for j in 0..5 {
            for k in 0..5 {
                a[j * N + k] = mq[j * 5 + k];
            }
            let de = link_dir_deriv(q[j]);
            for d in 0..2 {
                let cross = de[d] * b.first_moment[j];
                a[j * N + 5 + d] = cross;
                a[(5 + d) * N + j] = cross;
                // Swing-foot Jacobian and its transpose.
                let jf = de[d] * foot[j];
                a[(7 + d) * N + j] = jf;
                a[j * N + 7 + d] = -jf;
            }
        }
        for d in 0..2 {
            a[(5 + d) * N + 5 + d] = T::cst(b.total_mass);
            a[(7 + d) * N + 5 + d] = T::cst(1.0);
            a[(5 + d) * N + 7 + d] = T::cst(-1.0);
        }
        // Pre-impact momentum M_e q̇_e⁻ with a stationary stance foot.
        for r in 0..7 {
            let mut acc = T::cst(0.0);
            for k in 0..5 {
                acc = acc + a[r * N + k] * qd[k];
            }
            rhs[r] = acc;
        }
        let sol = solve(a, rhs, N, 1)?;
        let mut out = Self::angle_map(q);
        out.extend(Self::angle_map(&sol[..5]));
        Some(out)
    }
}

impl JumpMap for HeelStrike {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 10 || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("heel strike needs a finite 10-dimensional state".into()));
        }
        self.eval(x).ok_or_else(|| Error::Numerical("singular impact system".into()))
    }

    fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != 10 || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("heel strike needs a finite 10-dimensional state".into()));
        }
        let xd = Dual::<10>::seed(x);
        let out = self.eval(&xd).ok_or_else(|| Error::Numerical("singular impact system".into()))?;
        Ok(unpack(&out))
    }
}
