//! Forward-mode dual numbers used to obtain exact state Jacobians of the
//! dynamics without hand-derived partials.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar field the dynamics are written against.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// Seeds the `i`-th input direction.
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    pub fn seed(x: &[f64]) -> Vec<Self> {
        assert_eq!(x.len(), N, "dual seed dimension");
        x.iter().enumerate().map(|(i, &v)| Self::var(v, i)).collect()
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for i in 0..N {
            self.d[i] += o.d[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for i in 0..N {
            self.d[i] -= o.d[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v / o.v;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for i in 0..N {
            self.d[i] = -self.d[i];
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.v += o;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, o: f64) -> Self {
        self.v *= o;
        for i in 0..N {
            self.d[i] *= o;
        }
        self
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        let c = self.v.cos();
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= c);
        Self { v: self.v.sin(), d }
    }
    fn cos(self) -> Self {
        let s = -self.v.sin();
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= s);
        Self { v: self.v.cos(), d }
    }
}

/// Splits dual outputs into values and a row-major Jacobian.
pub fn unpack<const N: usize>(out: &[Dual<N>]) -> (Vec<f64>, Vec<f64>) {
    let vals = out.iter().map(|x| x.v).collect();
    let mut jac = Vec::with_capacity(out.len() * N);
    for x in out {
        jac.extend_from_slice(&x.d);
    }
    (vals, jac)
}

/// Solves `a · x = b` for row-major square `a` (`n x n`) and `b` (`n x k`)
/// by Gaussian elimination with partial pivoting. Returns `None` when a
/// pivot vanishes.
pub fn solve<T: Real>(mut a: Vec<T>, mut b: Vec<T>, n: usize, k: usize) -> Option<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n * k);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].val().abs().total_cmp(&a[j * n + col].val().abs()))?;
        if a[pivot * n + col].val().abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(pivot * n + c, col * n + c);
            }
            for c in 0..k {
                b.swap(pivot * k + c, col * k + c);
            }
        }
        let p = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            if f.val() == 0.0 {
                continue;
            }
            for c in col..n {
                a[row * n + c] = a[row * n + c] - f * a[col * n + c];
            }
            for c in 0..k {
                b[row * k + c] = b[row * k + c] - f * b[col * k + c];
            }
        }
    }
    for row in (0..n).rev() {
        for c in 0..k {
            let mut acc = b[row * k + c];
            for j in row + 1..n {
                acc = acc - a[row * n + j] * b[j * k + c];
            }
            b[row * k + c] = acc / a[row * n + row];
        }
    }
    Some(b)
}
