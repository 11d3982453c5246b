//! Scalars for exact higher-order derivatives.
//!
//! Every likelihood routine that needs derivatives is written once over
//! [`Real`] and evaluated either on `f64` or on a truncated Taylor series
//! [`Jet`]. Jets nest, so `Jet<Jet<f64, 2>, 2>` carries the mixed second
//! partial along two directions.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn cst(x: f64) -> Self;
    /// Leading (order zero) value.
    fn re(&self) -> f64;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
    fn square(self) -> Self {
        self * self
    }
    fn powi(self, k: u32) -> Self {
        let mut out = Self::one();
        for _ in 0..k {
            out = out * self;
        }
        out
    }
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn re(&self) -> f64 {
        *self
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, k: u32) -> Self {
        f64::powi(self, k as i32)
    }
}

/// Truncated Taylor series `c[0] + c[1] t + ... + c[K-1] t^(K-1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<S: Real, const K: usize> {
    pub c: [S; K],
}

impl<S: Real, const K: usize> Jet<S, K> {
    pub fn constant(x: S) -> Self {
        let mut c = [S::zero(); K];
        c[0] = x;
        Jet { c }
    }

    /// The expansion variable `t` itself.
    pub fn t() -> Self {
        let mut c = [S::zero(); K];
        if K > 1 {
            c[1] = S::one();
        }
        Jet { c }
    }

    /// `x + t`.
    pub fn var(x: S) -> Self {
        let mut j = Self::t();
        j.c[0] = x;
        j
    }

    /// k-th derivative at t = 0.
    pub fn deriv(&self, k: usize) -> S {
        self.c[k].scale(factorial(k))
    }
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |a, b| a * b as f64)
}

impl<S: Real, const K: usize> Add for Jet<S, K> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        for k in 0..K {
            self.c[k] += o.c[k];
        }
        self
    }
}

impl<S: Real, const K: usize> Sub for Jet<S, K> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        for k in 0..K {
            self.c[k] -= o.c[k];
        }
        self
    }
}

impl<S: Real, const K: usize> Neg for Jet<S, K> {
    type Output = Self;
    fn neg(mut self) -> Self {
        for k in 0..K {
            self.c[k] = -self.c[k];
        }
        self
    }
}

impl<S: Real, const K: usize> Mul for Jet<S, K> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut c = [S::zero(); K];
        for i in 0..K {
            for j in 0..K - i {
                c[i + j] += self.c[i] * o.c[j];
            }
        }
        Jet { c }
    }
}

impl<S: Real, const K: usize> Div for Jet<S, K> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let mut q = [S::zero(); K];
        let inv0 = S::one() / o.c[0];
        for k in 0..K {
            let mut acc = self.c[k];
            for i in 1..=k {
                acc -= o.c[i] * q[k - i];
            }
            q[k] = acc * inv0;
        }
        Jet { c: q }
    }
}

impl<S: Real, const K: usize> AddAssign for Jet<S, K> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}
impl<S: Real, const K: usize> SubAssign for Jet<S, K> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}
impl<S: Real, const K: usize> MulAssign for Jet<S, K> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}
impl<S: Real, const K: usize> DivAssign for Jet<S, K> {
    fn div_assign(&mut self, o: Self) {
        *self = *self / o;
    }
}

impl<S: Real, const K: usize> Real for Jet<S, K> {
    fn cst(x: f64) -> Self {
        Self::constant(S::cst(x))
    }
    fn re(&self) -> f64 {
        self.c[0].re()
    }
    fn scale(mut self, a: f64) -> Self {
        for k in 0..K {
            self.c[k] = self.c[k].scale(a);
        }
        self
    }
    fn ln(self) -> Self {
        let f = self.c;
        let mut g = [S::zero(); K];
        g[0] = f[0].ln();
        let inv0 = S::one() / f[0];
        for k in 1..K {
            let mut acc = f[k];
            for j in 1..k {
                acc -= (g[j] * f[k - j]).scale(j as f64 / k as f64);
            }
            g[k] = acc * inv0;
        }
        Jet { c: g }
    }
    fn exp(self) -> Self {
        let f = self.c;
        let mut h = [S::zero(); K];
        h[0] = f[0].exp();
        for k in 1..K {
            let mut acc = S::zero();
            for j in 1..=k {
                acc += (f[j] * h[k - j]).scale(j as f64);
            }
            h[k] = acc.scale(1.0 / k as f64);
        }
        Jet { c: h }
    }
    fn sqrt(self) -> Self {
        let f = self.c;
        let mut s = [S::zero(); K];
        s[0] = f[0].sqrt();
        let inv = S::one() / s[0].scale(2.0);
        for k in 1..K {
            let mut acc = f[k];
            for j in 1..k {
                acc -= s[j] * s[k - j];
            }
            s[k] = acc * inv;
        }
        Jet { c: s }
    }
}

/// A scalar function of a parameter vector that can be evaluated on any [`Real`].
pub trait ScalarFn {
    fn eval<S: Real>(&self, x: &[S]) -> S;
}

type J2 = Jet<f64, 2>;

/// Gradient by forward-mode jets, one pass per coordinate.
pub fn gradient<F: ScalarFn>(f: &F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let xs: Vec<J2> = x
                .iter()
                .enumerate()
                .map(|(m, &v)| if m == j { J2::var(v) } else { J2::cst(v) })
                .collect();
            f.eval(&xs).c[1]
        })
        .collect()
}

/// [`gradient`] at a point whose coordinates are themselves jets.
pub fn gradient_over<B: Real, F: ScalarFn>(f: &F, x: &[B]) -> Vec<B> {
    (0..x.len())
        .map(|j| {
            let xs: Vec<Jet<B, 2>> = x
                .iter()
                .enumerate()
                .map(|(m, &v)| if m == j { Jet::var(v) } else { Jet::constant(v) })
                .collect();
            f.eval(&xs).c[1]
        })
        .collect()
}

/// Hessian from nested jets: the `s t` coefficient of `f(x + s e_j + t e_k)`.
pub fn hessian<F: ScalarFn>(f: &F, x: &[f64]) -> nalgebra::DMatrix<f64> {
    let h = hessian_over(f, x);
    nalgebra::DMatrix::from_fn(x.len(), x.len(), |i, j| h[i][j])
}

/// [`hessian`] at a point whose coordinates are themselves jets.
pub fn hessian_over<B: Real, F: ScalarFn>(f: &F, x: &[B]) -> Vec<Vec<B>> {
    type Two<B> = Jet<Jet<B, 2>, 2>;
    let d = x.len();
    let mut h = vec![vec![B::zero(); d]; d];
    let s = Two::<B>::t();
    let t = Two::<B>::constant(Jet::t());
    for j in 0..d {
        for k in j..d {
            let xs: Vec<Two<B>> = x
                .iter()
                .enumerate()
                .map(|(m, &v)| {
                    let mut z = Two::constant(Jet::constant(v));
                    if m == j {
                        z += s;
                    }
                    if m == k {
                        z += t;
                    }
                    z
                })
                .collect();
            let v = f.eval(&xs).c[1].c[1];
            h[j][k] = v;
            h[k][j] = v;
        }
    }
    h
}

/// Taylor coefficients of `f(x + t e_j)` up to degree `K-1`.
pub fn directional<F: ScalarFn, const K: usize>(f: &F, x: &[f64], j: usize) -> [f64; K] {
    let xs: Vec<Jet<f64, K>> = x
        .iter()
        .enumerate()
        .map(|(m, &v)| if m == j { Jet::var(v) } else { Jet::cst(v) })
        .collect();
    f.eval(&xs).c
}
