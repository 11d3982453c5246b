//! Structured matrices of the panel AR(1) model and the small dense algebra
//! needed to verify their identities.
//!
//! Everything here is generic over a [`Field`], so the same constructors run
//! in `f64` and in exact `BigRational` arithmetic. Indices in doc comments are
//! 1-based, storage is 0-based and row-major.

use std::fmt::Debug;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use num::bigint::BigInt;
use num::rational::BigRational;
use num::traits::{FromPrimitive, Num, Signed, ToPrimitive};

use crate::error::{Error, Result};

pub trait Field: Clone + Debug + PartialOrd + Num + Signed + FromPrimitive {}
impl<T: Clone + Debug + PartialOrd + Num + Signed + FromPrimitive> Field for T {}

pub type Rational = BigRational;

fn int<F: Field>(k: i64) -> F {
    F::from_i64(k).expect("integer fits field")
}

pub fn frac<F: Field>(p: i64, q: i64) -> F {
    int::<F>(p) / int::<F>(q)
}

pub fn rational(p: i64, q: i64) -> Rational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<F>,
}

impl<F: Field> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { F::one() } else { F::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn column(v: &[F]) -> Self {
        Mat { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].clone())
    }

    pub fn matmul(&self, o: &Self) -> Self {
        assert_eq!(self.cols, o.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = &self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                for j in 0..o.cols {
                    let b = &o[(k, j)];
                    if !b.is_zero() {
                        let prod = a.clone() * b.clone();
                        let cell = &mut out[(i, j)];
                        *cell = cell.clone() + prod;
                    }
                }
            }
        }
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)].clone() + o[(i, j)].clone())
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)].clone() - o[(i, j)].clone())
    }

    pub fn scale(&self, c: &F) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)].clone() * c.clone())
    }

    pub fn kron(&self, o: &Self) -> Self {
        Self::from_fn(self.rows * o.rows, self.cols * o.cols, |i, j| {
            self[(i / o.rows, j / o.cols)].clone() * o[(i % o.rows, j % o.cols)].clone()
        })
    }

    pub fn trace(&self) -> F {
        (0..self.rows.min(self.cols)).fold(F::zero(), |acc, i| acc + self[(i, i)].clone())
    }

    pub fn col_vec(&self, j: usize) -> Vec<F> {
        (0..self.rows).map(|i| self[(i, j)].clone()).collect()
    }

    pub fn max_abs_diff(&self, o: &Self) -> F {
        self.data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| (a.clone() - b.clone()).abs())
            .fold(F::zero(), |m, x| if x > m { x } else { m })
    }

    /// Stack of selected rows.
    pub fn rows_of(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), self.cols, |i, j| self[(idx[i], j)].clone())
    }

    /// Vertical concatenation.
    pub fn vstack(&self, o: &Self) -> Self {
        assert_eq!(self.cols, o.cols);
        let mut data = self.data.clone();
        data.extend(o.data.iter().cloned());
        Mat { rows: self.rows + o.rows, cols: self.cols, data }
    }

    /// Solves `self * X = rhs` by Gauss–Jordan elimination with partial pivoting.
    pub fn solve(&self, rhs: &Self) -> Result<Self> {
        if self.rows != self.cols || rhs.rows != self.rows {
            return Err(Error::Shape(format!(
                "solve needs square system, got {}x{} with rhs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = self.rows;
        let m = rhs.cols;
        let mut a = self.clone();
        let mut b = rhs.clone();
        for k in 0..n {
            let mut piv = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..n {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best.is_zero() {
                return Err(Error::Singular("matrix is singular".into()));
            }
            if piv != k {
                for j in 0..n {
                    a.data.swap(k * n + j, piv * n + j);
                }
                for j in 0..m {
                    b.data.swap(k * m + j, piv * m + j);
                }
            }
            // Columns left of k are already eliminated in row k.
            let d = a[(k, k)].clone();
            let acols: Vec<usize> = (k..n).filter(|&j| !a[(k, j)].is_zero()).collect();
            for &j in &acols {
                a[(k, j)] = a[(k, j)].clone() / d.clone();
            }
            let bcols: Vec<usize> = (0..m).filter(|&j| !b[(k, j)].is_zero()).collect();
            for &j in &bcols {
                b[(k, j)] = b[(k, j)].clone() / d.clone();
            }
            for i in 0..n {
                if i == k || a[(i, k)].is_zero() {
                    continue;
                }
                let f = a[(i, k)].clone();
                for &j in &acols {
                    let t = a[(k, j)].clone() * f.clone();
                    a[(i, j)] = a[(i, j)].clone() - t;
                }
                for &j in &bcols {
                    let t = b[(k, j)].clone() * f.clone();
                    b[(i, j)] = b[(i, j)].clone() - t;
                }
            }
        }
        Ok(b)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.solve(&Self::identity(self.rows))
    }

    pub fn map<G: Field>(&self, f: impl Fn(&F) -> G) -> Mat<G> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

impl<F: Field + ToPrimitive> Mat<F> {
    pub fn to_f64(&self) -> Mat<f64> {
        self.map(|x| x.to_f64().unwrap_or(f64::NAN))
    }
}

impl Mat<f64> {
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl<F> Index<(usize, usize)> for Mat<F> {
    type Output = F;
    fn index(&self, (i, j): (usize, usize)) -> &F {
        &self.data[i * self.cols + j]
    }
}

impl<F> IndexMut<(usize, usize)> for Mat<F> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        &mut self.data[i * self.cols + j]
    }
}

/// `Δ_n(a, b, c)`: corner `a`, diagonal `b`, off-diagonal `c`.
pub fn tridiag<F: Field>(n: usize, a: F, b: F, c: F) -> Result<Mat<F>> {
    if n == 0 {
        return Err(Error::Domain("tridiagonal dimension must be positive".into()));
    }
    Ok(Mat::from_fn(n, n, |i, j| {
        if i == j {
            if i == 0 { a.clone() } else { b.clone() }
        } else if i.abs_diff(j) == 1 {
            c.clone()
        } else {
            F::zero()
        }
    }))
}

/// `G_n = Δ_n(1, 2, -1)`.
pub fn g_matrix<F: Field>(n: usize) -> Result<Mat<F>> {
    tridiag(n, F::one(), int(2), int(-1))
}

/// `H_n = Δ_n(0, -2, 1)`.
pub fn h_matrix<F: Field>(n: usize) -> Result<Mat<F>> {
    tridiag(n, F::zero(), int(-2), F::one())
}

/// `A_n = Δ_n(-(n-1)/2, -(n-2)/3, (n+1)/6)`.
pub fn a_matrix<F: Field>(n: usize) -> Result<Mat<F>> {
    let k = n as i64;
    tridiag(n, frac(-(k - 1), 2), frac(-(k - 2), 3), frac(k + 1, 6))
}

/// `F_n = (n, n-1, ..., 1)' ⊗ e_1'`.
pub fn f_matrix<F: Field>(n: usize) -> Mat<F> {
    Mat::from_fn(n, n, |i, j| if j == 0 { int((n - i) as i64) } else { F::zero() })
}

/// Closed-form inverse of `G_T`: entry `(i, j) = T + 1 - max(i, j)`.
pub fn gt_inverse<F: Field>(t: usize) -> Result<Mat<F>> {
    if t < 2 {
        return Err(Error::Domain(format!("gt_inverse needs T >= 2, got {t}")));
    }
    Ok(Mat::from_fn(t, t, |i, j| int((t - i.max(j)) as i64)))
}

/// First-difference matrix `D`, `(T-2) x (T-1)`.
pub fn diff_matrix<F: Field>(t: usize) -> Result<Mat<F>> {
    check_t(t)?;
    Ok(Mat::from_fn(t - 2, t - 1, |i, j| {
        if j == i {
            -F::one()
        } else if j == i + 1 {
            F::one()
        } else {
            F::zero()
        }
    }))
}

/// Within projection `Q = I - ιι'/(T-1)`.
pub fn within<F: Field>(t: usize) -> Result<Mat<F>> {
    check_t(t)?;
    let n = t - 1;
    let w = frac::<F>(1, n as i64);
    Ok(Mat::from_fn(n, n, |i, j| if i == j { F::one() - w.clone() } else { -w.clone() }))
}

/// Lag filter `P_ρ`: `(i, j) = ρ^(i-j-1)` below the diagonal.
pub fn lag_filter<F: Field>(t: usize, rho: F) -> Result<Mat<F>> {
    check_t(t)?;
    let n = t - 1;
    let mut pw = vec![F::one()];
    for k in 1..n {
        let next = pw[k - 1].clone() * rho.clone();
        pw.push(next);
    }
    Ok(Mat::from_fn(n, n, |i, j| if i > j { pw[i - j - 1].clone() } else { F::zero() }))
}

/// Band matrix `D_r`: unit diagonal, `-r` on the first subdiagonal, size `n`.
pub fn band<F: Field>(n: usize, r: F) -> Mat<F> {
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            F::one()
        } else if i == j + 1 {
            -r.clone()
        } else {
            F::zero()
        }
    })
}

fn check_t(t: usize) -> Result<()> {
    if t < 3 {
        return Err(Error::Domain(format!("need T >= 3, got {t}")));
    }
    Ok(())
}

pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Column-major stacking of the lower triangle.
pub fn vech<F: Field>(a: &Mat<F>) -> Result<Vec<F>> {
    if a.rows != a.cols {
        return Err(Error::Shape(format!("vech needs a square matrix, got {}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut v = Vec::with_capacity(vech_len(n));
    for j in 0..n {
        for i in j..n {
            v.push(a[(i, j)].clone());
        }
    }
    Ok(v)
}

pub fn unvech<F: Field>(v: &[F]) -> Result<Mat<F>> {
    let n = ((((8 * v.len() + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if vech_len(n) != v.len() {
        return Err(Error::Shape(format!("length {} is not triangular", v.len())));
    }
    let mut a = Mat::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            a[(i, j)] = v[k].clone();
            a[(j, i)] = v[k].clone();
            k += 1;
        }
    }
    Ok(a)
}

/// Column-major vectorization.
pub fn vec<F: Field>(a: &Mat<F>) -> Vec<F> {
    let mut v = Vec::with_capacity(a.rows * a.cols);
    for j in 0..a.cols {
        for i in 0..a.rows {
            v.push(a[(i, j)].clone());
        }
    }
    v
}

/// Position of `(i, j)`, `i >= j`, inside `vech` of an `n x n` matrix.
pub fn vech_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * n - j * (j + 1) / 2 + i
}

#[derive(Clone, Debug)]
pub struct DuplicationPair<F> {
    pub n: usize,
    pub du: Mat<F>,
    pub du_plus: Mat<F>,
}

pub fn duplication<F: Field>(n: usize) -> Result<DuplicationPair<F>> {
    if n == 0 {
        return Err(Error::Domain("duplication needs n >= 1".into()));
    }
    let m = vech_len(n);
    let mut du = Mat::zeros(n * n, m);
    for j in 0..n {
        for i in 0..n {
            du[(j * n + i, vech_index(n, i, j))] = F::one();
        }
    }
    // D'D is diagonal: 1 for diagonal elements, 2 otherwise.
    let half = frac::<F>(1, 2);
    let mut du_plus = du.transpose();
    for j in 0..n {
        for i in j + 1..n {
            let r = vech_index(n, i, j);
            for c in 0..n * n {
                du_plus[(r, c)] = du_plus[(r, c)].clone() * half.clone();
            }
        }
    }
    Ok(DuplicationPair { n, du, du_plus })
}

/// `M_n = 2 D⁺ (G ⊗ G) D⁺'`.
pub fn m_matrix<F: Field>(n: usize) -> Result<Mat<F>> {
    let g = g_matrix::<F>(n)?;
    let d = duplication::<F>(n)?;
    Ok(d.du_plus.matmul(&g.kron(&g)).matmul(&d.du_plus.transpose()).scale(&int(2)))
}

/// Closed-form `M_n⁻¹ = ½ D'(G⁻¹ ⊗ G⁻¹) D`.
pub fn m_inverse<F: Field>(n: usize) -> Result<Mat<F>> {
    let gi = gt_inverse::<F>(n)?;
    let d = duplication::<F>(n)?;
    Ok(d.du.transpose().matmul(&gi.kron(&gi)).matmul(&d.du).scale(&frac(1, 2)))
}

#[derive(Clone, Debug)]
pub struct SelectorP<F> {
    pub n: usize,
    pub p: Mat<F>,
    pub g: Vec<F>,
}

/// `P_n = (0 g_n I)` with `(1, -1, g_n')' = vech(G_n)`.
pub fn selector<F: Field>(n: usize) -> Result<SelectorP<F>> {
    if n < 2 {
        return Err(Error::Domain(format!("selector needs n >= 2, got {n}")));
    }
    let vg = vech(&g_matrix::<F>(n)?)?;
    let g = vg[2..].to_vec();
    let pn = g.len();
    let p = Mat::from_fn(pn, vech_len(n), |i, j| match j {
        0 => F::zero(),
        1 => g[i].clone(),
        _ => {
            if j - 2 == i {
                F::one()
            } else {
                F::zero()
            }
        }
    });
    Ok(SelectorP { n, p, g })
}

/// `P̄_n = (Z_n M_n⁻¹ ; P_n)`.
pub fn p_bar<F: Field>(n: usize) -> Result<Mat<F>> {
    let sel = selector::<F>(n)?;
    let m = vech_len(n);
    let z = Mat::from_fn(2, m, |i, j| match (i, j) {
        (0, 0) | (1, 1) => F::one(),
        (1, j) if j >= 2 => -sel.g[j - 2].clone(),
        _ => F::zero(),
    });
    Ok(z.matmul(&m_inverse::<F>(n)?).vstack(&sel.p))
}

/// `w_n` with `(1, 0, w_n')' = vech(I_n)`.
pub fn w_vector<F: Field>(n: usize) -> Result<Vec<F>> {
    let v = vech(&Mat::<F>::identity(n))?;
    Ok(v[2..].to_vec())
}

pub fn ones<F: Field>(n: usize) -> Mat<F> {
    Mat::from_fn(n, 1, |_, _| F::one())
}

/// The eight trace identities at `ρ = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceIdentities<F> {
    pub tr_pqp: F,
    pub tr_qp: F,
    pub iota_ppi: F,
    pub iota_pi: F,
    pub tr_pp: F,
    pub tr_pppp: F,
    pub tr_qpqp: F,
    pub tr_ppqp: F,
}

pub fn trace_identities<F: Field>(t: usize) -> Result<TraceIdentities<F>> {
    let p = lag_filter::<F>(t, F::one())?;
    let q = within::<F>(t)?;
    let i = ones::<F>(t - 1);
    let pt = p.transpose();
    let ptp = pt.matmul(&p);
    let qp = q.matmul(&p);
    let pi = p.matmul(&i);
    Ok(TraceIdentities {
        tr_pqp: pt.matmul(&q).matmul(&p).trace(),
        tr_qp: qp.trace(),
        iota_ppi: pi.transpose().matmul(&pi)[(0, 0)].clone(),
        iota_pi: i.transpose().matmul(&pi)[(0, 0)].clone(),
        tr_pp: ptp.trace(),
        tr_pppp: ptp.matmul(&ptp).trace(),
        tr_qpqp: qp.matmul(&qp).trace(),
        tr_ppqp: ptp.matmul(&qp).trace(),
    })
}

/// Closed forms of the trace identities.
pub fn trace_identities_closed<F: Field>(t: usize) -> TraceIdentities<F> {
    let k = t as i64;
    TraceIdentities {
        tr_pqp: frac((k - 2) * k, 6),
        tr_qp: frac(-(k - 2), 2),
        iota_ppi: frac((k - 2) * (k - 1) * (2 * k - 3), 6),
        iota_pi: frac((k - 2) * (k - 1), 2),
        tr_pp: frac((k - 2) * (k - 1), 2),
        tr_pppp: frac((k - 2) * (k - 1) * (k * k - 3 * k + 3), 6),
        tr_qpqp: frac(-(k - 2) * (k - 6), 12),
        tr_ppqp: frac(-(k - 2) * k * (k + 1), 24),
    }
}
