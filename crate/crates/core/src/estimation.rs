//! Quasi-ML fits, unrestricted or under linear restrictions on `θ_n`.
//!
//! All objectives run on second-moment statistics of the panel, so one
//! evaluation costs `O(T²)` regardless of `N`. With a common variance the
//! variance block and `π̃` have closed forms given `ρ`, and only `ρ` is
//! searched. Otherwise BFGS runs on unconstrained internal coordinates
//! (log variances, a shifted log for `σ̃_v²`) with a simplex fallback, a
//! Newton polish, and a fixed multistart grid.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::neldermead::NelderMead;
use argmin::solver::quasinewton::BFGS;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::PanelData;
use crate::error::{Error, Result};
use crate::jet::{gradient, hessian, Real, ScalarFn};
use crate::likelihood::{
    admissible, loglik, map_theta, score_total, unmap_theta, Coords, Model, ModelSpec, Variance,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `H₀: A θ_n = a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Restriction {
    pub a_mat: DMatrix<f64>,
    pub a: DVector<f64>,
}

impl Restriction {
    pub fn new(a_mat: DMatrix<f64>, a: DVector<f64>) -> Result<Self> {
        if a_mat.nrows() != a.len() || a_mat.nrows() == 0 {
            return Err(Error::Shape(format!("A is {}x{}, a has length {}", a_mat.nrows(), a_mat.ncols(), a.len())));
        }
        let sv = a_mat.clone().svd(false, false).singular_values;
        let tol = 1e-10 * sv.max().max(1e-300);
        if sv.iter().filter(|&&s| s > tol).count() < a_mat.nrows() {
            return Err(Error::Domain("restriction matrix A must have full row rank".into()));
        }
        Ok(Restriction { a_mat, a })
    }

    /// `ρ = value`.
    pub fn rho(spec: &ModelSpec, value: f64) -> Self {
        let mut a_mat = DMatrix::zeros(1, spec.dim());
        a_mat[(0, 0)] = 1.0;
        Restriction { a_mat, a: DVector::from_element(1, value) }
    }

    pub fn df(&self) -> usize {
        self.a_mat.nrows()
    }

    /// The value of `ρ` if the restriction only fixes `ρ`.
    pub fn fixed_rho(&self) -> Option<f64> {
        let only_rho = self.a_mat.nrows() == 1
            && self.a_mat[(0, 0)] != 0.0
            && self.a_mat.iter().skip(1).all(|&v| v == 0.0);
        only_rho.then(|| self.a[0] / self.a_mat[(0, 0)])
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.a_mat.ncols() != spec.dim() {
            return Err(Error::Shape(format!(
                "restriction has {} columns, model has {} parameters",
                self.a_mat.ncols(),
                spec.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: u64,
    /// Convergence needs the projected gradient ∞-norm below `grad_tol · max(1, |l|)`.
    pub grad_tol: f64,
    pub rho_starts: Vec<f64>,
    /// Accept `σ̃_v² < 0` (with `Φ` positive definite) when the nonnegativity bound binds.
    pub allow_relaxed: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iters: 500, grad_tol: 1e-8, rho_starts: vec![0.0, 0.5, 0.9, 0.99, 1.0], allow_relaxed: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `σ̃_v² ≥ 0` at the optimum.
    Interior,
    /// Optimum in the widened region `σ̃_v² < 0`, `Φ` positive definite.
    Relaxed,
    /// `σ̃_v²` held at zero.
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFit {
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// `∂l/∂σ̃_v²` at the clamped fit; nonpositive when the bound is a KKT point.
    pub kkt_score: f64,
    pub kkt_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Structural estimate `(ρ, σ̃_v², ζ, π̃)`.
    pub theta_hat: Vec<f64>,
    /// The same point in reparametrized coordinates, when `ρ > 0`.
    pub theta_n: Option<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub n_starts_used: usize,
    pub active_bounds: Vec<String>,
    pub gradient_norm: f64,
    pub regime: Regime,
    pub boundary: Option<BoundaryFit>,
}

impl FitResult {
    pub fn rho(&self) -> f64 {
        self.theta_hat[0]
    }
}

/// Second moments of `(a, b, y₁)`, where `u = a - ρ b - π̃ y₁ ι`.
#[derive(Clone, Debug)]
pub struct Moments {
    pub spec: ModelSpec,
    pub n_obs: usize,
    saa: DMatrix<f64>,
    sab: DMatrix<f64>,
    sbb: DMatrix<f64>,
    ga: DVector<f64>,
    gb: DVector<f64>,
    m2: f64,
    floor: f64,
}

impl Moments {
    pub fn new(spec: &ModelSpec, data: &PanelData) -> Result<Self> {
        spec.check_data(data)?;
        let n = spec.n();
        let mut saa = DMatrix::zeros(n, n);
        let mut sab = DMatrix::zeros(n, n);
        let mut sbb = DMatrix::zeros(n, n);
        let mut ga = DVector::zeros(n);
        let mut gb = DVector::zeros(n);
        let mut m2 = 0.0;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for i in 0..data.n {
            let y = data.row(i);
            let c = if spec.model == Model::Fe { y[0] } else { 0.0 };
            for k in 0..n {
                a[k] = y[k + 1] - c;
                b[k] = y[k] - c;
            }
            for r in 0..n {
                for s in 0..n {
                    saa[(r, s)] += a[r] * a[s];
                    sab[(r, s)] += a[r] * b[s];
                    sbb[(r, s)] += b[r] * b[s];
                }
                ga[r] += y[0] * a[r];
                gb[r] += y[0] * b[r];
            }
            m2 += y[0] * y[0];
        }
        let inv = 1.0 / data.n as f64;
        let scale = saa.trace() * inv / n as f64;
        Ok(Moments {
            spec: *spec,
            n_obs: data.n,
            saa: saa * inv,
            sab: sab * inv,
            sbb: sbb * inv,
            ga: ga * inv,
            gb: gb * inv,
            m2: m2 * inv,
            floor: 1e-10 * scale.max(f64::MIN_POSITIVE),
        })
    }

    /// Variance lower bound that keeps degenerate panels finite.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    fn w<S: Real>(&self, rho: S, pi: S, r: usize, s: usize) -> S {
        let mut v = S::cst(self.saa[(r, s)]) - rho * S::cst(self.sab[(r, s)] + self.sab[(s, r)])
            + rho * rho * S::cst(self.sbb[(r, s)]);
        if self.spec.model == Model::Re {
            v += pi * (rho * S::cst(self.gb[r] + self.gb[s]) - S::cst(self.ga[r] + self.ga[s]))
                + pi * pi * S::cst(self.m2);
        }
        v
    }

    /// Average log-likelihood per individual at structural `th`.
    pub fn loglik<S: Real>(&self, th: &[S]) -> S {
        let spec = &self.spec;
        let n = spec.n();
        let pi = spec.pi_index().map_or(S::zero(), |i| th[i]);
        let s = th[1];
        let mut ip = Vec::with_capacity(n);
        let mut c = S::zero();
        let mut logpsi = S::zero();
        for k in 0..n {
            let psi = match spec.variance {
                Variance::Tsh => th[2],
                Variance::TimeHet => th[2 + k],
            };
            let v = S::one() / psi;
            c += v;
            logpsi += psi.ln();
            ip.push(v);
        }
        let den = S::one() + s * c;
        let mut tr = S::zero();
        let mut quad = S::zero();
        for r in 0..n {
            for q in 0..n {
                let w = self.w(th[0], pi, r, q);
                if r == q {
                    tr += w * ip[r];
                }
                quad += ip[r] * ip[q] * w;
            }
        }
        S::cst(-0.5 * n as f64 * LN_2PI) - (logpsi + den.ln() + tr - s * quad / den).scale(0.5)
    }

    /// `tr W`, `ι'Wι` at `ρ`, with `π̃` concentrated out for random effects, and that `π̃`.
    fn concentrated<S: Real>(&self, rho: S) -> (S, S, S) {
        let n = self.spec.n();
        let mut tr = S::zero();
        let mut tot = S::zero();
        for r in 0..n {
            for q in 0..n {
                let w = self.w(rho, S::zero(), r, q);
                if r == q {
                    tr += w;
                }
                tot += w;
            }
        }
        if self.spec.model == Model::Re && self.m2 > 0.0 {
            let mut ig = S::zero();
            for r in 0..n {
                ig += S::cst(self.ga[r]) - rho * S::cst(self.gb[r]);
            }
            let pi = ig / S::cst(n as f64 * self.m2);
            // Removing π̃ y₁ι shifts each residual along ι only.
            let shift = ig * ig / S::cst(self.m2);
            (tr - shift / S::cst(n as f64), tot - shift, pi)
        } else {
            (tr, tot, S::zero())
        }
    }

    /// Closed-form common-variance fit at `ρ`. `clamp` holds `σ̃_v² = 0`.
    pub fn tsh_at<S: Real>(&self, rho: S, clamp: bool) -> Vec<S> {
        let n = self.spec.n() as f64;
        let fl = S::cst(self.floor);
        let (tr, tot, pi) = self.concentrated(rho);
        let (sigma, s) = if clamp {
            (tr / S::cst(n) + fl, S::zero())
        } else {
            let sigma = (tr - tot / S::cst(n)) / S::cst(n - 1.0) + fl;
            let lambda = tot / S::cst(n) + fl;
            (sigma, (lambda - sigma) / S::cst(n))
        };
        let mut th = vec![rho, s, sigma];
        if self.spec.model == Model::Re {
            th.push(pi);
        }
        th
    }

    /// `ρ` minimizing the within-period residual variance.
    fn within_rho(&self) -> f64 {
        let n = self.spec.n();
        let q = DMatrix::from_fn(n, n, |i, j| f64::from(i == j) - 1.0 / n as f64);
        let c1 = (&q * (&self.sab + self.sab.transpose())).trace() / 2.0;
        let c2 = (&q * &self.sbb).trace();
        if c2 > 0.0 {
            c1 / c2
        } else {
            0.0
        }
    }
}

/// A parametrization of part of the admissible region.
trait Chart: ScalarFn + Sync {
    fn dim(&self) -> usize;
    /// Structural parameter at `x`, or `None` outside the admissible region.
    fn theta(&self, x: &[f64]) -> Option<Vec<f64>>;
}

/// Common variance, profiled; `x = [ρ]`.
struct Profile<'a> {
    m: &'a Moments,
    clamp: bool,
}

impl ScalarFn for Profile<'_> {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        self.m.loglik(&self.m.tsh_at(x[0], self.clamp))
    }
}

impl Chart for Profile<'_> {
    fn dim(&self) -> usize {
        1
    }
    fn theta(&self, x: &[f64]) -> Option<Vec<f64>> {
        let th = self.m.tsh_at(x[0], self.clamp);
        admissible(&self.m.spec, &th).then_some(th)
    }
}

/// Log-variance coordinates; `ρ` optionally held fixed, `σ̃_v²` optionally held at zero.
struct Internal<'a> {
    m: &'a Moments,
    rho: Option<f64>,
    clamp: bool,
}

impl Internal<'_> {
    fn n_var(&self) -> usize {
        self.m.spec.n_zeta() + usize::from(!self.clamp)
    }

    fn build<S: Real>(&self, x: &[S]) -> Vec<S> {
        let spec = &self.m.spec;
        let n = spec.n();
        let fl = S::cst(self.m.floor);
        let mut k = 0;
        let rho = match self.rho {
            Some(r) => S::cst(r),
            None => {
                k = 1;
                x[0]
            }
        };
        let zeta: Vec<S> = (0..spec.n_zeta()).map(|j| fl + x[k + j].exp()).collect();
        k += spec.n_zeta();
        let s = if self.clamp {
            S::zero()
        } else {
            let v = x[k];
            k += 1;
            match spec.variance {
                Variance::Tsh => (v.exp() - zeta[0]) / S::cst(n as f64),
                Variance::TimeHet => {
                    let mut c = S::zero();
                    for z in &zeta {
                        c += S::one() / *z;
                    }
                    v.exp() - S::one() / c
                }
            }
        };
        let mut th = vec![rho, s];
        th.extend(zeta);
        if spec.model == Model::Re {
            th.push(x[k]);
        }
        th
    }

    fn coords(&self, th: &[f64]) -> Option<Vec<f64>> {
        let spec = &self.m.spec;
        let n = spec.n();
        let mut x = Vec::new();
        if self.rho.is_none() {
            x.push(th[0]);
        }
        let zeta = &th[2..2 + spec.n_zeta()];
        for &z in zeta {
            x.push((z - self.m.floor).max(1e-3 * z).ln());
        }
        if !self.clamp {
            let v = match spec.variance {
                Variance::Tsh => zeta[0] + n as f64 * th[1],
                Variance::TimeHet => th[1] + 1.0 / zeta.iter().map(|z| 1.0 / z).sum::<f64>(),
            };
            if !(v > 0.0) {
                return None;
            }
            x.push(v.ln());
        }
        if let Some(p) = spec.pi_index() {
            x.push(th[p]);
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

impl ScalarFn for Internal<'_> {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        self.m.loglik(&self.build(x))
    }
}

impl Chart for Internal<'_> {
    fn dim(&self) -> usize {
        usize::from(self.rho.is_none()) + self.n_var() + usize::from(self.m.spec.model == Model::Re)
    }
    fn theta(&self, x: &[f64]) -> Option<Vec<f64>> {
        let th = self.build(x);
        admissible(&self.m.spec, &th).then_some(th)
    }
}

/// `θ_n = θ₀ + Z η` on the affine set `A θ_n = a`.
struct Affine<'a> {
    m: &'a Moments,
    theta0: Vec<f64>,
    z: DMatrix<f64>,
}

impl Affine<'_> {
    fn theta_n<S: Real>(&self, x: &[S]) -> Vec<S> {
        (0..self.theta0.len())
            .map(|i| {
                let mut v = S::cst(self.theta0[i]);
                for (j, &xj) in x.iter().enumerate() {
                    v += xj * S::cst(self.z[(i, j)]);
                }
                v
            })
            .collect()
    }
}

impl ScalarFn for Affine<'_> {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        self.m.loglik(&map_theta(&self.m.spec, &self.theta_n(x)))
    }
}

impl Chart for Affine<'_> {
    fn dim(&self) -> usize {
        self.z.ncols()
    }
    fn theta(&self, x: &[f64]) -> Option<Vec<f64>> {
        let tn = self.theta_n(x);
        if !(tn[0] > 0.0) {
            return None;
        }
        let th = map_theta(&self.m.spec, &tn);
        admissible(&self.m.spec, &th).then_some(th)
    }
}

struct Objective<'a, C: Chart> {
    chart: &'a C,
}

impl<C: Chart> CostFunction for Objective<'_, C> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        if self.chart.theta(x).is_none() {
            return Ok(f64::INFINITY);
        }
        let v = -self.chart.eval(x);
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

impl<C: Chart> Gradient for Objective<'_, C> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let g: Vec<f64> = gradient(self.chart, x).into_iter().map(|v| -v).collect();
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(argmin::core::Error::msg("non-finite gradient"))
        }
    }
}

fn value<C: Chart>(c: &C, x: &[f64]) -> f64 {
    match c.theta(x) {
        Some(_) => {
            let v = c.eval(x);
            if v.is_finite() {
                v
            } else {
                f64::NEG_INFINITY
            }
        }
        None => f64::NEG_INFINITY,
    }
}

fn run_bfgs<C: Chart>(c: &C, x0: &[f64], max_iters: u64) -> Option<Vec<f64>> {
    let d = x0.len();
    let inv: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(i == j)).collect()).collect();
    let solver = BFGS::new(MoreThuenteLineSearch::new()).with_tolerance_grad(1e-12).ok()?.with_tolerance_cost(0.0).ok()?;
    let res = Executor::new(Objective { chart: c }, solver)
        .configure(|s| s.param(x0.to_vec()).inv_hessian(inv).max_iters(max_iters))
        .run()
        .ok()?;
    res.state().get_best_param().cloned()
}

fn run_simplex<C: Chart>(c: &C, x0: &[f64], max_iters: u64) -> Option<Vec<f64>> {
    let mut simplex = vec![x0.to_vec()];
    for j in 0..x0.len() {
        let mut v = x0.to_vec();
        v[j] += 0.1 * (1.0 + v[j].abs());
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-14).ok()?;
    let res = Executor::new(Objective { chart: c }, solver)
        .configure(|s| s.max_iters(max_iters * 10))
        .run()
        .ok()?;
    res.state().get_best_param().cloned()
}

/// Damped Newton steps on the chart, accepted only when they do not lower the value.
fn polish<C: Chart>(c: &C, mut x: Vec<f64>) -> Vec<f64> {
    let mut v = value(c, &x);
    for _ in 0..50 {
        let g = DVector::from_vec(gradient(c, &x));
        if g.amax() < 1e-15 * v.abs().max(1.0) {
            break;
        }
        let h = hessian(c, &x);
        let Some(chol) = (-h).cholesky() else { break };
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let vc = value(c, &cand);
            if vc >= v {
                x = cand;
                v = vc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

struct Best {
    x: Vec<f64>,
    n_starts_used: usize,
}

fn maximize<C: Chart>(c: &C, starts: &[Vec<f64>], opts: &FitOptions) -> Result<Best> {
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut used = 0;
    for x0 in starts {
        let v0 = value(c, x0);
        if !v0.is_finite() {
            continue;
        }
        used += 1;
        let mut x = x0.clone();
        let mut v = v0;
        if c.dim() > 0 {
            for cand in [run_bfgs(c, x0, opts.max_iters), run_simplex(c, x0, opts.max_iters)].into_iter().flatten() {
                let vc = value(c, &cand);
                if vc > v {
                    x = cand;
                    v = vc;
                }
                if v > v0 && gradient(c, &x).iter().all(|g| g.is_finite()) {
                    break;
                }
            }
            x = polish(c, x);
            v = value(c, &x);
        }
        if best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((x, v));
        }
    }
    let (x, _) = best.ok_or_else(|| Error::Optimization("no start point has a finite likelihood".into()))?;
    Ok(Best { x, n_starts_used: used })
}

fn tsh_starts(m: &Moments, opts: &FitOptions, rho: Option<f64>) -> Vec<f64> {
    match rho {
        Some(r) => vec![r],
        None => {
            let mut s = opts.rho_starts.clone();
            let w = m.within_rho();
            if w.is_finite() {
                s.push(w);
            }
            s
        }
    }
}

fn internal_starts(c: &Internal, opts: &FitOptions) -> Vec<Vec<f64>> {
    let m = c.m;
    let spec = &m.spec;
    let mut out = Vec::new();
    for r in tsh_starts(m, opts, c.rho) {
        let base = m.tsh_at(r, false);
        let zero = m.tsh_at(r, true);
        let candidates = if c.clamp { vec![zero] } else { vec![zero, base] };
        for th in candidates {
            let mut full = vec![th[0], th[1]];
            match spec.variance {
                Variance::Tsh => full.push(th[2]),
                Variance::TimeHet => {
                    let pi = spec.pi_index().map_or(0.0, |_| th[3]);
                    for k in 0..spec.n() {
                        let wkk = m.w(r, pi, k, k) - th[1];
                        full.push(if wkk > 0.1 * th[2] { wkk } else { th[2] });
                    }
                }
            }
            if spec.model == Model::Re {
                full.push(*th.last().unwrap());
            }
            if admissible(spec, &full) {
                if let Some(x) = c.coords(&full) {
                    out.push(x);
                }
            }
        }
    }
    out
}

fn free_mask(spec: &ModelSpec, rho_fixed: bool, clamp: bool) -> Vec<bool> {
    let mut m = vec![true; spec.dim()];
    m[0] = !rho_fixed;
    m[1] = !clamp;
    m
}

fn finish(
    spec: &ModelSpec,
    data: &PanelData,
    th: Vec<f64>,
    theta_n: Option<Vec<f64>>,
    projected: DVector<f64>,
    n_starts_used: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    let l = loglik(spec, data, &th)?;
    let gradient_norm = projected.amax();
    let converged = gradient_norm < opts.grad_tol * l.abs().max(1.0);
    let regime = if th[1] < 0.0 { Regime::Relaxed } else { Regime::Interior };
    Ok(FitResult {
        theta_hat: th,
        theta_n,
        loglik: l,
        converged,
        n_starts_used,
        active_bounds: Vec::new(),
        gradient_norm,
        regime,
        boundary: None,
    })
}

/// Fit with `ρ` free or held at `rho`; `clamp` holds `σ̃_v² = 0`.
fn fit_structural(
    spec: &ModelSpec,
    data: &PanelData,
    m: &Moments,
    rho: Option<f64>,
    clamp: bool,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (th, used) = match spec.variance {
        Variance::Tsh => match rho {
            Some(r) => (m.tsh_at(r, clamp), 1),
            None => {
                let c = Profile { m, clamp };
                let starts: Vec<Vec<f64>> = tsh_starts(m, opts, None).into_iter().map(|r| vec![r]).collect();
                let b = maximize(&c, &starts, opts)?;
                (m.tsh_at(b.x[0], clamp), b.n_starts_used)
            }
        },
        Variance::TimeHet => {
            let c = Internal { m, rho, clamp };
            let b = maximize(&c, &internal_starts(&c, opts), opts)?;
            (c.build(&b.x), b.n_starts_used)
        }
    };
    if !admissible(spec, &th) {
        return Err(Error::Optimization(format!("fit ended outside the admissible region: {th:?}")));
    }
    let g = score_total(spec, data, &th, Coords::Structural)?;
    let mask = free_mask(spec, rho.is_some(), clamp);
    let projected = DVector::from_iterator(g.len(), g.iter().zip(&mask).map(|(v, &f)| if f { *v } else { 0.0 }));
    let theta_n = if th[0] > 0.0 { unmap_theta(spec, &th).ok() } else { None };
    finish(spec, data, th, theta_n, projected, used, opts)
}

fn fit_affine(spec: &ModelSpec, data: &PanelData, m: &Moments, r: &Restriction, opts: &FitOptions) -> Result<FitResult> {
    let d = spec.dim();
    let a = &r.a_mat;
    let aat = a * a.transpose();
    let theta0 = a.transpose()
        * aat.clone().cholesky().ok_or_else(|| Error::Domain("restriction matrix A must have full row rank".into()))?.solve(&r.a);
    let eig = (a.transpose() * a).symmetric_eigen();
    let tol = 1e-10 * eig.eigenvalues.amax().max(1e-300);
    let cols: Vec<DVector<f64>> = (0..d)
        .filter(|&k| eig.eigenvalues[k].abs() <= tol)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    let z = if cols.is_empty() { DMatrix::zeros(d, 0) } else { DMatrix::from_columns(&cols) };
    let chart = Affine { m, theta0: theta0.iter().copied().collect(), z: z.clone() };

    let mut starts = Vec::new();
    let free = Internal { m, rho: None, clamp: false };
    let mut seeds = internal_starts(&free, opts).into_iter().filter_map(|x| free.theta(&x)).collect::<Vec<_>>();
    for rr in [0.5, 0.9, 0.99, 1.0] {
        seeds.push(m.tsh_expanded(rr));
    }
    for th in seeds {
        if let Ok(tn) = unmap_theta(spec, &th) {
            let dv = DVector::from_vec(tn) - &theta0;
            let x: Vec<f64> = (z.transpose() * dv).iter().copied().collect();
            if chart.theta(&x).is_some() {
                starts.push(x);
            }
        }
    }
    if starts.is_empty() {
        return Err(Error::Domain("restriction leaves no admissible start point".into()));
    }
    let b = maximize(&chart, &starts, opts)?;
    let th = chart
        .theta(&b.x)
        .ok_or_else(|| Error::Optimization("restricted fit left the admissible region".into()))?;
    let tn: Vec<f64> = chart.theta_n(&b.x);
    let gn = score_total(spec, data, &tn, Coords::Reparam)?;
    let projected = z.transpose() * gn;
    finish(spec, data, th, Some(tn), projected, b.n_starts_used, opts)
}

impl Moments {
    /// Common-variance fit at `ρ` widened to the model's variance layout.
    fn tsh_expanded(&self, rho: f64) -> Vec<f64> {
        let th = self.tsh_at(rho, false);
        let mut out = vec![th[0], th[1]];
        out.extend(std::iter::repeat_n(th[2], self.spec.n_zeta()));
        if self.spec.model == Model::Re {
            out.push(th[3]);
        }
        out
    }
}

/// Quasi-ML fit, optionally under `A θ_n = a`.
///
/// The search runs over the whole region where `Φ` is positive definite.
/// When that optimum has `σ̃_v² < 0` the fit with `σ̃_v² = 0` is computed
/// too, its Kuhn–Tucker condition checked, and the two are compared by
/// likelihood. With `allow_relaxed = false` the clamped fit is returned.
pub fn fit(spec: &ModelSpec, data: &PanelData, restriction: Option<&Restriction>, opts: &FitOptions) -> Result<FitResult> {
    let m = Moments::new(spec, data)?;
    fit_with_moments(spec, data, &m, restriction, opts)
}

pub fn fit_with_moments(
    spec: &ModelSpec,
    data: &PanelData,
    m: &Moments,
    restriction: Option<&Restriction>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if let Some(r) = restriction {
        r.check(spec)?;
    }
    let rho = restriction.and_then(Restriction::fixed_rho);
    let general = restriction.is_some() && rho.is_none();
    let mut res = if general {
        fit_affine(spec, data, m, restriction.unwrap(), opts)?
    } else {
        fit_structural(spec, data, m, rho, false, opts)?
    };
    if general || res.theta_hat[1] >= 0.0 {
        return Ok(res);
    }
    let clamped = fit_structural(spec, data, m, rho, true, opts)?;
    let kkt = score_total(spec, data, &clamped.theta_hat, Coords::Structural)?[1];
    let boundary = BoundaryFit {
        theta: clamped.theta_hat.clone(),
        loglik: clamped.loglik,
        kkt_score: kkt,
        kkt_ok: kkt <= opts.grad_tol * clamped.loglik.abs().max(1.0),
    };
    if opts.allow_relaxed && res.loglik >= clamped.loglik {
        res.boundary = Some(boundary);
        Ok(res)
    } else {
        let mut c = clamped;
        c.regime = Regime::Boundary;
        c.active_bounds = vec!["sigma_v_tilde_sq".into()];
        c.boundary = Some(boundary);
        c.n_starts_used += res.n_starts_used;
        Ok(c)
    }
}
