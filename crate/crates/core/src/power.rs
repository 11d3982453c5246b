//! Local power at the unit root: noncentralities, power curves and the exact
//! constants behind them.
//!
//! Local alternatives are `ρ = 1 − e/N^{1/4}`. Every noncentrality scales as
//! `e⁴` times its value at `e = 1`.

use nalgebra::{DMatrix, DVector};
use num::traits::{ToPrimitive, Zero};
use serde::Serialize;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::jet::{gradient_over, hessian_over, Jet};
use crate::likelihood::{fe_score_moments, Coords, Model, ModelSpec, Surrogate, Truth, Variance};
use crate::matrixkit::{
    a_matrix, diff_matrix, f_matrix, g_matrix, gt_inverse, h_matrix, m_inverse, m_matrix,
    p_bar, rational, selector, trace_identities, trace_identities_closed, vec, vech, vech_len, w_vector, within,
    Field, Mat, Rational,
};

/// `P(χ²(df, δ) > x)` as a Poisson mixture of central tails, summed outward
/// from the largest weight.
pub fn noncentral_chi2_sf(x: f64, df: f64, delta: f64) -> Result<f64> {
    if !(df > 0.0) || !(delta >= 0.0) || x.is_nan() {
        return Err(Error::Domain(format!("need df > 0 and delta >= 0, got df = {df}, delta = {delta}")));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    let half_x = 0.5 * x;
    let lam = 0.5 * delta;
    if lam == 0.0 {
        return Ok(gamma_ur(0.5 * df, half_x));
    }
    // Below the mean the lower tail is small and sums without cancellation.
    let lower = x < df + delta;
    let tail = |a: f64| if lower { gamma_lr(a, half_x) } else { gamma_ur(a, half_x) };
    let lnw = |j: f64| -lam + j * lam.ln() - ln_gamma(j + 1.0);
    let j0 = lam.floor();
    let mut sum = lnw(j0).exp() * tail(0.5 * df + j0);
    let mut j = j0 + 1.0;
    loop {
        let w = lnw(j).exp();
        sum += w * tail(0.5 * df + j);
        if w < 1e-18 && j > lam {
            break;
        }
        j += 1.0;
    }
    let mut j = j0 - 1.0;
    while j >= 0.0 {
        let w = lnw(j).exp();
        sum += w * tail(0.5 * df + j);
        if w < 1e-18 {
            break;
        }
        j -= 1.0;
    }
    Ok(if lower { 1.0 - sum } else { sum }.clamp(0.0, 1.0))
}

/// Upper-`level` critical value of the central `χ²(df)`.
pub fn chi2_critical(df: f64, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) || !(df > 0.0) {
        return Err(Error::Domain(format!("need 0 < level < 1 and df > 0, got {level}, {df}")));
    }
    let d = ChiSquared::new(df).map_err(|e| Error::Domain(e.to_string()))?;
    let mut x = d.inverse_cdf(1.0 - level);
    for _ in 0..3 {
        let f = d.pdf(x);
        if !(f > 0.0) {
            break;
        }
        x += (d.sf(x) - level) / f;
    }
    Ok(x)
}

fn check_t(t: usize, min: usize) -> Result<()> {
    if t < min {
        return Err(Error::Domain(format!("needs T >= {min}, got T = {t}")));
    }
    Ok(())
}

fn check_e(e: f64) -> Result<()> {
    if !(e >= 0.0) || !e.is_finite() {
        return Err(Error::Domain(format!("local alternative scale e must be >= 0, got {e}")));
    }
    Ok(())
}

/// Rescaled score mean and the rescaled Hessian and information limits for
/// the TSH fixed-effects likelihood at the unit root.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalIngredients {
    pub t: usize,
    pub c3: Vec<Rational>,
    pub sh: Mat<Rational>,
    pub sj: Mat<Rational>,
}

pub fn local_ingredients(t: usize) -> Result<LocalIngredients> {
    check_t(t, 3)?;
    let k = t as i64;
    let q = |p: i64, d: i64| rational(p, d);
    let c3 = vec![
        q(k * (k - 1) * (k * k - k + 1), 6),
        q(k * (2 * k - 1) * (k - 1), 12),
        q(k * (k - 1), 4),
    ];
    let h11 = q(k * (k - 1) * (k * k - k + 1), 2);
    let h12 = q(k * (2 * k * k - 3 * k + 1), 6);
    let h13 = q(k * (k - 1), 2);
    let h22 = q((k - 1) * (k - 1), 2);
    let h23 = q(k - 1, 2);
    let sym = |d11: Rational| {
        let v = [
            [d11, h12.clone(), h13.clone()],
            [h12.clone(), h22.clone(), h23.clone()],
            [h13.clone(), h23.clone(), h23.clone()],
        ];
        Mat::from_fn(3, 3, |i, j| v[i][j].clone())
    };
    let sh = sym(h11);
    let sj = sym(q(k * (k - 1) * (k * k - k + 1), 3));
    Ok(LocalIngredients { t, c3, sh, sj })
}

/// `diag(φ⁻¹, 1, σ²)`.
pub fn stilde(phi: f64, sigma_sq: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / phi, 1.0, sigma_sq]))
}

/// `(e₁'H⁻¹c)² / (e₁'H⁻¹JH⁻¹e₁)`, the noncentrality of a test on the first
/// coordinate.
pub fn sandwich_delta<F: Field>(c: &[F], h: &Mat<F>, j: &Mat<F>) -> Result<F> {
    let d = c.len();
    if h.rows != d || j.rows != d {
        return Err(Error::Shape("score and matrices disagree in dimension".into()));
    }
    let mut e1 = Mat::zeros(d, 1);
    e1[(0, 0)] = F::one();
    // H is symmetric, so H⁻¹e₁ is also the first row of H⁻¹.
    let u = h.solve(&e1)?;
    let num = u.transpose().matmul(&Mat::column(c))[(0, 0)].clone();
    let den = u.transpose().matmul(j).matmul(&u)[(0, 0)].clone();
    if den.is_zero() {
        return Err(Error::Singular("sandwich denominator vanishes".into()));
    }
    Ok(num.clone() * num / den)
}

pub fn delta_from_ingredients(ing: &LocalIngredients) -> Result<Rational> {
    sandwich_delta(&ing.c3, &ing.sh, &ing.sj)
}

/// `(2T−3)T(T−1)(T−2)/72`.
pub fn delta_closed(t: usize) -> Rational {
    let k = t as i64;
    rational((2 * k - 3) * k * (k - 1) * (k - 2), 72)
}

/// Noncentrality of the centered statistic under TSH at scale `e`.
pub fn delta_qlm_tsh(t: usize, e: f64) -> Result<f64> {
    check_t(t, 4)?;
    check_e(e)?;
    Ok(e.powi(4) * delta_closed(t).to_f64().unwrap_or(f64::NAN))
}

/// Number of moment conditions, `T(T−1)/2 − 2`.
pub fn gmm_ar_df(t: usize) -> Result<usize> {
    check_t(t, 3)?;
    Ok(t * (t - 1) / 2 - 2)
}

/// `R = P M P'` and `c₁ = P vech(diag(1, 1, …))` at dimension `T−1`.
fn gmm_ar_parts<F: Field>(t: usize) -> Result<(Mat<F>, Vec<F>)> {
    check_t(t, 4)?;
    let n = t - 1;
    let sel = selector::<F>(n)?;
    let r = sel.p.matmul(&m_matrix::<F>(n)?).matmul(&sel.p.transpose());
    let c1 = sel.p.matmul(&Mat::column(&vech(&Mat::<F>::identity(n))?)).col_vec(0);
    Ok((r, c1))
}

/// `c₁'R⁻¹c₁` at `e = 1`, in exact arithmetic.
pub fn gmm_ar_delta_rational(t: usize) -> Result<Rational> {
    let (r, c1) = gmm_ar_parts::<Rational>(t)?;
    let x = r.solve(&Mat::column(&c1))?;
    Ok(Mat::column(&c1).transpose().matmul(&x)[(0, 0)].clone())
}

/// Nonzero roots of `|λR − c₁c₁'| = 0` at scale `e`, largest first.
pub fn map_roots(t: usize, e: f64) -> Result<Vec<f64>> {
    check_e(e)?;
    let (r, c1) = gmm_ar_parts::<f64>(t)?;
    let r = r.to_dmatrix();
    let c = DVector::from_vec(c1) * (e * e);
    let chol = r
        .cholesky()
        .ok_or_else(|| Error::Singular("moment weight matrix is not positive definite".into()))?;
    let z = chol.l().solve_lower_triangular(&c).ok_or_else(|| Error::Singular("whitening failed".into()))?;
    let eig = nalgebra::SymmetricEigen::new(&z * z.transpose());
    let mut roots: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let scale = roots.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    roots.retain(|v| v.abs() > 1e-10 * scale);
    roots.sort_by(|a, b| b.total_cmp(a));
    Ok(roots)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveVariant {
    QlmCTsh,
    GmmAr,
    Map,
}

impl CurveVariant {
    pub fn label(self) -> &'static str {
        match self {
            CurveVariant::QlmCTsh => "qlm_c_tsh",
            CurveVariant::GmmAr => "gmm_ar",
            CurveVariant::Map => "map",
        }
    }
}

impl std::str::FromStr for CurveVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "qlm_c_tsh" | "qlm_c" | "qlmc" => Ok(CurveVariant::QlmCTsh),
            "gmm_ar" | "gmmar" => Ok(CurveVariant::GmmAr),
            "map" => Ok(CurveVariant::Map),
            other => Err(Error::Input(format!("unknown curve '{other}' (qlm_c_tsh, gmm_ar, map)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PowerCurve {
    pub t: usize,
    pub variant: CurveVariant,
    pub level: f64,
    pub df: usize,
    pub e_grid: Vec<f64>,
    pub delta: Vec<f64>,
    pub power: Vec<f64>,
}

impl PowerCurve {
    pub const CSV_HEADER: &'static str = "variant,T,e,delta,df,power";

    pub fn csv_rows(&self) -> Vec<String> {
        self.e_grid
            .iter()
            .zip(&self.delta)
            .zip(&self.power)
            .map(|((e, d), p)| format!("{},{},{e},{d},{},{p}", self.variant.label(), self.t, self.df))
            .collect()
    }
}

/// Power of a level-`level` test whose statistic is `χ²(δ, df)`.
pub fn power_at(delta: f64, df: usize, level: f64) -> Result<f64> {
    noncentral_chi2_sf(chi2_critical(df as f64, level)?, df as f64, delta)
}

pub fn power_curve(t: usize, variant: CurveVariant, e_grid: &[f64], level: f64) -> Result<PowerCurve> {
    check_t(t, 4)?;
    let df = match variant {
        CurveVariant::GmmAr => gmm_ar_df(t)?,
        _ => 1,
    };
    let crit = chi2_critical(df as f64, level)?;
    let mut delta = Vec::with_capacity(e_grid.len());
    let mut power = Vec::with_capacity(e_grid.len());
    for &e in e_grid {
        let d = match variant {
            CurveVariant::Map => {
                let roots = map_roots(t, e)?;
                if e > 0.0 && roots.len() != 1 {
                    return Err(Error::Statistic(format!("expected one nonzero root, found {}", roots.len())));
                }
                roots.first().copied().unwrap_or(0.0)
            }
            _ => delta_qlm_tsh(t, e)?,
        };
        power.push(noncentral_chi2_sf(crit, df as f64, d)?);
        delta.push(d);
    }
    Ok(PowerCurve { t, variant, level, df, e_grid: e_grid.to_vec(), delta, power })
}

pub fn gmm_ar_power(t: usize, e: f64, level: f64) -> Result<f64> {
    Ok(power_curve(t, CurveVariant::GmmAr, &[e], level)?.power[0])
}

/// The maximal attainable curve; also checks that the largest generalized
/// root matches the closed-form noncentrality.
pub fn map_curve(t: usize, e_grid: &[f64], level: f64) -> Result<PowerCurve> {
    let c = power_curve(t, CurveVariant::Map, e_grid, level)?;
    for (&e, &d) in e_grid.iter().zip(&c.delta) {
        let want = delta_qlm_tsh(t, e)?;
        if (d - want).abs() > 1e-9 * want.max(1.0) {
            return Err(Error::Statistic(format!("largest root {d} differs from {want} at e = {e}")));
        }
    }
    Ok(c)
}

/// Limits of the rescaled expected score `c`, expected Hessian `h` and score
/// covariance `j` of the fixed-effects likelihood, at `e = 1`, as the null
/// `ρ = 1 − φ` approaches a unit-root truth with period variance `σ²`.
#[derive(Clone, Debug)]
pub struct LocalLimits {
    pub c: DVector<f64>,
    pub h: DMatrix<f64>,
    pub j: DMatrix<f64>,
}

impl LocalLimits {
    pub fn delta(&self) -> Result<f64> {
        let d = self.c.len();
        let h = Mat::from_fn(d, d, |a, b| self.h[(a, b)]);
        let j = Mat::from_fn(d, d, |a, b| self.j[(a, b)]);
        sandwich_delta(self.c.as_slice(), &h, &j)
    }
}

type Phi = Jet<f64, 4>;

/// Expands in `φ` around the unit root: the score mean starts at `φ³` in the
/// `ρ` direction and at `φ²` elsewhere; the `ρ` row of the Hessian and the
/// information is one order of `φ` higher than the rest.
pub fn local_limits(spec: &ModelSpec, sigma_sq: f64) -> Result<LocalLimits> {
    if spec.model != Model::Fe {
        return Err(Error::Domain("local limits are derived for the fixed-effects likelihood".into()));
    }
    check_t(spec.t, 3)?;
    if !(sigma_sq > 0.0) {
        return Err(Error::Domain(format!("sigma^2 must be positive, got {sigma_sq}")));
    }
    let d = spec.dim();
    let mut truth = vec![1.0, 0.0];
    truth.extend(std::iter::repeat(sigma_sq).take(spec.n_zeta()));
    let phi = Phi::t();
    let mut x: Vec<Phi> = vec![Phi::constant(1.0) - phi, Phi::constant(0.0)];
    x.extend(std::iter::repeat(Phi::constant(sigma_sq)).take(spec.n_zeta()));

    let tr = Truth::new(spec, &truth, 0.0)?;
    let sur = Surrogate { truth: &tr, coords: Coords::Reparam };
    let g = gradient_over(&sur, &x);
    let h = hessian_over(&sur, &x);
    let (_, cov) = fe_score_moments(spec, &x, &truth)?;

    let s = |k: usize| if k >= 2 { sigma_sq } else { 1.0 };
    // Powers of φ to strip: rescaling the ρ coordinate by φ⁻¹ lowers its order by one.
    let order = |k: usize| if k == 0 { 1 } else { 0 };
    let c = DVector::from_fn(d, |k, _| g[k].c[2 + order(k)] * s(k));
    let lim = |m: &Vec<Vec<Phi>>| DMatrix::from_fn(d, d, |a, b| m[a][b].c[order(a) + order(b)] * s(a) * s(b));
    Ok(LocalLimits { c, h: lim(&h), j: lim(&cov) })
}

/// Noncentrality of the centered statistic when period variances are left free.
pub fn delta_sandwich_general(t: usize, sigma_sq: f64) -> Result<f64> {
    check_t(t, 4)?;
    local_limits(&ModelSpec::new(Model::Fe, Variance::TimeHet, t), sigma_sq)?.delta()
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub t: usize,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, t: usize, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), t, pass, detail: detail.into() }
    }
}

fn exact<F: PartialEq + std::fmt::Debug>(name: &str, t: usize, got: Result<F>, want: F) -> Check {
    match got {
        Ok(g) => {
            let pass = g == want;
            Check::new(name, t, pass, if pass { "exact".to_string() } else { format!("got {g:?}, want {want:?}") })
        }
        Err(e) => Check::new(name, t, false, e.to_string()),
    }
}

fn close(name: &str, t: usize, got: Result<f64>, want: f64, tol: f64) -> Check {
    match got {
        Ok(g) => {
            let err = (g - want).abs() / want.abs().max(1.0);
            Check::new(name, t, err <= tol, format!("{g:.12} vs {want:.12} (rel err {err:.1e})"))
        }
        Err(e) => Check::new(name, t, false, e.to_string()),
    }
}

fn identity_checks(t: usize) -> Result<Vec<Check>> {
    type Q = Rational;
    let mut out = Vec::new();
    let k = t as i64;
    let g = g_matrix::<Q>(t)?;
    let gi = gt_inverse::<Q>(t)?;
    out.push(exact("G inverse closed form", t, Ok(gi.matmul(&g)), Mat::identity(t)));

    let f = f_matrix::<Q>(t);
    let eye = Mat::<Q>::identity(t);
    let a = a_matrix::<Q>(t)?;
    out.push(exact("G^-1 H = F - I", t, Ok(gi.matmul(&h_matrix::<Q>(t)?)), f.sub(&eye)));
    let lhs = gi.matmul(&a).scale(&rational(-6, 1));
    let rhs = f.scale(&rational(2 * (k + 1), 1)).sub(&gi.scale(&rational(6, 1))).add(&eye.scale(&rational(k + 1, 1)));
    out.push(exact("-6 G^-1 A = 2(T+1)F - 6G^-1 + (T+1)I", t, Ok(lhs), rhs));

    if t <= 10 {
        out.push(exact("M inverse closed form", t, Ok(m_matrix::<Q>(t)?.matmul(&m_inverse::<Q>(t)?)), Mat::identity(vech_len(t))));
        let mut want = vech(&eye)?;
        want[0] = Q::zero();
        let got = p_bar::<Q>(t)?.matmul(&Mat::column(&vech(&a)?)).col_vec(0);
        out.push(exact("Pbar vech(A) = vech(I) - e1", t, Ok(got), want));
        let va = Mat::column(&vec(&a));
        let q4 = va.transpose().matmul(&gi.kron(&gi)).matmul(&va)[(0, 0)].clone();
        out.push(exact("vec(A)'(G^-1 x G^-1)vec(A)", t, Ok(q4), rational((2 * k - 1) * (k + 1) * k * (k - 1), 36)));
        if t >= 3 {
            let sel = selector::<Q>(t)?;
            let r = sel.p.matmul(&m_matrix::<Q>(t)?).matmul(&sel.p.transpose());
            let w = Mat::column(&w_vector::<Q>(t)?);
            let got = r.solve(&w).map(|x| w.transpose().matmul(&x)[(0, 0)].clone());
            out.push(exact("w'R^-1 w", t, got, rational((2 * k - 1) * (k + 1) * k * (k - 1), 72)));
        }
    }

    if t >= 3 {
        let q = within::<Q>(t)?;
        let d = diff_matrix::<Q>(t)?;
        let proj = d.transpose().matmul(&d.matmul(&d.transpose()).inverse()?).matmul(&d);
        let idem = q.matmul(&q) == q && q.transpose() == q && q.trace() == rational(k - 2, 1) && proj == q;
        out.push(Check::new("within projection", t, idem, "Q^2 = Q = Q' = D'(DD')^-1 D, tr Q = T-2"));
        out.push(exact("trace identities", t, trace_identities::<Q>(t), trace_identities_closed::<Q>(t)));
    }
    Ok(out)
}

fn delta_checks(t: usize, tsh: &Result<LocalLimits>) -> Vec<Check> {
    let want = delta_closed(t);
    let wf = want.to_f64().unwrap_or(f64::NAN);
    let mut out = vec![
        exact("delta: sandwich of closed-form matrices", t, local_ingredients(t).and_then(|i| delta_from_ingredients(&i)), want.clone()),
        exact("delta: moment quadratic form", t, gmm_ar_delta_rational(t), want),
        close("delta: largest generalized root", t, map_roots(t, 1.0).map(|r| r[0]), wf, 1e-10),
    ];
    out.push(close(
        "delta: likelihood limits, TSH",
        t,
        match tsh {
            Ok(l) => l.delta(),
            Err(e) => Err(Error::Domain(e.to_string())),
        },
        wf,
        1e-8,
    ));
    out
}

/// Free period variances split the common-variance score limit among themselves.
fn het_split_check(t: usize, tsh: &Result<LocalLimits>) -> Check {
    let name = "period-variance score limits add up to the common one";
    let het = local_limits(&ModelSpec::new(Model::Fe, Variance::TimeHet, t), 1.0);
    match (het, tsh) {
        (Ok(h), Ok(s)) => {
            let sum: f64 = h.c.iter().skip(2).sum();
            close(name, t, Ok(sum), s.c[2], 1e-10)
        }
        (Err(e), _) => Check::new(name, t, false, e.to_string()),
        (_, Err(e)) => Check::new(name, t, false, e.to_string()),
    }
}

fn ingredient_checks(t: usize, tsh: &Result<LocalLimits>) -> Vec<Check> {
    let ing = match local_ingredients(t) {
        Ok(i) => i,
        Err(e) => return vec![Check::new("score and information limits", t, false, e.to_string())],
    };
    let lim = match tsh {
        Ok(l) => l,
        Err(e) => return vec![Check::new("score and information limits", t, false, e.to_string())],
    };
    let f = |q: &Rational| q.to_f64().unwrap_or(f64::NAN);
    let mut worst: f64 = 0.0;
    for a in 0..3 {
        worst = worst.max((lim.c[a] - f(&ing.c3[a])).abs() / f(&ing.c3[a]).abs());
        for b in 0..3 {
            let s = f(&ing.sh[(a, b)]).abs();
            worst = worst.max((-lim.h[(a, b)] - f(&ing.sh[(a, b)])).abs() / s);
            worst = worst.max((lim.j[(a, b)] - f(&ing.sj[(a, b)])).abs() / s);
        }
    }
    vec![Check::new(
        "score and information limits from the likelihood",
        t,
        worst < 1e-8,
        format!("max rel err {worst:.1e}"),
    )]
}

/// Every exact identity and noncentrality cross-check for `T` in `lo..=hi`.
pub fn verify(lo: usize, hi: usize) -> Result<Vec<Check>> {
    if lo < 2 || hi < lo {
        return Err(Error::Domain(format!("need 2 <= lo <= hi, got {lo}..{hi}")));
    }
    let mut out = Vec::new();
    for t in lo..=hi {
        out.extend(identity_checks(t)?);
        let tsh = if t >= 3 { local_limits(&ModelSpec::new(Model::Fe, Variance::Tsh, t), 1.0) } else { Err(Error::Domain("T < 3".into())) };
        if t >= 3 {
            out.extend(ingredient_checks(t, &tsh));
            out.push(het_split_check(t, &tsh));
        }
        if t >= 4 {
            out.extend(delta_checks(t, &tsh));
        }
    }
    if (lo..=hi).contains(&4) {
        let ing = local_ingredients(4)?;
        let c3: Vec<Rational> = [26, 7, 3].iter().map(|&v| rational(v, 1)).collect();
        out.push(exact("c3 at T=4", 4, Ok(ing.c3.clone()), c3));
        out.push(exact("SH(1,1) at T=4", 4, Ok(ing.sh[(0, 0)].clone()), rational(78, 1)));
        out.push(exact("SJ(1,1) at T=4", 4, Ok(ing.sj[(0, 0)].clone()), rational(52, 1)));
    }
    Ok(out)
}
