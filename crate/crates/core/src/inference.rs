//! QLM statistics, the GMM-AR statistic and confidence sets for `ρ`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dgp::PanelData;
use crate::error::{Error, Result};
use crate::estimation::{fit_with_moments, FitOptions, FitResult, Moments, Restriction};
use crate::likelihood::{
    column_sums, expected_hessian, opg, scores, singular_derivatives, y1_second_moment, Coords, Model, ModelSpec,
};
use crate::matrixkit::{band, selector, vech};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Qlm,
    Qlm1,
    QlmC,
    GmmAr,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Qlm => "qlm",
            Variant::Qlm1 => "qlm1",
            Variant::QlmC => "qlm_c",
            Variant::GmmAr => "gmm_ar",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub variant: Variant,
    /// Right-hand side `a` of the hypothesis.
    pub hypothesis: Vec<f64>,
    pub statistic: f64,
    pub df: usize,
    pub noncentrality_hint: Option<f64>,
    pub p_value: f64,
    pub restricted_fit: Option<FitResult>,
}

impl TestResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }

    pub fn converged(&self) -> bool {
        self.restricted_fit.as_ref().is_none_or(|f| f.converged)
    }

    pub const CSV_HEADER: [&'static str; 6] = ["variant", "a", "statistic", "df", "p_value", "converged"];

    pub fn csv_row(&self) -> [String; 6] {
        let a = self.hypothesis.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        [
            self.variant.label().into(),
            a,
            format!("{:.10e}", self.statistic),
            self.df.to_string(),
            format!("{:.10e}", self.p_value),
            self.converged().to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QlmOptions {
    /// Use the centered OPG in place of the plain average of score outer products.
    pub centered_opg: bool,
    /// Use `adj(𝓗)` in place of `𝓗⁻¹`.
    pub adjugate: bool,
    pub fit: FitOptions,
}

impl Default for QlmOptions {
    fn default() -> Self {
        QlmOptions { centered_opg: false, adjugate: false, fit: FitOptions::default() }
    }
}

pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    let d = ChiSquared::new(df as f64).expect("df > 0");
    d.sf(x).clamp(0.0, 1.0)
}

pub fn chi2_quantile(p: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).expect("df > 0").inverse_cdf(p)
}

/// `N⁻¹ s' h⁻¹ A' (A h⁻¹ J h⁻¹ A')⁻¹ A h⁻¹ s`.
fn sandwich(s: &DVector<f64>, h: &DMatrix<f64>, j: &DMatrix<f64>, a: &DMatrix<f64>, n: f64, adjugate: bool) -> Result<f64> {
    let lu = h.clone().lu();
    let mut hinv = lu
        .try_inverse()
        .ok_or_else(|| Error::Statistic("expected Hessian is singular".into()))?;
    if adjugate {
        hinv *= h.determinant();
    }
    let ah = a * &hinv;
    let mid = &ah * j * ah.transpose();
    let v = &ah * s;
    let chol = mid
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Statistic("middle matrix A𝓗⁻¹𝓙𝓗⁻¹A' is singular".into()))?;
    let stat = v.dot(&chol.solve(&v)) / n;
    if !stat.is_finite() {
        return Err(Error::Statistic("statistic is not finite".into()));
    }
    Ok(stat.max(0.0))
}

fn result(variant: Variant, r: &Restriction, statistic: f64, fit: Option<FitResult>) -> TestResult {
    let df = r.df();
    TestResult {
        variant,
        hypothesis: r.a.iter().copied().collect(),
        statistic,
        df,
        noncentrality_hint: None,
        p_value: chi2_sf(statistic, df),
        restricted_fit: fit,
    }
}

fn restricts_rho(r: &Restriction) -> bool {
    r.a_mat.column(0).iter().any(|&v| v != 0.0)
}

fn is_unit(x: f64) -> bool {
    (x - 1.0).abs() < 1e-12
}

fn qlm_core(
    spec: &ModelSpec,
    data: &PanelData,
    m: &Moments,
    r: &Restriction,
    opts: &QlmOptions,
    centered: bool,
) -> Result<(f64, FitResult)> {
    r.check(spec)?;
    if !restricts_rho(r) {
        return Err(Error::Domain("the hypothesis must restrict rho".into()));
    }
    if r.fixed_rho().is_some_and(is_unit) {
        return Err(Error::Domain("rho = 1 makes the statistic degenerate; use the qlm1 variant".into()));
    }
    let f = fit_with_moments(spec, data, m, Some(r), &opts.fit)?;
    if is_unit(f.rho()) {
        return Err(Error::Domain("restricted estimate has rho = 1; use the qlm1 variant".into()));
    }
    let m2 = y1_second_moment(data);
    let (point, coords, a) = match r.fixed_rho() {
        Some(_) => {
            let mut a = DMatrix::zeros(1, spec.dim());
            a[(0, 0)] = 1.0;
            (f.theta_hat.clone(), Coords::Structural, a)
        }
        None => {
            let tn = f
                .theta_n
                .clone()
                .ok_or_else(|| Error::Domain("general restrictions need rho > 0".into()))?;
            (tn, Coords::Reparam, r.a_mat.clone())
        }
    };
    let s = scores(spec, data, &point, coords)?;
    let h = expected_hessian(spec, &point, m2, coords)?;
    let j = opg(&s, centered);
    let stat = sandwich(&column_sums(&s), &h, &j, &a, data.n as f64, opts.adjugate)?;
    Ok((stat, f))
}

/// QLM test of `A θ_n = a` away from the unit root.
pub fn qlm_test(spec: &ModelSpec, data: &PanelData, r: &Restriction, opts: &QlmOptions) -> Result<TestResult> {
    let m = Moments::new(spec, data)?;
    qlm_test_with_moments(spec, data, &m, r, opts)
}

pub fn qlm_test_with_moments(
    spec: &ModelSpec,
    data: &PanelData,
    m: &Moments,
    r: &Restriction,
    opts: &QlmOptions,
) -> Result<TestResult> {
    let (stat, f) = qlm_core(spec, data, m, r, opts, opts.centered_opg)?;
    Ok(result(Variant::Qlm, r, stat, Some(f)))
}

/// QLM test with centered OPG for `ρ = a` in the fixed-effects model.
pub fn qlm_c_test(spec: &ModelSpec, data: &PanelData, a: f64, opts: &QlmOptions) -> Result<TestResult> {
    if spec.model != Model::Fe {
        return Err(Error::Domain("the centered variant is defined for the fixed-effects likelihood".into()));
    }
    let r = Restriction::rho(spec, a);
    let m = Moments::new(spec, data)?;
    let (stat, f) = qlm_core(spec, data, &m, &r, opts, true)?;
    Ok(result(Variant::QlmC, &r, stat, Some(f)))
}

/// QLM test of a hypothesis that fixes `ρ = 1`, built from second derivatives in `r_n`.
pub fn qlm1_test(spec: &ModelSpec, data: &PanelData, r: &Restriction, opts: &QlmOptions) -> Result<TestResult> {
    let m = Moments::new(spec, data)?;
    qlm1_test_with_moments(spec, data, &m, r, opts)
}

pub fn qlm1_test_with_moments(
    spec: &ModelSpec,
    data: &PanelData,
    m: &Moments,
    r: &Restriction,
    opts: &QlmOptions,
) -> Result<TestResult> {
    r.check(spec)?;
    let f = fit_with_moments(spec, data, m, Some(r), &opts.fit)?;
    if !is_unit(f.rho()) {
        return Err(Error::Domain("qlm1 requires the hypothesis to fix rho = 1".into()));
    }
    let tn = f.theta_n.clone().expect("rho = 1 has reparametrized coordinates");
    let sd = singular_derivatives(spec, data, &tn)?;
    let d = spec.dim();
    let s = DMatrix::from_fn(data.n, d, |i, k| if k == 0 { sd.s1[i] } else { sd.s2[(i, k - 1)] });
    let j = opg(&s, opts.centered_opg);
    let stat = sandwich(&column_sums(&s), &sd.htilde, &j, &r.a_mat, data.n as f64, opts.adjugate)?;
    Ok(result(Variant::Qlm1, r, stat, Some(f)))
}

/// Dispatches on `ρ`: the second-order statistic at `ρ = 1`, the ordinary one elsewhere.
pub fn test_rho(spec: &ModelSpec, data: &PanelData, m: &Moments, a: f64, opts: &QlmOptions) -> Result<TestResult> {
    let r = Restriction::rho(spec, a);
    if is_unit(a) {
        qlm1_test_with_moments(spec, data, m, &r, opts)
    } else {
        qlm_test_with_moments(spec, data, m, &r, opts)
    }
}

/// Per-individual moment vectors `P vech(D_ρ Δy_i Δy_i' D_ρ')`.
pub fn gmm_ar_moments(data: &PanelData, rho: f64) -> Result<DMatrix<f64>> {
    let n = data.t - 1;
    let sel = selector::<f64>(n)?;
    let d = band::<f64>(n, rho).to_dmatrix();
    let p = sel.p.to_dmatrix();
    let mut out = DMatrix::zeros(data.n, p.nrows());
    for i in 0..data.n {
        let y = data.row(i);
        let dy = DVector::from_fn(n, |k, _| y[k + 1] - y[k]);
        let e = &d * dy;
        let outer = crate::matrixkit::Mat::from_fn(n, n, |a, b| e[a] * e[b]);
        let v = DVector::from_vec(vech(&outer)?);
        out.row_mut(i).copy_from(&(&p * v).transpose());
    }
    Ok(out)
}

/// `N m̄' V̂⁻¹ m̄` with `V̂` the (by default centered) covariance of the moment vectors.
pub fn gmm_ar_test(data: &PanelData, rho: f64, centered: bool) -> Result<TestResult> {
    let m = gmm_ar_moments(data, rho)?;
    let p = m.ncols();
    if data.n <= p {
        return Err(Error::Domain(format!("GMM-AR needs N > p = {p}, got N = {}", data.n)));
    }
    let nf = data.n as f64;
    let mbar = column_sums(&m) / nf;
    let v = opg(&m, centered);
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::Statistic("moment covariance is singular".into()))?;
    let stat = nf * mbar.dot(&chol.solve(&mbar));
    Ok(TestResult {
        variant: Variant::GmmAr,
        hypothesis: vec![rho],
        statistic: stat.max(0.0),
        df: p,
        noncentrality_hint: None,
        p_value: chi2_sf(stat, p),
        restricted_fit: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub level: f64,
    pub grid: Vec<f64>,
    pub accepted: Vec<bool>,
    pub statistics: Vec<Option<f64>>,
    pub p_values: Vec<Option<f64>>,
    /// Grid points where the test could not be computed, with the reason.
    pub failures: Vec<(f64, String)>,
    pub intervals: Vec<[f64; 2]>,
}

impl ConfidenceSet {
    pub fn contains(&self, rho: f64) -> bool {
        self.grid.iter().zip(&self.accepted).any(|(g, &a)| a && (g - rho).abs() < 1e-12)
    }
}

/// 401 equispaced points on `[-0.99, 1]`.
pub fn default_grid() -> Vec<f64> {
    linspace(-0.99, 1.0, 401)
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect()
}

/// Grid points where `ρ = g` is not rejected at level `1 - level`.
pub fn confidence_set(
    spec: &ModelSpec,
    data: &PanelData,
    level: f64,
    grid: &[f64],
    opts: &QlmOptions,
) -> Result<ConfidenceSet> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    if grid.is_empty() || grid.iter().any(|&g| !(g > -1.0 && g <= 1.0)) {
        return Err(Error::Domain("grid points must lie in (-1, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("grid must be strictly increasing".into()));
    }
    let m = Moments::new(spec, data)?;
    let alpha = 1.0 - level;
    let tests: Vec<Result<TestResult>> = grid.par_iter().map(|&g| test_rho(spec, data, &m, g, opts)).collect();
    let mut cs = ConfidenceSet {
        level,
        grid: grid.to_vec(),
        accepted: Vec::with_capacity(grid.len()),
        statistics: Vec::with_capacity(grid.len()),
        p_values: Vec::with_capacity(grid.len()),
        failures: Vec::new(),
        intervals: Vec::new(),
    };
    for (&g, t) in grid.iter().zip(tests) {
        match t {
            Ok(t) => {
                cs.accepted.push(!t.rejects(alpha));
                cs.statistics.push(Some(t.statistic));
                cs.p_values.push(Some(t.p_value));
            }
            Err(e) => {
                cs.accepted.push(false);
                cs.statistics.push(None);
                cs.p_values.push(None);
                cs.failures.push((g, e.to_string()));
            }
        }
    }
    let mut start: Option<usize> = None;
    for k in 0..=grid.len() {
        let acc = k < grid.len() && cs.accepted[k];
        match (acc, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                cs.intervals.push([grid[s], grid[k - 1]]);
                start = None;
            }
            _ => {}
        }
    }
    Ok(cs)
}
