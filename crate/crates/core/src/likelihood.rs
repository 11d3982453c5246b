//! Gaussian quasi-likelihoods of the panel AR(1) model.
//!
//! Parameter vectors are laid out as `(ρ, σ̃_v², ζ, π̃)` in structural
//! coordinates and `(r, s̃_v², z, p̃)` in the reparametrized ones; `π̃` / `p̃`
//! exist for the random-effects likelihood only. `ζ` holds one common
//! variance when time-series homoskedasticity is imposed and `T-1` period
//! variances otherwise.
//!
//! Residual covariance is `Φ = σ̃_v² ιι' + Ψ(ζ)` with diagonal `Ψ`, so every
//! inverse and determinant below comes from the Sherman–Morrison formula.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::PanelData;
use crate::error::{Error, Result};
use crate::jet::{Jet, Real, ScalarFn};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Re,
    Fe,
}

impl std::str::FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "re" => Ok(Model::Re),
            "fe" => Ok(Model::Fe),
            _ => Err(Error::Input(format!("unknown model '{s}' (expected re or fe)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variance {
    /// One variance shared by all periods.
    Tsh,
    /// A free variance per period.
    TimeHet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub model: Model,
    pub variance: Variance,
    pub t: usize,
}

impl ModelSpec {
    pub fn new(model: Model, variance: Variance, t: usize) -> Self {
        ModelSpec { model, variance, t }
    }

    pub fn tsh(model: Model, t: usize) -> Self {
        Self::new(model, Variance::Tsh, t)
    }

    /// Number of residual periods, `T - 1`.
    pub fn n(&self) -> usize {
        self.t - 1
    }

    pub fn n_zeta(&self) -> usize {
        match self.variance {
            Variance::Tsh => 1,
            Variance::TimeHet => self.n(),
        }
    }

    pub fn dim(&self) -> usize {
        2 + self.n_zeta() + usize::from(self.model == Model::Re)
    }

    pub fn pi_index(&self) -> Option<usize> {
        (self.model == Model::Re).then(|| 2 + self.n_zeta())
    }

    fn psi<S: Real>(&self, th: &[S], k: usize) -> S {
        match self.variance {
            Variance::Tsh => th[2],
            Variance::TimeHet => th[2 + k],
        }
    }

    pub fn check_data(&self, data: &PanelData) -> Result<()> {
        if data.t != self.t {
            return Err(Error::Shape(format!("model expects T={}, panel has T={}", self.t, data.t)));
        }
        if self.t < 3 {
            return Err(Error::Domain("need T >= 3".into()));
        }
        Ok(())
    }

    pub fn check_len(&self, th: &[f64]) -> Result<()> {
        if th.len() != self.dim() {
            return Err(Error::Shape(format!("parameter has length {}, model needs {}", th.len(), self.dim())));
        }
        Ok(())
    }
}

/// Structural parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub rho: f64,
    pub sigma_v_tilde_sq: f64,
    pub zeta: Vec<f64>,
    pub pi_tilde: Option<f64>,
}

/// Reparametrized parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaN {
    pub rho_n: f64,
    pub sigma_v_n_sq: f64,
    pub zeta_n: Vec<f64>,
    pub pi_n: Option<f64>,
}

fn pack(a: f64, b: f64, z: &[f64], p: Option<f64>) -> Vec<f64> {
    let mut v = vec![a, b];
    v.extend_from_slice(z);
    v.extend(p);
    v
}

impl Theta {
    pub fn to_vec(&self) -> Vec<f64> {
        pack(self.rho, self.sigma_v_tilde_sq, &self.zeta, self.pi_tilde)
    }

    pub fn from_vec(spec: &ModelSpec, v: &[f64]) -> Result<Self> {
        spec.check_len(v)?;
        Ok(Theta {
            rho: v[0],
            sigma_v_tilde_sq: v[1],
            zeta: v[2..2 + spec.n_zeta()].to_vec(),
            pi_tilde: spec.pi_index().map(|i| v[i]),
        })
    }
}

impl ThetaN {
    pub fn to_vec(&self) -> Vec<f64> {
        pack(self.rho_n, self.sigma_v_n_sq, &self.zeta_n, self.pi_n)
    }

    pub fn from_vec(spec: &ModelSpec, v: &[f64]) -> Result<Self> {
        let t = Theta::from_vec(spec, v)?;
        Ok(ThetaN { rho_n: t.rho, sigma_v_n_sq: t.sigma_v_tilde_sq, zeta_n: t.zeta, pi_n: t.pi_tilde })
    }

    /// The singular point: unit root, no individual-effect variance, common variance `sigma_sq`.
    pub fn singular_point(spec: &ModelSpec, sigma_sq: f64) -> Self {
        ThetaN {
            rho_n: 1.0,
            sigma_v_n_sq: 0.0,
            zeta_n: vec![sigma_sq; spec.n_zeta()],
            pi_n: spec.pi_index().map(|_| 0.0),
        }
    }
}

/// `θ(θ_n) = (r, r z₁ (s̃_v + 1 - r), r z, p̃ + 1 - r)`.
pub fn map_theta<S: Real>(spec: &ModelSpec, tn: &[S]) -> Vec<S> {
    let r = tn[0];
    let one = S::one();
    let mut th = Vec::with_capacity(tn.len());
    th.push(r);
    th.push(r * tn[2] * (tn[1] + one - r));
    for k in 0..spec.n_zeta() {
        th.push(r * tn[2 + k]);
    }
    if let Some(i) = spec.pi_index() {
        th.push(tn[i] + one - r);
    }
    th
}

pub fn map_theta_checked(spec: &ModelSpec, tn: &[f64]) -> Result<Vec<f64>> {
    spec.check_len(tn)?;
    if !(tn[0] > 0.0) {
        return Err(Error::Domain(format!("reparametrization needs r_n > 0, got {}", tn[0])));
    }
    Ok(map_theta(spec, tn))
}

/// Inverse of [`map_theta`].
pub fn unmap_theta(spec: &ModelSpec, th: &[f64]) -> Result<Vec<f64>> {
    spec.check_len(th)?;
    let rho = th[0];
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("reparametrization needs rho > 0, got {rho}")));
    }
    let mut tn = Vec::with_capacity(th.len());
    tn.push(rho);
    tn.push(th[1] / th[2] - (1.0 - rho));
    for k in 0..spec.n_zeta() {
        tn.push(th[2 + k] / rho);
    }
    if let Some(i) = spec.pi_index() {
        tn.push(th[i] - (1.0 - rho));
    }
    Ok(tn)
}

/// Jacobian `∂θ/∂θ_n`.
pub fn map_jacobian(spec: &ModelSpec, tn: &[f64]) -> DMatrix<f64> {
    let j = map_jacobian_generic(spec, tn);
    DMatrix::from_fn(spec.dim(), spec.dim(), |a, b| j[a][b])
}

pub fn map_jacobian_generic<S: Real>(spec: &ModelSpec, tn: &[S]) -> Vec<Vec<S>> {
    let d = spec.dim();
    let one = S::one();
    let (r, sv, z1) = (tn[0], tn[1], tn[2]);
    let mut j = vec![vec![S::zero(); d]; d];
    j[0][0] = one;
    j[1][0] = z1 * (sv + one - r.scale(2.0));
    j[1][1] = r * z1;
    j[1][2] = r * (sv + one - r);
    for k in 0..spec.n_zeta() {
        j[2 + k][0] = tn[2 + k];
        j[2 + k][2 + k] = r;
    }
    if let Some(i) = spec.pi_index() {
        j[i][0] = -one;
        j[i][i] = one;
    }
    j
}

/// Which parameter vector a derivative refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    Structural,
    Reparam,
}

/// `Φ⁻¹` pieces shared by every individual.
struct PhiInv<S> {
    ip: Vec<S>,
    s: S,
    c: S,
    den: S,
    logdet: S,
}

impl<S: Real> PhiInv<S> {
    fn new(spec: &ModelSpec, th: &[S]) -> Self {
        let n = spec.n();
        let s = th[1];
        let mut ip = Vec::with_capacity(n);
        let mut c = S::zero();
        let mut logpsi = S::zero();
        for k in 0..n {
            let psi = spec.psi(th, k);
            let inv = S::one() / psi;
            c += inv;
            logpsi += psi.ln();
            ip.push(inv);
        }
        let den = S::one() + s * c;
        PhiInv { ip, s, c, den, logdet: logpsi + den.ln() }
    }
}

/// Whether `θ` gives a positive definite `Φ`.
pub fn admissible(spec: &ModelSpec, th: &[f64]) -> bool {
    if th.len() != spec.dim() || th.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let zeta = &th[2..2 + spec.n_zeta()];
    if zeta.iter().any(|&z| !(z > 0.0)) {
        return false;
    }
    let c: f64 = (0..spec.n()).map(|k| 1.0 / spec.psi(th, k)).sum();
    1.0 + th[1] * c > 0.0
}

pub fn check_admissible(spec: &ModelSpec, th: &[f64]) -> Result<()> {
    spec.check_len(th)?;
    if !admissible(spec, th) {
        return Err(Error::Inadmissible(format!("{th:?}")));
    }
    Ok(())
}

fn residual<S: Real>(spec: &ModelSpec, th: &[S], y: &[f64], k: usize) -> S {
    let y1 = y[0];
    match spec.model {
        Model::Re => {
            let pi = th[spec.pi_index().unwrap()];
            S::cst(y[k + 1]) - th[0] * S::cst(y[k]) - pi * S::cst(y1)
        }
        Model::Fe => S::cst(y[k + 1] - y1) - th[0] * S::cst(y[k] - y1),
    }
}

fn loglik_row<S: Real>(spec: &ModelSpec, th: &[S], pre: &PhiInv<S>, y: &[f64]) -> S {
    let n = spec.n();
    let mut a = S::zero();
    let mut q = S::zero();
    for k in 0..n {
        let u = residual(spec, th, y, k);
        let w = u * pre.ip[k];
        a += w;
        q += u * w;
    }
    let quad = q - pre.s * a * a / pre.den;
    S::cst(-0.5 * n as f64 * LN_2PI) - (pre.logdet + quad).scale(0.5)
}

/// Log-likelihood of one individual in structural coordinates.
pub fn loglik_individual<S: Real>(spec: &ModelSpec, th: &[S], y: &[f64]) -> S {
    let pre = PhiInv::new(spec, th);
    loglik_row(spec, th, &pre, y)
}

/// Panel log-likelihood in structural coordinates, generic over the scalar.
pub fn loglik_sum<S: Real>(spec: &ModelSpec, th: &[S], data: &PanelData) -> S {
    let pre = PhiInv::new(spec, th);
    let mut total = S::zero();
    for i in 0..data.n {
        total += loglik_row(spec, th, &pre, data.row(i));
    }
    total
}

pub fn loglik(spec: &ModelSpec, data: &PanelData, th: &[f64]) -> Result<f64> {
    spec.check_data(data)?;
    check_admissible(spec, th)?;
    Ok(loglik_sum(spec, th, data))
}

/// Random-effects likelihood: density of `u_i = y_i - ρ y_i,-1 - π̃ y_i1 ι` given `y_i1`.
pub fn loglik_re(data: &PanelData, variance: Variance, th: &[f64]) -> Result<f64> {
    loglik(&ModelSpec::new(Model::Re, variance, data.t), data, th)
}

/// Fixed-effects likelihood as the product of the densities of `D w_i` and `d' w_i`.
pub fn loglik_fe(data: &PanelData, variance: Variance, th: &[f64]) -> Result<f64> {
    let spec = ModelSpec::new(Model::Fe, variance, data.t);
    spec.check_data(data)?;
    spec.check_len(th)?;
    let n = spec.n();
    let psi: Vec<f64> = (0..n).map(|k| spec.psi(th, k)).collect();
    if psi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Inadmissible("Ψ must be positive definite".into()));
    }
    let c: f64 = psi.iter().map(|p| 1.0 / p).sum();
    let sigma_u_sq = 1.0 / c + th[1];
    if !(sigma_u_sq > 0.0) {
        return Err(Error::Inadmissible(format!("σ_u² = {sigma_u_sq} is not positive")));
    }
    let d: Vec<f64> = psi.iter().map(|p| 1.0 / (p * c)).collect();
    let dm = crate::matrixkit::diff_matrix::<f64>(data.t)?.to_dmatrix();
    let dpd = &dm * DMatrix::from_diagonal(&DVector::from_vec(psi.clone())) * dm.transpose();
    let chol = dpd
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("DΨD' is not positive definite".into()))?;
    let logdet_dpd: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let m = n - 1;
    let mut total = 0.0;
    for i in 0..data.n {
        let y = data.row(i);
        let w = DVector::from_fn(n, |k, _| residual(&spec, th, y, k));
        let dw = &dm * &w;
        let quad = dw.dot(&chol.solve(&dw));
        let dpw: f64 = d.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        total += -0.5 * (m as f64 * LN_2PI + logdet_dpd + quad);
        total += -0.5 * (LN_2PI + sigma_u_sq.ln() + dpw * dpw / sigma_u_sq);
    }
    Ok(total)
}

/// `∂l/∂σ_u²` of the `d' w` factor.
pub fn fe_sigma_u_score(data: &PanelData, variance: Variance, th: &[f64]) -> Result<f64> {
    let spec = ModelSpec::new(Model::Fe, variance, data.t);
    spec.check_data(data)?;
    spec.check_len(th)?;
    let n = spec.n();
    let psi: Vec<f64> = (0..n).map(|k| spec.psi(th, k)).collect();
    let c: f64 = psi.iter().map(|p| 1.0 / p).sum();
    let su = 1.0 / c + th[1];
    let ss: f64 = (0..data.n)
        .map(|i| {
            let y = data.row(i);
            let dw: f64 = (0..n).map(|k| residual(&spec, th, y, k) / (psi[k] * c)).sum();
            dw * dw
        })
        .sum();
    Ok(-(data.n as f64) / (2.0 * su) + ss / (2.0 * su * su))
}

/// Per-individual structural scores, one row per individual.
pub fn scores_structural(spec: &ModelSpec, data: &PanelData, th: &[f64]) -> Result<DMatrix<f64>> {
    spec.check_data(data)?;
    check_admissible(spec, th)?;
    let n = spec.n();
    let pre = PhiInv::new(spec, th);
    let phiinv_diag: Vec<f64> = pre.ip.iter().map(|&ip| ip - pre.s * ip * ip / pre.den).collect();
    let tr_phiinv: f64 = phiinv_diag.iter().sum();
    let mut out = DMatrix::zeros(data.n, spec.dim());
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..data.n {
        let y = data.row(i);
        let mut a = 0.0;
        for k in 0..n {
            u[k] = residual(spec, th, y, k);
            a += u[k] * pre.ip[k];
        }
        let sa = pre.s * a / pre.den;
        for k in 0..n {
            v[k] = (u[k] - sa) * pre.ip[k];
        }
        let y1 = y[0];
        let g_rho: f64 = (0..n)
            .map(|k| {
                let x = match spec.model {
                    Model::Re => y[k],
                    Model::Fe => y[k] - y1,
                };
                x * v[k]
            })
            .sum();
        let iv = a / pre.den;
        out[(i, 0)] = g_rho;
        out[(i, 1)] = -0.5 * pre.c / pre.den + 0.5 * iv * iv;
        match spec.variance {
            Variance::Tsh => {
                let vv: f64 = v.iter().map(|x| x * x).sum();
                out[(i, 2)] = -0.5 * tr_phiinv + 0.5 * vv;
            }
            Variance::TimeHet => {
                for k in 0..n {
                    out[(i, 2 + k)] = -0.5 * phiinv_diag[k] + 0.5 * v[k] * v[k];
                }
            }
        }
        if let Some(p) = spec.pi_index() {
            out[(i, p)] = y1 * iv;
        }
    }
    Ok(out)
}

/// Per-individual scores in the requested coordinates; `point` is given in those coordinates.
pub fn scores(spec: &ModelSpec, data: &PanelData, point: &[f64], coords: Coords) -> Result<DMatrix<f64>> {
    match coords {
        Coords::Structural => scores_structural(spec, data, point),
        Coords::Reparam => {
            let th = map_theta_checked(spec, point)?;
            let s = scores_structural(spec, data, &th)?;
            Ok(s * map_jacobian(spec, point))
        }
    }
}

pub fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

pub fn score_total(spec: &ModelSpec, data: &PanelData, point: &[f64], coords: Coords) -> Result<DVector<f64>> {
    Ok(column_sums(&scores(spec, data, point, coords)?))
}

/// Fixed-effects score in structural coordinates.
pub fn score_fe(data: &PanelData, variance: Variance, th: &[f64]) -> Result<DVector<f64>> {
    score_total(&ModelSpec::new(Model::Fe, variance, data.t), data, th, Coords::Structural)
}

pub fn score_re(data: &PanelData, variance: Variance, th: &[f64]) -> Result<DVector<f64>> {
    score_total(&ModelSpec::new(Model::Re, variance, data.t), data, th, Coords::Structural)
}

/// Score in reparametrized coordinates.
pub fn score_n(spec: &ModelSpec, data: &PanelData, tn: &[f64]) -> Result<DVector<f64>> {
    score_total(spec, data, tn, Coords::Reparam)
}

/// Average outer product of per-individual scores, optionally centered.
pub fn opg(scores: &DMatrix<f64>, centered: bool) -> DMatrix<f64> {
    let n = scores.nrows() as f64;
    if centered {
        let mean = column_sums(scores) / n;
        let mut c = scores.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        c.transpose() * c / n
    } else {
        scores.transpose() * scores / n
    }
}

/// Sample second moment of the initial observations.
pub fn y1_second_moment(data: &PanelData) -> f64 {
    (0..data.n).map(|i| data.row(i)[0].powi(2)).sum::<f64>() / data.n as f64
}

/// Model-implied moments of the truth, reused across evaluation points.
#[derive(Clone, Debug)]
pub struct Truth {
    spec: ModelSpec,
    rho: f64,
    kappa: f64,
    k0: DMatrix<f64>,
    k1: DMatrix<f64>,
    k2: DMatrix<f64>,
    p_iota: Vec<f64>,
    m2: f64,
}

impl Truth {
    /// `th` is structural; `m2` is the mean of `y_i1²` (ignored for fixed effects).
    pub fn new(spec: &ModelSpec, th: &[f64], m2: f64) -> Result<Self> {
        check_admissible(spec, th)?;
        let n = spec.n();
        let rho = th[0];
        let phi = DMatrix::from_fn(n, n, |i, j| {
            th[1] + if i == j { spec.psi(th, i) } else { 0.0 }
        });
        let p = crate::matrixkit::lag_filter::<f64>(spec.t, rho)?.to_dmatrix();
        let pphi = &p * &phi;
        let k1 = &pphi + pphi.transpose();
        let k2 = &pphi * p.transpose();
        let p_iota = (0..n).map(|i| p.row(i).sum()).collect();
        let kappa = spec.pi_index().map_or(0.0, |i| th[i] + rho - 1.0);
        Ok(Truth { spec: *spec, rho, kappa, k0: phi, k1, k2, p_iota, m2 })
    }

    /// `E_truth[l_i(θ_e)]` per individual, structural `θ_e`.
    pub fn expected_loglik<S: Real>(&self, te: &[S]) -> S {
        let spec = &self.spec;
        let n = spec.n();
        let pre = PhiInv::new(spec, te);
        let delta = S::cst(self.rho) - te[0];
        let d2 = delta * delta;
        let kk = |i: usize, j: usize| {
            S::cst(self.k0[(i, j)]) + delta * S::cst(self.k1[(i, j)]) + d2 * S::cst(self.k2[(i, j)])
        };
        let mut tr = S::zero();
        let mut wkw = S::zero();
        for i in 0..n {
            tr += kk(i, i) * pre.ip[i];
            for j in 0..n {
                wkw += pre.ip[i] * pre.ip[j] * kk(i, j);
            }
        }
        let mut val = S::cst(-0.5 * n as f64 * LN_2PI) - (pre.logdet + tr - pre.s * wkw / pre.den).scale(0.5);
        if let Some(pi) = spec.pi_index() {
            let ke = te[pi] + te[0] - S::one();
            let mut bb = S::zero();
            let mut bs = S::zero();
            for i in 0..n {
                let b = S::cst(self.kappa) * (S::one() + delta * S::cst(self.p_iota[i])) - ke;
                bb += b * b * pre.ip[i];
                bs += b * pre.ip[i];
            }
            val -= (bb - pre.s * bs * bs / pre.den).scale(0.5 * self.m2);
        }
        val
    }
}

/// `E_truth[l_i(θ_eval)]` per individual. Both points in the given coordinates.
pub fn expected_loglik(
    spec: &ModelSpec,
    theta_eval: &[f64],
    theta_truth: &[f64],
    m2: f64,
    coords: Coords,
) -> Result<f64> {
    let (te, tt) = match coords {
        Coords::Structural => (theta_eval.to_vec(), theta_truth.to_vec()),
        Coords::Reparam => (map_theta_checked(spec, theta_eval)?, map_theta_checked(spec, theta_truth)?),
    };
    check_admissible(spec, &te)?;
    Ok(Truth::new(spec, &tt, m2)?.expected_loglik(&te))
}

/// Expected log-likelihood as a function of the evaluation point.
pub struct Surrogate<'a> {
    pub truth: &'a Truth,
    pub coords: Coords,
}

impl ScalarFn for Surrogate<'_> {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        match self.coords {
            Coords::Structural => self.truth.expected_loglik(x),
            Coords::Reparam => self.truth.expected_loglik(&map_theta(&self.truth.spec, x)),
        }
    }
}

/// Panel log-likelihood as a function of the parameter.
pub struct PanelLoglik<'a> {
    pub spec: ModelSpec,
    pub data: &'a PanelData,
    pub coords: Coords,
}

impl ScalarFn for PanelLoglik<'_> {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        match self.coords {
            Coords::Structural => loglik_sum(&self.spec, x, self.data),
            Coords::Reparam => loglik_sum(&self.spec, &map_theta(&self.spec, x), self.data),
        }
    }
}

fn to_structural(spec: &ModelSpec, point: &[f64], coords: Coords) -> Result<Vec<f64>> {
    match coords {
        Coords::Structural => {
            spec.check_len(point)?;
            Ok(point.to_vec())
        }
        Coords::Reparam => map_theta_checked(spec, point),
    }
}

/// Expected Hessian per individual under self-expectation at `point`.
pub fn expected_hessian(spec: &ModelSpec, point: &[f64], m2: f64, coords: Coords) -> Result<DMatrix<f64>> {
    let th = to_structural(spec, point, coords)?;
    let truth = Truth::new(spec, &th, m2)?;
    Ok(crate::jet::hessian(&Surrogate { truth: &truth, coords }, point))
}

/// Hessian of the expected log-likelihood at `eval` when the data follow `truth`.
pub fn expected_hessian_under(
    spec: &ModelSpec,
    eval: &[f64],
    truth: &[f64],
    m2: f64,
    coords: Coords,
) -> Result<DMatrix<f64>> {
    let tt = to_structural(spec, truth, coords)?;
    check_admissible(spec, &to_structural(spec, eval, coords)?)?;
    let truth = Truth::new(spec, &tt, m2)?;
    Ok(crate::jet::hessian(&Surrogate { truth: &truth, coords }, eval))
}

/// Observed Hessian of the panel log-likelihood.
pub fn observed_hessian(spec: &ModelSpec, data: &PanelData, point: &[f64], coords: Coords) -> Result<DMatrix<f64>> {
    spec.check_data(data)?;
    check_admissible(spec, &to_structural(spec, point, coords)?)?;
    Ok(crate::jet::hessian(&PanelLoglik { spec: *spec, data, coords }, point))
}

/// Everything a test statistic needs at one parameter value.
#[derive(Clone, Debug)]
pub struct LikelihoodEval {
    pub value: f64,
    pub per_individual_scores: DMatrix<f64>,
    pub observed_hessian: Option<DMatrix<f64>>,
    pub expected_hessian: DMatrix<f64>,
    pub opg: DMatrix<f64>,
    pub opg_centered: DMatrix<f64>,
}

pub fn evaluate(
    spec: &ModelSpec,
    data: &PanelData,
    point: &[f64],
    coords: Coords,
    with_observed: bool,
) -> Result<LikelihoodEval> {
    let th = to_structural(spec, point, coords)?;
    let value = loglik(spec, data, &th)?;
    let s = scores(spec, data, point, coords)?;
    let h = expected_hessian(spec, point, y1_second_moment(data), coords)?;
    let obs = if with_observed { Some(observed_hessian(spec, data, point, coords)?) } else { None };
    Ok(LikelihoodEval {
        value,
        opg: opg(&s, false),
        opg_centered: opg(&s, true),
        per_individual_scores: s,
        observed_hessian: obs,
        expected_hessian: h,
    })
}

type Sq<S> = Vec<Vec<S>>;

fn mat_mul<S: Real>(a: &Sq<S>, b: &Sq<S>) -> Sq<S> {
    let (n, m, k) = (a.len(), b[0].len(), b.len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut v = S::zero();
                    for l in 0..k {
                        v += a[i][l] * b[l][j];
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn transpose<S: Real>(a: &Sq<S>) -> Sq<S> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn trace_of<S: Real>(a: &Sq<S>) -> S {
    let mut t = S::zero();
    for (i, r) in a.iter().enumerate() {
        t += r[i];
    }
    t
}

fn outer<S: Real>(v: &[S]) -> Sq<S> {
    v.iter().map(|&a| v.iter().map(|&b| a * b).collect()).collect()
}

/// Mean and covariance of one individual's fixed-effects score in reparametrized
/// coordinates at `tn`, when the data are Gaussian with structural parameter `truth`.
///
/// Each score is `½ u'Mu + c` in the true innovations `u ~ N(0, Φ)`, so the
/// moments are traces.
pub fn fe_score_moments<S: Real>(spec: &ModelSpec, tn: &[S], truth: &[f64]) -> Result<(Vec<S>, Sq<S>)> {
    if spec.model != Model::Fe {
        return Err(Error::Domain("score moments are implemented for the fixed-effects likelihood".into()));
    }
    spec.check_len(truth)?;
    check_admissible(spec, truth)?;
    let n = spec.n();
    let d = spec.dim();
    let th = map_theta(spec, tn);
    let phi_t: Sq<S> = (0..n)
        .map(|i| (0..n).map(|j| S::cst(truth[1] + if i == j { spec.psi(truth, i) } else { 0.0 })).collect())
        .collect();
    let pm = crate::matrixkit::lag_filter::<f64>(spec.t, truth[0])?.to_dmatrix();
    let p: Sq<S> = (0..n).map(|i| (0..n).map(|j| S::cst(pm[(i, j)])).collect()).collect();
    let delta = S::cst(truth[0]) - th[0];
    let b: Sq<S> = (0..n)
        .map(|i| (0..n).map(|j| p[i][j] * delta + if i == j { S::one() } else { S::zero() }).collect())
        .collect();
    let pre = PhiInv::new(spec, &th);
    let finv: Sq<S> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let off = pre.s * pre.ip[i] * pre.ip[j] / pre.den;
                    if i == j { pre.ip[i] - off } else { -off }
                })
                .collect()
        })
        .collect();
    let bt = transpose(&b);
    let btf = mat_mul(&bt, &finv);
    let mut ms: Vec<Sq<S>> = Vec::with_capacity(d);
    let mut cs: Vec<S> = Vec::with_capacity(d);
    let a = mat_mul(&mat_mul(&transpose(&p), &finv), &b);
    ms.push((0..n).map(|i| (0..n).map(|j| a[i][j] + a[j][i]).collect()).collect());
    cs.push(S::zero());
    let col = |m: &Sq<S>, k: Option<usize>| -> Vec<S> {
        (0..n)
            .map(|i| match k {
                Some(k) => m[i][k],
                None => m[i].iter().fold(S::zero(), |acc, &v| acc + v),
            })
            .collect()
    };
    let fi = col(&finv, None);
    ms.push(outer(&col(&btf, None)));
    cs.push(fi.iter().fold(S::zero(), |acc, &v| acc + v).scale(-0.5));
    match spec.variance {
        Variance::Tsh => {
            ms.push(mat_mul(&btf, &transpose(&btf)));
            cs.push(trace_of(&finv).scale(-0.5));
        }
        Variance::TimeHet => {
            for k in 0..n {
                ms.push(outer(&col(&btf, Some(k))));
                cs.push(finv[k][k].scale(-0.5));
            }
        }
    }
    let jac = map_jacobian_generic(spec, tn);
    let mut mn: Vec<Sq<S>> = Vec::with_capacity(d);
    let mut cn: Vec<S> = Vec::with_capacity(d);
    for k in 0..d {
        let mut m = vec![vec![S::zero(); n]; n];
        let mut c = S::zero();
        for j in 0..d {
            let w = jac[j][k];
            for (row, src) in m.iter_mut().zip(&ms[j]) {
                for (x, &y) in row.iter_mut().zip(src) {
                    *x += w * y;
                }
            }
            c += w * cs[j];
        }
        mn.push(m);
        cn.push(c);
    }
    let mphi: Vec<Sq<S>> = mn.iter().map(|m| mat_mul(m, &phi_t)).collect();
    let mean = (0..d).map(|k| trace_of(&mphi[k]).scale(0.5) + cn[k]).collect();
    let mut cov = vec![vec![S::zero(); d]; d];
    for k in 0..d {
        for l in k..d {
            let v = trace_of(&mat_mul(&mphi[k], &mphi[l])).scale(0.5);
            cov[k][l] = v;
            cov[l][k] = v;
        }
    }
    Ok((mean, cov))
}

/// Derivatives used by the statistic at the unit root.
#[derive(Clone, Debug)]
pub struct SingularPointDerivatives {
    /// `½ ∂²l_i/∂r²` per individual.
    pub s1: DVector<f64>,
    /// `∂l_i/∂d` per individual, `d` being all coordinates but `r`.
    pub s2: DMatrix<f64>,
    /// Per-individual expectation blocks, scaled as `2/4!`, `1/2!` and `2/2!`.
    pub htilde: DMatrix<f64>,
}

struct RowLoglik<'a> {
    spec: ModelSpec,
    y: &'a [f64],
}

impl ScalarFn for RowLoglik<'_> {
    fn eval<S: Real>(&self, x: &[S]) -> S {
        loglik_individual(&self.spec, &map_theta(&self.spec, x), self.y)
    }
}

pub fn singular_derivatives(spec: &ModelSpec, data: &PanelData, tn: &[f64]) -> Result<SingularPointDerivatives> {
    spec.check_data(data)?;
    let th = map_theta_checked(spec, tn)?;
    check_admissible(spec, &th)?;
    let d = spec.dim();
    let s1 = DVector::from_fn(data.n, |i, _| {
        crate::jet::directional::<_, 3>(&RowLoglik { spec: *spec, y: data.row(i) }, tn, 0)[2]
    });
    let full = scores(spec, data, tn, Coords::Reparam)?;
    let s2 = full.columns(1, d - 1).into_owned();

    let truth = Truth::new(spec, &th, y1_second_moment(data))?;
    let sur = Surrogate { truth: &truth, coords: Coords::Reparam };
    let mut ht = DMatrix::zeros(d, d);
    let c4 = crate::jet::directional::<_, 5>(&sur, tn, 0);
    ht[(0, 0)] = 2.0 * c4[4];
    type J3 = Jet<Jet<f64, 2>, 3>;
    for k in 1..d {
        let x: Vec<J3> = tn
            .iter()
            .enumerate()
            .map(|(m, &v)| {
                let mut z = J3::cst(v);
                if m == 0 {
                    z += J3::t();
                }
                if m == k {
                    z += J3::constant(Jet::t());
                }
                z
            })
            .collect();
        let v = sur.eval(&x).c[2].c[1];
        ht[(0, k)] = v;
        ht[(k, 0)] = v;
    }
    let h = crate::jet::hessian(&sur, tn);
    for j in 1..d {
        for k in 1..d {
            ht[(j, k)] = h[(j, k)];
        }
    }
    Ok(SingularPointDerivatives { s1, s2, htilde: ht })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpConfig, Design};

    #[test]
    fn map_examples() {
        let spec = ModelSpec::tsh(Model::Re, 4);
        let star = ThetaN::singular_point(&spec, 1.7).to_vec();
        assert_eq!(map_theta(&spec, &star), vec![1.0, 0.0, 1.7, 0.0]);
        let tn = [0.5, 0.3, 2.0, 0.1];
        assert!((map_theta(&spec, &tn)[1] - 0.8).abs() < 1e-15);
        let back = unmap_theta(&spec, &map_theta(&spec, &tn)).unwrap();
        for (a, b) in back.iter().zip(tn) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(map_theta_checked(&spec, &[0.0, 0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn expected_loglik_at_truth_is_entropy() {
        let spec = ModelSpec::new(Model::Re, Variance::TimeHet, 5);
        let th = [0.4, 0.3, 1.0, 1.5, 0.7, 1.2, 0.2];
        let v = expected_loglik(&spec, &th, &th, 2.0, Coords::Structural).unwrap();
        let n = 4.0;
        let phi = DMatrix::from_fn(4, 4, |i, j| 0.3 + if i == j { th[2 + i] } else { 0.0 });
        let want = -0.5 * n * LN_2PI - 0.5 * phi.determinant().ln() - 0.5 * n;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn fe_constant_panel() {
        let mut cfg = DgpConfig::new(Design::NsNormal, 7, 5, 0.3, 3);
        cfg.error_scale = 0.0;
        let p = generate(&cfg).unwrap();
        for rho in [-0.5, 0.2, 1.0] {
            let l = loglik_fe(&p, Variance::Tsh, &[rho, 0.0, 1.0]).unwrap();
            assert!((l + 7.0 * 4.0 / 2.0 * LN_2PI).abs() < 1e-10);
        }
    }
}
