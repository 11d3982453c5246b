//! Synthetic panels from `y_it = ρ y_i,t-1 + (1-ρ) μ_i + ε_it`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "S_Normal", alias = "s-normal", alias = "S-Normal")]
    SNormal,
    #[serde(rename = "S_ChiSq", alias = "s-chisq", alias = "S-ChiSq")]
    SChiSq,
    #[serde(rename = "NS_Normal", alias = "ns-normal", alias = "NS-Normal")]
    NsNormal,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::SNormal, Design::SChiSq, Design::NsNormal];

    pub fn label(self) -> &'static str {
        match self {
            Design::SNormal => "S_Normal",
            Design::SChiSq => "S_ChiSq",
            Design::NsNormal => "NS_Normal",
        }
    }

    pub fn error_dist(self) -> ErrorDist {
        match self {
            Design::SChiSq => ErrorDist::ChiSq1Standardized,
            _ => ErrorDist::Normal,
        }
    }

    pub fn stationary(self) -> bool {
        !matches!(self, Design::NsNormal)
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "s_normal" => Ok(Design::SNormal),
            "s_chisq" => Ok(Design::SChiSq),
            "ns_normal" => Ok(Design::NsNormal),
            _ => Err(Error::Input(format!("unknown design '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorDist {
    Normal,
    ChiSq1Standardized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub t: usize,
    pub rho: f64,
    pub sigma_mu_sq: f64,
    pub error_dist: ErrorDist,
    pub design: Design,
    pub remove_time_effects: bool,
    pub seed: u64,
    /// Multiplies every ε draw; 0 gives a noiseless panel.
    pub error_scale: f64,
    /// Replaces the random individual effects with a constant.
    pub mu_override: Option<f64>,
}

impl DgpConfig {
    pub fn new(design: Design, n: usize, t: usize, rho: f64, seed: u64) -> Self {
        DgpConfig {
            n,
            t,
            rho,
            sigma_mu_sq: 1.0,
            error_dist: design.error_dist(),
            design,
            remove_time_effects: false,
            seed,
            error_scale: 1.0,
            mu_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.t < 3 {
            return Err(Error::Domain(format!("need N >= 2 and T >= 3, got N={} T={}", self.n, self.t)));
        }
        if !(self.rho > -1.0 && self.rho <= 1.0) {
            return Err(Error::Domain(format!("rho must lie in (-1, 1], got {}", self.rho)));
        }
        if self.design.stationary() && self.rho >= 1.0 {
            return Err(Error::Domain("stationary initial conditions need |rho| < 1".into()));
        }
        if self.error_dist != self.design.error_dist() {
            return Err(Error::Domain(format!(
                "design {} requires {:?} errors",
                self.design.label(),
                self.design.error_dist()
            )));
        }
        if !(self.sigma_mu_sq >= 0.0) || !(self.error_scale >= 0.0) {
            return Err(Error::Domain("variances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Where a panel came from.
#[derive(Clone, Debug, PartialEq)]
pub enum PanelSource {
    Generated(DgpConfig),
    External(String),
}

/// Balanced panel, one row per individual, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelData {
    pub n: usize,
    pub t: usize,
    y: Vec<f64>,
    pub meta: PanelSource,
}

impl PanelData {
    pub fn from_rows(n: usize, t: usize, y: Vec<f64>, meta: PanelSource) -> Result<Self> {
        if y.len() != n * t {
            return Err(Error::Shape(format!("expected {} values for {n}x{t}, got {}", n * t, y.len())));
        }
        if t < 3 {
            return Err(Error::Domain(format!("panels need T >= 3, got {t}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("panel contains non-finite values".into()));
        }
        Ok(PanelData { n, t, y, meta })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.t..(i + 1) * self.t]
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> PanelData {
        PanelData { n: self.n, t: self.t, y: self.y.iter().map(|&v| f(v)).collect(), meta: self.meta.clone() }
    }

    /// Panel restricted to the given individuals, in that order.
    pub fn select(&self, idx: &[usize]) -> PanelData {
        let mut y = Vec::with_capacity(idx.len() * self.t);
        for &i in idx {
            y.extend_from_slice(self.row(i));
        }
        PanelData { n: idx.len(), t: self.t, y, meta: self.meta.clone() }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a tuple of counters into a single seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |h, &p| mix(h ^ mix(p)))
}

fn draw_error(rng: &mut ChaCha8Rng, dist: ErrorDist) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    match dist {
        ErrorDist::Normal => z,
        ErrorDist::ChiSq1Standardized => (z * z - 1.0) / std::f64::consts::SQRT_2,
    }
}

pub fn generate(cfg: &DgpConfig) -> Result<PanelData> {
    cfg.validate()?;
    let (n, t, rho) = (cfg.n, cfg.t, cfg.rho);
    let sd_mu = cfg.sigma_mu_sq.sqrt();
    let base = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = Vec::with_capacity(n * t);
    for i in 0..n {
        let mut rng = base.clone();
        rng.set_stream(i as u64);
        let z: f64 = rng.sample(StandardNormal);
        let mu = cfg.mu_override.unwrap_or(sd_mu * z);
        let v1 = match cfg.design {
            Design::NsNormal => 0.0,
            Design::SNormal | Design::SChiSq => {
                draw_error(&mut rng, cfg.error_dist) / (1.0 - rho * rho).sqrt()
            }
        };
        let mut prev = mu + v1;
        y.push(prev);
        for _ in 1..t {
            let e = cfg.error_scale * draw_error(&mut rng, cfg.error_dist);
            prev = rho * prev + (1.0 - rho) * mu + e;
            y.push(prev);
        }
    }
    let panel = PanelData { n, t, y, meta: PanelSource::Generated(cfg.clone()) };
    Ok(if cfg.remove_time_effects { demean_time_effects(&panel)? } else { panel })
}

/// Subtracts cross-sectional means period by period.
pub fn demean_time_effects(data: &PanelData) -> Result<PanelData> {
    if data.n < 2 {
        return Err(Error::Domain("time-effect removal needs N >= 2".into()));
    }
    let mut means = vec![0.0; data.t];
    for i in 0..data.n {
        for (m, v) in means.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= data.n as f64;
    }
    let mut y = data.y.clone();
    for i in 0..data.n {
        for s in 0..data.t {
            y[i * data.t + s] -= means[s];
        }
    }
    Ok(PanelData { n: data.n, t: data.t, y, meta: data.meta.clone() })
}
