//! Monte Carlo size and power tables for the QLM tests.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{derive_seed, generate, Design, DgpConfig};
use crate::error::{Error, Result};
use crate::estimation::{FitOptions, Moments};
use crate::inference::{test_rho, QlmOptions};
use crate::likelihood::{Model, ModelSpec};

/// Null value tested in power experiments.
pub const POWER_H0: f64 = 0.8;

pub const SIZE_RHOS: [f64; 7] = [0.2, 0.5, 0.8, 0.9, 0.95, 0.98, 0.99];
pub const POWER_RHOS: [f64; 6] = [0.5, 0.6, 0.7, 0.9, 0.95, 0.99];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Size,
    Power,
}

fn default_sigma_mu_sq() -> f64 {
    1.0
}
fn default_designs() -> Vec<Design> {
    Design::ALL.to_vec()
}
fn default_replications() -> usize {
    2500
}
fn default_level() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

/// One table. Read from TOML, e.g.
///
/// ```toml
/// kind = "size"
/// model = "re"
/// t = 4
/// n = [100, 250]
/// master_seed = 1
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: Kind,
    pub model: Model,
    pub t: usize,
    pub n: Vec<usize>,
    #[serde(default = "default_sigma_mu_sq")]
    pub sigma_mu_sq: f64,
    #[serde(default = "default_designs")]
    pub designs: Vec<Design>,
    /// True `ρ` per row; defaults to the standard grid for the kind.
    #[serde(default)]
    pub rho_values: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub centered_opg: bool,
    /// Let the fit leave `σ̃_v² ≥ 0` when that bound binds.
    #[serde(default = "default_true")]
    pub allow_relaxed: bool,
}

impl ExperimentSpec {
    pub fn new(kind: Kind, model: Model, t: usize, n: Vec<usize>, master_seed: u64) -> Self {
        ExperimentSpec {
            kind,
            model,
            t,
            n,
            sigma_mu_sq: 1.0,
            designs: default_designs(),
            rho_values: Vec::new(),
            replications: 2500,
            level: 0.05,
            master_seed,
            centered_opg: false,
            allow_relaxed: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Input(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn rhos(&self) -> Vec<f64> {
        if !self.rho_values.is_empty() {
            return self.rho_values.clone();
        }
        match self.kind {
            Kind::Size => SIZE_RHOS.to_vec(),
            Kind::Power => POWER_RHOS.to_vec(),
        }
    }

    /// `H₀` value for a row with true `ρ`.
    pub fn h0(&self, rho: f64) -> f64 {
        match self.kind {
            Kind::Size => rho,
            Kind::Power => POWER_H0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 3 {
            return Err(Error::Domain(format!("T must be at least 3, got {}", self.t)));
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 2) {
            return Err(Error::Domain("n must list sample sizes of at least 2".into()));
        }
        if self.designs.is_empty() {
            return Err(Error::Domain("designs must not be empty".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Domain(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if !(self.sigma_mu_sq >= 0.0 && self.sigma_mu_sq.is_finite()) {
            return Err(Error::Domain("sigma_mu_sq must be a nonnegative number".into()));
        }
        if self.model == Model::Fe && self.sigma_mu_sq != 1.0 {
            return Err(Error::Domain("fixed-effects tables do not depend on sigma_mu_sq; use model = \"re\"".into()));
        }
        for &rho in &self.rhos() {
            if !(rho > -1.0 && rho <= 1.0) {
                return Err(Error::Domain(format!("rho values must lie in (-1, 1], got {rho}")));
            }
            for d in &self.designs {
                if rho >= 1.0 && d.stationary() {
                    return Err(Error::Domain(format!("rho = 1 needs the NS_Normal design, not {}", d.label())));
                }
            }
        }
        if self.designs.iter().enumerate().any(|(i, d)| self.designs[..i].contains(d)) {
            return Err(Error::Domain("designs contain duplicates".into()));
        }
        Ok(())
    }

    fn qlm_options(&self) -> QlmOptions {
        QlmOptions {
            centered_opg: self.centered_opg,
            adjugate: false,
            fit: FitOptions { allow_relaxed: self.allow_relaxed, ..FitOptions::default() },
        }
    }

    fn table_id(&self) -> u64 {
        let kind = match self.kind {
            Kind::Size => 1,
            Kind::Power => 2,
        };
        derive_seed(&[kind, self.t as u64, self.sigma_mu_sq.to_bits()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub design: Design,
    pub rho: f64,
    pub n: usize,
    pub t: usize,
    pub h0_rho: f64,
    pub rejections: usize,
    /// Replications that produced a statistic.
    pub valid: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub mc_se: f64,
    /// More than 1% of replications failed.
    pub flagged: bool,
}

impl TableCell {
    fn from_counts(design: Design, rho: f64, n: usize, t: usize, h0_rho: f64, rejections: usize, valid: usize, failures: usize) -> Self {
        let (r, se) = if valid == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let r = rejections as f64 / valid as f64;
            (r, (r * (1.0 - r) / valid as f64).sqrt())
        };
        let total = valid + failures;
        TableCell {
            design,
            rho,
            n,
            t,
            h0_rho,
            rejections,
            valid,
            failures,
            rejection_rate: r,
            mc_se: se,
            flagged: total > 0 && failures as f64 > 0.01 * total as f64,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Table {
    pub spec: ExperimentSpec,
    pub cells: Vec<TableCell>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Reject,
    Accept,
    Failed,
}

fn fallback(opts: &QlmOptions) -> QlmOptions {
    let mut o = opts.clone();
    o.fit.max_iters = 5000;
    o.fit.grad_tol = 1e-6;
    o.fit.rho_starts = (0..=20).map(|k| k as f64 / 20.0).collect();
    o
}

fn attempt(spec: &ModelSpec, cfg: &DgpConfig, h0: f64, level: f64, opts: &QlmOptions) -> Option<bool> {
    let data = generate(cfg).ok()?;
    let m = Moments::new(spec, &data).ok()?;
    let r = test_rho(spec, &data, &m, h0, opts).ok()?;
    if !r.converged() || !r.statistic.is_finite() {
        return None;
    }
    Some(r.rejects(level))
}

/// One replication of one cell.
pub fn replicate(spec: &ExperimentSpec, design: Design, n: usize, rho: f64, rep: usize) -> Outcome {
    let ms = ModelSpec::tsh(spec.model, spec.t);
    let seed = derive_seed(&[spec.master_seed, spec.table_id(), design as u64, n as u64, rho.to_bits(), rep as u64]);
    let mut cfg = DgpConfig::new(design, n, spec.t, rho, seed);
    cfg.sigma_mu_sq = spec.sigma_mu_sq;
    cfg.remove_time_effects = true;
    let opts = spec.qlm_options();
    let h0 = spec.h0(rho);
    let res = attempt(&ms, &cfg, h0, spec.level, &opts).or_else(|| attempt(&ms, &cfg, h0, spec.level, &fallback(&opts)));
    match res {
        Some(true) => Outcome::Reject,
        Some(false) => Outcome::Accept,
        None => Outcome::Failed,
    }
}

/// Runs every cell of the table on the current rayon pool.
pub fn run(spec: &ExperimentSpec) -> Result<Table> {
    spec.validate()?;
    if spec.replications == 0 {
        return Ok(Table { spec: spec.clone(), cells: Vec::new() });
    }
    let rhos = spec.rhos();
    let mut keys = Vec::new();
    for &rho in &rhos {
        for &d in &spec.designs {
            for &n in &spec.n {
                keys.push((d, n, rho));
            }
        }
    }
    let jobs: Vec<(usize, usize)> =
        (0..keys.len()).flat_map(|c| (0..spec.replications).map(move |r| (c, r))).collect();
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|&(c, rep)| {
            let (d, n, rho) = keys[c];
            replicate(spec, d, n, rho, rep)
        })
        .collect();
    let cells = keys
        .iter()
        .enumerate()
        .map(|(c, &(d, n, rho))| {
            let chunk = &outcomes[c * spec.replications..(c + 1) * spec.replications];
            let rej = chunk.iter().filter(|&&o| o == Outcome::Reject).count();
            let fail = chunk.iter().filter(|&&o| o == Outcome::Failed).count();
            TableCell::from_counts(d, rho, n, spec.t, spec.h0(rho), rej, spec.replications - fail, fail)
        })
        .collect();
    Ok(Table { spec: spec.clone(), cells })
}

/// Runs the table on a dedicated pool with `jobs` workers.
pub fn run_with_jobs(spec: &ExperimentSpec, jobs: usize) -> Result<Table> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    pool.install(|| run(spec))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Grid,
    Long,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Layout::Grid),
            "long" => Ok(Layout::Long),
            _ => Err(Error::Input(format!("unknown layout '{s}' (expected grid or long)"))),
        }
    }
}

pub const LONG_HEADER: &str = "design,N,T,rho,h0_rho,replications,valid,failures,rejections,rejection_rate,mc_se,flagged";

fn fmt_rate(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x:.4}")
    }
}

/// Renders the table as CSV.
///
/// The grid layout has one row per `ρ` and one column per design and `N`;
/// every combination must be present.
pub fn emit_table(table: &Table, layout: Layout) -> Result<String> {
    let spec = &table.spec;
    let mut out = String::new();
    match layout {
        Layout::Long => {
            out.push_str(LONG_HEADER);
            out.push('\n');
            for c in &table.cells {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    c.design.label(),
                    c.n,
                    c.t,
                    c.rho,
                    c.h0_rho,
                    c.valid + c.failures,
                    c.valid,
                    c.failures,
                    c.rejections,
                    fmt_rate(c.rejection_rate),
                    fmt_rate(c.mc_se),
                    c.flagged
                ));
            }
        }
        Layout::Grid => {
            let mut head = vec![match spec.kind {
                Kind::Size => "rho".to_string(),
                Kind::Power => "true_rho".to_string(),
            }];
            for d in &spec.designs {
                for n in &spec.n {
                    head.push(format!("{} N={}", d.label(), n));
                }
            }
            out.push_str(&head.join(","));
            out.push('\n');
            if table.cells.is_empty() {
                return Ok(out);
            }
            let mut by_key = BTreeMap::new();
            for c in &table.cells {
                by_key.insert((c.design.label(), c.n, c.rho.to_bits()), c);
            }
            for rho in spec.rhos() {
                let mut row = vec![format!("{rho}")];
                for d in &spec.designs {
                    for &n in &spec.n {
                        let c = by_key.get(&(d.label(), n, rho.to_bits())).ok_or_else(|| {
                            Error::Domain(format!("missing cell design={} N={} rho={}", d.label(), n, rho))
                        })?;
                        row.push(fmt_rate(c.rejection_rate));
                    }
                }
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub crate_version: String,
    pub spec: ExperimentSpec,
    pub master_seed: u64,
    pub jobs: usize,
    pub statistic: String,
    pub elapsed_seconds: f64,
    pub cells: usize,
    pub total_failures: usize,
    pub flagged_cells: Vec<String>,
}

impl Manifest {
    pub fn new(table: &Table, jobs: usize, elapsed_seconds: f64) -> Self {
        let spec = &table.spec;
        Manifest {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            spec: spec.clone(),
            master_seed: spec.master_seed,
            jobs,
            statistic: format!("qlm ({} OPG), qlm1 at rho = 1", if spec.centered_opg { "centered" } else { "uncentered" }),
            elapsed_seconds,
            cells: table.cells.len(),
            total_failures: table.cells.iter().map(|c| c.failures).sum(),
            flagged_cells: table
                .cells
                .iter()
                .filter(|c| c.flagged)
                .map(|c| format!("{} N={} rho={}", c.design.label(), c.n, c.rho))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Runs a table and times it.
pub fn run_timed(spec: &ExperimentSpec, jobs: usize) -> Result<(Table, Manifest)> {
    let start = Instant::now();
    let table = run_with_jobs(spec, jobs)?;
    let m = Manifest::new(&table, jobs, start.elapsed().as_secs_f64());
    Ok((table, m))
}
