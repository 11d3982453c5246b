use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use panel_qlm::dgp::{generate, DgpConfig, Design, PanelData};
use panel_qlm::estimation::{fit, FitOptions, FitResult, Restriction};
use panel_qlm::harness::{emit_table, run_timed, ExperimentSpec, Layout};
use panel_qlm::inference::{
    confidence_set, gmm_ar_test, linspace, qlm1_test, qlm_test, test_rho, QlmOptions, TestResult,
};
use panel_qlm::likelihood::{Model, ModelSpec, Variance};
use panel_qlm::power::{map_curve, power_curve, verify, CurveVariant, PowerCurve};
use panel_qlm::{io, Error, Result};

#[derive(Parser)]
#[command(name = "panel-qlm", version, about = "Quasi-LM inference for the panel AR(1) model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a panel and write it as CSV
    Simulate(SimulateArgs),
    /// Fit the RE or FE likelihood
    Estimate(EstimateArgs),
    /// QLM test of a linear restriction (qlm1 at rho = 1)
    Test(TestArgs),
    /// Confidence set for rho by inverting the QLM test
    Confset(ConfsetArgs),
    /// GMM-AR test of rho = a
    GmmAr(GmmArArgs),
    /// Local power curve near the unit root
    Power(PowerArgs),
    /// Check the exact matrix identities and noncentrality formulas
    Verify(VerifyArgs),
    /// Run a Monte Carlo size or power table
    Mc(McArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Panel CSV; long format `id,t,y` unless --wide
    #[arg(long)]
    data: PathBuf,
    /// Read the panel as a headerless N x T matrix
    #[arg(long)]
    wide: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Likelihood: re or fe
    #[arg(long, default_value = "fe")]
    model: Model,
    /// Error variances: tsh (one variance) or time-het (one per period)
    #[arg(long, default_value = "tsh", value_parser = parse_variance)]
    variance: Variance,
}

#[derive(Args)]
struct OutArgs {
    /// Output path; stdout if omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// S_Normal, S_ChiSq or NS_Normal
    #[arg(long, default_value = "S_Normal")]
    design: Design,
    /// Number of individuals
    #[arg(long)]
    n: usize,
    /// Number of periods
    #[arg(long)]
    t: usize,
    /// Autoregressive parameter
    #[arg(long)]
    rho: f64,
    /// Variance of the individual effects
    #[arg(long, default_value_t = 1.0)]
    sigma_mu_sq: f64,
    /// Random seed
    #[arg(long)]
    seed: u64,
    /// Subtract cross-sectional means period by period
    #[arg(long)]
    remove_time_effects: bool,
    /// Write a headerless N x T matrix
    #[arg(long)]
    wide: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Fix rho at this value
    #[arg(long)]
    h0_rho: Option<f64>,
    /// Emit JSON instead of CSV
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Test rho = value
    #[arg(long, conflicts_with = "restriction", required_unless_present = "restriction")]
    h0_rho: Option<f64>,
    /// Test A theta_n = a, with A and a read from headerless CSV files
    #[arg(long, num_args = 2, value_names = ["A_CSV", "a_CSV"])]
    restriction: Option<Vec<PathBuf>>,
    /// Significance level
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Use the centered OPG
    #[arg(long)]
    centered_opg: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ConfsetArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Grid of rho values as lo:hi:n
    #[arg(long, default_value = "-0.99:1:401", value_parser = parse_grid)]
    grid: Grid,
    /// Use the centered OPG
    #[arg(long)]
    centered_opg: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GmmArArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Test rho = value
    #[arg(long)]
    h0_rho: f64,
    /// Significance level
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PowerArgs {
    /// Number of periods (at least 4)
    #[arg(long)]
    t: usize,
    /// qlm_c_tsh, gmm_ar or map
    #[arg(long, default_value = "qlm_c_tsh")]
    curve: CurveVariant,
    /// Grid of local alternatives e as lo:hi:n
    #[arg(long, default_value = "0:3:31", value_parser = parse_grid)]
    grid: Grid,
    /// Significance level
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smallest and largest T
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [2, 12])]
    t_range: Vec<usize>,
    /// Emit JSON instead of text
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct McArgs {
    /// Experiment spec in TOML
    #[arg(long)]
    spec: PathBuf,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override master_seed from the spec
    #[arg(long)]
    seed: Option<u64>,
    /// grid (rho rows by design and N columns) or long (one row per cell)
    #[arg(long, default_value = "grid")]
    layout: Layout,
    /// Where to write the run manifest; defaults to the output path with .manifest.json
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Debug)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected lo:hi:n, got '{s}'"));
    }
    let lo: f64 = parts[0].parse().map_err(|_| format!("bad lower bound '{}'", parts[0]))?;
    let hi: f64 = parts[1].parse().map_err(|_| format!("bad upper bound '{}'", parts[1]))?;
    let n: usize = parts[2].parse().map_err(|_| format!("bad point count '{}'", parts[2]))?;
    if n == 0 || !(lo.is_finite() && hi.is_finite()) || (n > 1 && lo >= hi) {
        return Err(format!("grid '{s}' is empty or decreasing"));
    }
    Ok(Grid(linspace(lo, hi, n)))
}

fn parse_variance(s: &str) -> std::result::Result<Variance, String> {
    match s {
        "tsh" => Ok(Variance::Tsh),
        "time-het" | "time_het" => Ok(Variance::TimeHet),
        _ => Err(format!("unknown variance '{s}' (tsh or time-het)")),
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("level must lie in (0, 1), got {level}")))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn load(d: &DataArgs) -> Result<PanelData> {
    if !d.data.is_file() {
        return Err(Error::Input(format!("{}: no such file", d.data.display())));
    }
    io::read_panel(&d.data, d.wide)
}

fn emit(out: &OutArgs, text: &str) -> Result<()> {
    match &out.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn spec_for(m: &ModelArgs, data: &PanelData) -> Result<ModelSpec> {
    let spec = ModelSpec::new(m.model, m.variance, data.t);
    spec.check_data(data)?;
    Ok(spec)
}

fn fit_csv(f: &FitResult) -> String {
    let theta = f.theta_hat.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(" ");
    format!(
        "rho,loglik,converged,regime,theta_hat\n{:.12e},{:.12e},{},{:?},{}\n",
        f.rho(),
        f.loglik,
        f.converged,
        f.regime,
        theta
    )
    .to_lowercase()
}

fn test_csv(results: &[TestResult], level: f64) -> String {
    let mut s = TestResult::CSV_HEADER.join(",");
    s.push_str(",level,reject\n");
    for r in results {
        s.push_str(&r.csv_row().join(","));
        s.push_str(&format!(",{level},{}\n", r.rejects(level)));
    }
    s
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = DgpConfig::new(a.design, a.n, a.t, a.rho, a.seed);
    cfg.sigma_mu_sq = a.sigma_mu_sq;
    cfg.remove_time_effects = a.remove_time_effects;
    let data = generate(&cfg)?;
    let mut buf = Vec::new();
    if a.wide {
        io::write_wide(&data, &mut buf)?;
    } else {
        io::write_long(&data, &mut buf)?;
    }
    emit(&a.out, &String::from_utf8_lossy(&buf))
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let data = load(&a.data)?;
    let spec = spec_for(&a.model, &data)?;
    let r = a.h0_rho.map(|v| Restriction::rho(&spec, v));
    let f = fit(&spec, &data, r.as_ref(), &FitOptions::default())?;
    let text = if a.json {
        serde_json::to_string_pretty(&f).expect("fit serializes") + "\n"
    } else {
        fit_csv(&f)
    };
    emit(&a.out, &text)
}

fn test(a: &TestArgs) -> Result<()> {
    check_level(a.level)?;
    let data = load(&a.data)?;
    let spec = spec_for(&a.model, &data)?;
    let opts = QlmOptions { centered_opg: a.centered_opg, ..QlmOptions::default() };
    let res = match (&a.restriction, a.h0_rho) {
        (Some(files), _) => {
            let a_mat = io::read_matrix(&files[0])?;
            let rhs = io::read_matrix(&files[1])?;
            let r = Restriction::new(a_mat, DVector::from_column_slice(rhs.as_slice()))?;
            if r.fixed_rho().is_some_and(|v| (v - 1.0).abs() < 1e-12) {
                qlm1_test(&spec, &data, &r, &opts)?
            } else {
                qlm_test(&spec, &data, &r, &opts)?
            }
        }
        (None, Some(v)) => {
            let m = panel_qlm::estimation::Moments::new(&spec, &data)?;
            test_rho(&spec, &data, &m, v, &opts)?
        }
        (None, None) => return Err(Error::Input("give --h0-rho or --restriction".into())),
    };
    emit(&a.out, &test_csv(&[res], a.level))
}

fn confset(a: &ConfsetArgs) -> Result<()> {
    let data = load(&a.data)?;
    let spec = spec_for(&a.model, &data)?;
    let opts = QlmOptions { centered_opg: a.centered_opg, ..QlmOptions::default() };
    let cs = confidence_set(&spec, &data, a.level, &a.grid.0, &opts)?;
    let mut s = format!("# level {} over {} grid points, {} failed\nlower,upper\n", cs.level, cs.grid.len(), cs.failures.len());
    for [lo, hi] in &cs.intervals {
        s.push_str(&format!("{lo},{hi}\n"));
    }
    for (g, why) in &cs.failures {
        eprintln!("rho = {g}: {why}");
    }
    emit(&a.out, &s)
}

fn gmm_ar(a: &GmmArArgs) -> Result<()> {
    check_level(a.level)?;
    let data = load(&a.data)?;
    let r = gmm_ar_test(&data, a.h0_rho, true)?;
    emit(&a.out, &test_csv(&[r], a.level))
}

fn power(a: &PowerArgs) -> Result<()> {
    let c: PowerCurve = match a.curve {
        CurveVariant::Map => map_curve(a.t, &a.grid.0, a.level)?,
        v => power_curve(a.t, v, &a.grid.0, a.level)?,
    };
    let mut s = String::from(PowerCurve::CSV_HEADER);
    s.push('\n');
    for row in c.csv_rows() {
        s.push_str(&row);
        s.push('\n');
    }
    emit(&a.out, &s)
}

fn run_verify(a: &VerifyArgs) -> Result<bool> {
    let checks = verify(a.t_range[0], a.t_range[1])?;
    let ok = checks.iter().all(|c| c.pass);
    let text = if a.json {
        serde_json::to_string_pretty(&checks).expect("checks serialize") + "\n"
    } else {
        let mut s = String::new();
        for c in &checks {
            s.push_str(&format!("{} T={:<3} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.t, c.name, c.detail));
        }
        let failed = checks.iter().filter(|c| !c.pass).count();
        s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
        s
    };
    emit(&a.out, &text)?;
    Ok(ok)
}

fn mc(a: &McArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(Error::Domain("--jobs must be at least 1".into()));
    }
    let mut spec = ExperimentSpec::from_toml(&read_text(&a.spec)?)?;
    if let Some(s) = a.seed {
        spec.master_seed = s;
    }
    let (table, manifest) = run_timed(&spec, a.jobs)?;
    emit(&a.out, &emit_table(&table, a.layout)?)?;
    let mpath = a.manifest.clone().or_else(|| a.out.out.as_ref().map(|p| p.with_extension("manifest.json")));
    if let Some(p) = mpath {
        fs::write(p, manifest.to_json() + "\n")?;
    }
    for c in table.cells.iter().filter(|c| c.flagged) {
        eprintln!("warning: {} N={} rho={} lost {} of {} replications", c.design.label(), c.n, c.rho, c.failures, spec.replications);
    }
    Ok(())
}

fn dispatch(cmd: &Cmd) -> Result<bool> {
    if !matches!(cmd, Cmd::Mc(_)) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Estimate(a) => estimate(a),
        Cmd::Test(a) => test(a),
        Cmd::Confset(a) => confset(a),
        Cmd::GmmAr(a) => gmm_ar(a),
        Cmd::Power(a) => power(a),
        Cmd::Verify(a) => return run_verify(a),
        Cmd::Mc(a) => mc(a),
    }
    .map(|_| true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
