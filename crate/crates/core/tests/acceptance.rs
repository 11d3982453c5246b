// Acceptance run: one PASS/FAIL line per criterion.
//
// Criteria in EXPECTED_FAIL are reported but do not fail the run; see the
// README section on reproduction for what differs and why.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use panel_qlm::dgp::{derive_seed, generate, Design, DgpConfig, PanelData};
use panel_qlm::estimation::Restriction;
use panel_qlm::harness::{self, ExperimentSpec, Kind, Table};
use panel_qlm::inference::{chi2_sf, gmm_ar_test, qlm1_test, qlm_c_test, qlm_test, QlmOptions, TestResult};
use panel_qlm::likelihood::*;
use panel_qlm::matrixkit::rational;
use panel_qlm::power::*;
use panel_qlm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SEED: u64 = 1;

const EXPECTED_FAIL: [&str; 3] = ["table5-rho0.5", "table7-rho0.99", "pattern-asymmetry"];

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn add(&mut self, id: &str, pass: bool, detail: impl Into<String>) {
        let detail = detail.into();
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id.to_string(), pass, detail));
    }
}

// ---- analytic constants

fn analytic(rep: &mut Report) {
    let start = Instant::now();
    let checks = verify(2, 12).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed = checks.iter().filter(|c| !c.pass).count();
    rep.add("identities-T2..12", failed == 0 && secs < 1.0, format!("{} checks, {failed} failed, {secs:.3}s", checks.len()));

    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut exact = true;
    for t in 4..=10 {
        let want = delta_closed(t);
        exact &= delta_from_ingredients(&local_ingredients(t).unwrap()).unwrap() == want;
        exact &= gmm_ar_delta_rational(t).unwrap() == want;
        let w: f64 = num::ToPrimitive::to_f64(&want).unwrap();
        let root = map_roots(t, 1.0).unwrap()[0];
        worst = worst.max((root - w).abs() / w);
    }
    exact &= delta_closed(4) == rational(5, 3) && delta_closed(9) == rational(105, 1);
    let secs = start.elapsed().as_secs_f64();
    rep.add(
        "delta-three-ways-T4..10",
        exact && worst < 1e-10 && secs < 5.0,
        format!("rational forms agree: {exact}, eigenvalue rel err {worst:.1e}, {secs:.3}s"),
    );

    let li = local_ingredients(4).unwrap();
    let ok = li.c3 == vec![rational(26, 1), rational(7, 1), rational(3, 1)]
        && li.sh[(0, 0)] == rational(78, 1)
        && li.sj[(0, 0)] == rational(52, 1);
    rep.add("T4-displays", ok, format!("c3 = {:?}, SHS(1,1) = {}, SJS(1,1) = {}", li.c3, li.sh[(0, 0)], li.sj[(0, 0)]));
}

// ---- derivatives

fn richardson(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
    let h = 1e-3 * x[k].abs().max(1.0);
    let d = |h: f64| {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[k] += h;
        b[k] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    };
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng, rho_lo: f64) -> Vec<f64> {
    let mut th = vec![rng.random_range(rho_lo..0.95), rng.random_range(0.0..1.5)];
    for _ in 0..spec.n_zeta() {
        th.push(rng.random_range(0.5..2.0));
    }
    if spec.model == Model::Re {
        th.push(rng.random_range(-0.5..0.5));
    }
    th
}

fn derivatives(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[SEED, 10]));
    for model in [Model::Re, Model::Fe] {
        for coords in ["theta", "theta_n"] {
            let mut worst = 0.0f64;
            for k in 0..20 {
                let t = [4, 5, 6, 9][k % 4];
                let spec = ModelSpec::new(model, if k % 2 == 0 { Variance::Tsh } else { Variance::TimeHet }, t);
                let design = [Design::SNormal, Design::SChiSq, Design::NsNormal][k % 3];
                let data = generate(&DgpConfig::new(design, 50, t, 0.6, derive_seed(&[SEED, 11, k as u64]))).unwrap();
                let (point, analytic, f): (Vec<f64>, DVector<f64>, Box<dyn Fn(&[f64]) -> f64>) = if coords == "theta" {
                    let th = random_theta(&spec, &mut rng, -0.9);
                    let s = score_total(&spec, &data, &th, Coords::Structural).unwrap();
                    let d = data.clone();
                    (th, s, Box::new(move |x: &[f64]| loglik(&spec, &d, x).unwrap()))
                } else {
                    let tn = unmap_theta(&spec, &random_theta(&spec, &mut rng, 0.05)).unwrap();
                    let s = score_n(&spec, &data, &tn).unwrap();
                    let d = data.clone();
                    (tn, s, Box::new(move |x: &[f64]| loglik(&spec, &d, &map_theta_checked(&spec, x).unwrap()).unwrap()))
                };
                for j in 0..point.len() {
                    let fd = richardson(&f, &point, j);
                    worst = worst.max((fd - analytic[j]).abs() / analytic[j].abs().max(1.0));
                }
            }
            rep.add(&format!("scores-vs-fd-{model:?}-{coords}"), worst < 1e-6, format!("20 points, max rel err {worst:.2e}"));
        }
    }

    // Population values for the S-Normal design at rho = 0.6, sigma_mu^2 = 1.
    let rho: f64 = 0.6;
    let s = 1.0 / (1.0 - rho * rho);
    let lambda = 1.0 / (1.0 + s);
    let cases = [
        (ModelSpec::tsh(Model::Re, 4), vec![rho, (1.0 - rho).powi(2) * s * lambda, 1.0, (1.0 - rho) * lambda]),
        (ModelSpec::tsh(Model::Fe, 4), vec![rho, (1.0 - rho).powi(2) * s, 1.0]),
    ];
    for (spec, th) in cases {
        let m2 = 1.0 + s;
        let expected = expected_hessian(&spec, &th, m2, Coords::Structural).unwrap();
        let (panels, n) = (2000, 200);
        let obs: Vec<DMatrix<f64>> = (0..panels)
            .into_par_iter()
            .map(|r| {
                let data = generate(&DgpConfig::new(Design::SNormal, n, 4, rho, derive_seed(&[SEED, 12, r]))).unwrap();
                observed_hessian(&spec, &data, &th, Coords::Structural).unwrap() / n as f64
            })
            .collect();
        let d = th.len();
        let mean = obs.iter().fold(DMatrix::zeros(d, d), |a, b| a + b) / panels as f64;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let var = obs.iter().map(|o| (o[(i, j)] - mean[(i, j)]).powi(2)).sum::<f64>() / (panels - 1) as f64;
                let se = (var / panels as f64).sqrt().max(1e-12);
                worst = worst.max((mean[(i, j)] - expected[(i, j)]).abs() / se);
            }
        }
        rep.add(
            &format!("expected-hessian-{:?}", spec.model),
            worst < 3.0,
            format!("2000 panels of N=200, largest deviation {worst:.2} MC SE"),
        );
    }

    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let t = 3 + (k % 6) as usize;
        let spec = ModelSpec::new(Model::Fe, if k % 2 == 0 { Variance::Tsh } else { Variance::TimeHet }, t);
        let mut th = random_theta(&spec, &mut rng, -0.9);
        let psi_min = th[2..].iter().cloned().fold(f64::INFINITY, f64::min);
        th[1] = rng.random_range(-0.5 * psi_min / spec.n() as f64..2.0);
        let design = [Design::SNormal, Design::SChiSq, Design::NsNormal][(k % 3) as usize];
        let data = generate(&DgpConfig::new(design, 20, t, rng.random_range(-0.5..0.99), derive_seed(&[SEED, 13, k]))).unwrap();
        let a = loglik_fe(&data, spec.variance, &th).unwrap();
        let b = dense_fe(&spec, &data, &th);
        worst = worst.max((a - b).abs() / b.abs());
    }
    rep.add("fe-factorized-vs-dense", worst < 1e-10, format!("100 cases, max rel diff {worst:.2e}"));
}

fn dense_fe(spec: &ModelSpec, data: &PanelData, th: &[f64]) -> f64 {
    let n = spec.n();
    let psi = |k: usize| match spec.variance {
        Variance::Tsh => th[2],
        Variance::TimeHet => th[2 + k],
    };
    let phi = DMatrix::from_fn(n, n, |i, j| th[1] + if i == j { psi(i) } else { 0.0 });
    let chol = phi.cholesky().unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    (0..data.n)
        .map(|i| {
            let y = data.row(i);
            let u = DVector::from_fn(n, |k, _| (y[k + 1] - y[0]) - th[0] * (y[k] - y[0]));
            -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + u.dot(&chol.solve(&u)))
        })
        .sum()
}

// ---- null calibration

fn ks_chi2_1(stats: &mut [f64]) -> f64 {
    stats.sort_by(|a, b| a.total_cmp(b));
    let n = stats.len() as f64;
    stats
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - chi2_sf(x, 1);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

fn calibration(rep: &mut Report, id: &str, reps: u64, one: impl Fn(u64) -> Result<TestResult> + Sync) {
    let start = Instant::now();
    let res: Vec<Option<f64>> = (0..reps).into_par_iter().map(|r| one(r).ok().map(|t| t.statistic)).collect();
    let mut stats: Vec<f64> = res.into_iter().flatten().collect();
    let failures = reps as usize - stats.len();
    let rate = stats.iter().filter(|s| chi2_sf(**s, 1) < 0.05).count() as f64 / stats.len() as f64;
    let ks = ks_chi2_1(&mut stats);
    rep.add(
        id,
        (0.041..=0.059).contains(&rate) && ks < 0.035,
        format!("rejection {rate:.4}, KS {ks:.4}, {failures} failed fits, {:.1}s", start.elapsed().as_secs_f64()),
    );
}

fn null_calibration(rep: &mut Report) {
    let o = QlmOptions::default();
    for t in [4, 9] {
        for rho in [0.5, 0.8, 0.95] {
            let spec = ModelSpec::tsh(Model::Re, t);
            let r = Restriction::rho(&spec, rho);
            calibration(rep, &format!("null-qlm-T{t}-rho{rho}"), 2000, |k| {
                let seed = derive_seed(&[SEED, 20, t as u64, (rho as f64).to_bits(), k]);
                let data = generate(&DgpConfig::new(Design::SNormal, 1000, t, rho, seed))?;
                qlm_test(&spec, &data, &r, &o)
            });
        }
    }
    let spec = ModelSpec::tsh(Model::Fe, 4);
    let r = Restriction::rho(&spec, 1.0);
    calibration(rep, "null-qlm1-unit-root", 2000, |k| {
        let data = generate(&DgpConfig::new(Design::NsNormal, 1000, 4, 1.0, derive_seed(&[SEED, 21, k])))?;
        qlm1_test(&spec, &data, &r, &o)
    });
}

// ---- tables

const SIZE_T1: [f64; 7] = [0.0532, 0.0504, 0.0452, 0.0528, 0.0520, 0.0552, 0.0504];
const SIZE_T2: [f64; 7] = [0.0500, 0.0468, 0.0464, 0.0568, 0.0496, 0.0508, 0.0480];

fn rate(t: &Table, d: Design, n: usize, rho: f64) -> f64 {
    t.cells.iter().find(|c| c.design == d && c.n == n && c.rho == rho).unwrap().rejection_rate
}

fn power_table(model: Model, t: usize) -> Table {
    let mut spec = ExperimentSpec::new(Kind::Power, model, t, vec![100, 250], SEED);
    spec.replications = 2500;
    harness::run(&spec).unwrap()
}

fn tables(rep: &mut Report) {
    for (model, reference, name) in [(Model::Re, SIZE_T1, "table1"), (Model::Fe, SIZE_T2, "table2")] {
        let mut spec = ExperimentSpec::new(Kind::Size, model, 4, vec![100], SEED);
        spec.designs = vec![Design::SNormal];
        spec.replications = 2500;
        let table = harness::run(&spec).unwrap();
        for (rho, want) in harness::SIZE_RHOS.iter().zip(reference) {
            let got = rate(&table, Design::SNormal, 100, *rho);
            rep.add(&format!("{name}-rho{rho}"), (got - want).abs() <= 0.013, format!("{got:.4} vs reference {want:.4}"));
        }
    }

    let start = Instant::now();
    let t5 = power_table(Model::Re, 4);
    let t6 = power_table(Model::Fe, 4);
    let t7 = power_table(Model::Re, 9);
    let t8 = power_table(Model::Fe, 9);
    println!("# power tables 5-8 at 2500 reps: {:.1}s", start.elapsed().as_secs_f64());

    let p = |r| rate(&t5, Design::SNormal, 250, r);
    rep.add("table5-rho0.5", (p(0.5) - 0.567).abs() <= 0.042, format!("{:.4} vs reference 0.567", p(0.5)));
    rep.add(
        "table5-row-pattern",
        p(0.5) > p(0.6) && p(0.6) > p(0.7) && p(0.7) > p(0.9),
        format!("S-Normal N=250 row {:.3} {:.3} {:.3} {:.3} {:.3} {:.3}", p(0.5), p(0.6), p(0.7), p(0.9), p(0.95), p(0.99)),
    );
    let q = rate(&t7, Design::SNormal, 250, 0.99);
    rep.add("table7-rho0.99", (q - 0.992).abs() <= 0.02, format!("{q:.4} vs reference 0.992"));

    let avg = |t: &Table, d: Design, n: usize| harness::POWER_RHOS.iter().map(|&r| rate(t, d, n, r)).sum::<f64>() / 6.0;
    let all = [(&t5, "5"), (&t6, "6"), (&t7, "7"), (&t8, "8")];
    let mut bad = Vec::new();
    for (t, name) in all {
        for d in Design::ALL {
            if avg(t, d, 250) <= avg(t, d, 100) {
                bad.push(format!("N: table {name} {}", d.label()));
            }
        }
    }
    for (a, b, name) in [(&t5, &t7, "5<7"), (&t6, &t8, "6<8")] {
        for d in Design::ALL {
            for n in [100, 250] {
                if avg(b, d, n) <= avg(a, d, n) {
                    bad.push(format!("T: {name} {} N={n}", d.label()));
                }
            }
        }
    }
    rep.add("pattern-power-increases-in-N-and-T", bad.is_empty(), format!("row averages; violations {bad:?}"));

    let mut bad = Vec::new();
    for (re, fe, name) in [(&t5, &t6, "T=4"), (&t7, &t8, "T=9")] {
        for d in [Design::SNormal, Design::SChiSq] {
            for n in [100, 250] {
                if avg(re, d, n) <= avg(fe, d, n) {
                    bad.push(format!("{name} {} N={n}", d.label()));
                }
            }
        }
    }
    rep.add("pattern-re-above-fe", bad.is_empty(), format!("stationary designs, row averages; violations {bad:?}"));

    let mut bad = Vec::new();
    for (t, name) in all {
        for d in Design::ALL {
            for n in [100, 250] {
                let (lo, hi) = (rate(t, d, n, 0.7), rate(t, d, n, 0.9));
                if lo <= hi {
                    bad.push(format!("table {name} {} N={n} {lo:.3}/{hi:.3}", d.label()));
                }
            }
        }
    }
    rep.add("pattern-asymmetry", bad.is_empty(), format!("power(0.7) > power(0.9) in every column; violations {bad:?}"));
}

// ---- local power

fn local_power(rep: &mut Report) {
    let (n, reps) = (40_000usize, 1000u64);
    let a = 1.0 - (n as f64).powf(-0.25);
    let spec = ModelSpec::tsh(Model::Fe, 4);
    let o = QlmOptions::default();
    let start = Instant::now();
    let res: Vec<(Option<bool>, Option<bool>)> = (0..reps)
        .into_par_iter()
        .map(|k| {
            let data = generate(&DgpConfig::new(Design::NsNormal, n, 4, 1.0, derive_seed(&[SEED, 30, k]))).unwrap();
            let q = qlm_c_test(&spec, &data, a, &o).ok().map(|t| t.p_value < 0.05);
            let g = gmm_ar_test(&data, a, true).ok().map(|t| t.p_value < 0.05);
            (q, g)
        })
        .collect();
    let share = |v: Vec<Option<bool>>| {
        let ok: Vec<bool> = v.into_iter().flatten().collect();
        (ok.iter().filter(|b| **b).count() as f64 / ok.len() as f64, reps as usize - ok.len())
    };
    let (q, qf) = share(res.iter().map(|r| r.0).collect());
    let (g, gf) = share(res.iter().map(|r| r.1).collect());
    let qw = noncentral_chi2_sf(chi2_critical(1.0, 0.05).unwrap(), 1.0, 5.0 / 3.0).unwrap();
    let gw = noncentral_chi2_sf(chi2_critical(4.0, 0.05).unwrap(), 4.0, 5.0 / 3.0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    rep.add("local-power-qlm-c", (q - qw).abs() <= 0.05, format!("{q:.4} vs {qw:.4}, {qf} failed, {secs:.1}s"));
    rep.add("local-power-gmm-ar", (g - gw).abs() <= 0.05 && g < q, format!("{g:.4} vs {gw:.4} (qlm-c {q:.4}), {gf} failed"));
}

fn main() {
    let mut rep = Report { lines: Vec::new() };
    let start = Instant::now();
    analytic(&mut rep);
    derivatives(&mut rep);
    null_calibration(&mut rep);
    tables(&mut rep);
    local_power(&mut rep);
    let failed: Vec<&String> = rep.lines.iter().filter(|l| !l.1).map(|l| &l.0).collect();
    let unexpected: Vec<&&String> = failed.iter().filter(|id| !EXPECTED_FAIL.contains(&id.as_str())).collect();
    println!(
        "{} criteria, {} passed, {} failed ({} expected), {:.0}s",
        rep.lines.len(),
        rep.lines.len() - failed.len(),
        failed.len(),
        failed.len() - unexpected.len(),
        start.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
