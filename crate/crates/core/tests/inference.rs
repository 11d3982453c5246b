use nalgebra::{DMatrix, DVector};
use panel_qlm::dgp::{derive_seed, generate, DgpConfig, Design, PanelData, PanelSource};
use panel_qlm::estimation::{fit, FitOptions, Moments, Restriction};
use panel_qlm::inference::*;
use panel_qlm::likelihood::{opg, scores, Coords, Model, ModelSpec, Variance};

fn panel(design: Design, n: usize, t: usize, rho: f64, seed: u64) -> PanelData {
    generate(&DgpConfig::new(design, n, t, rho, seed)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn adjugate_gives_the_same_statistic() {
    let data = panel(Design::SNormal, 300, 5, 0.6, 1);
    for model in [Model::Re, Model::Fe] {
        let spec = ModelSpec::tsh(model, 5);
        let r = Restriction::rho(&spec, 0.7);
        let a = qlm_test(&spec, &data, &r, &QlmOptions::default()).unwrap();
        let b = qlm_test(&spec, &data, &r, &QlmOptions { adjugate: true, ..QlmOptions::default() }).unwrap();
        assert!(rel(a.statistic, b.statistic) < 1e-8, "{} vs {}", a.statistic, b.statistic);
    }
}

#[test]
fn full_restriction_at_the_estimate_gives_zero() {
    let data = panel(Design::SNormal, 400, 4, 0.5, 2);
    for model in [Model::Re, Model::Fe] {
        let spec = ModelSpec::tsh(model, 4);
        let f = fit(&spec, &data, None, &FitOptions::default()).unwrap();
        let tn = f.theta_n.unwrap();
        let r = Restriction::new(DMatrix::identity(spec.dim(), spec.dim()), DVector::from_vec(tn)).unwrap();
        let t = qlm_test(&spec, &data, &r, &QlmOptions::default()).unwrap();
        assert_eq!(t.df, spec.dim());
        assert!(t.statistic < 1e-8, "{model:?}: {}", t.statistic);
    }
}

#[test]
fn invariant_to_rescaling_and_relabeling() {
    let data = panel(Design::SChiSq, 250, 4, 0.5, 3);
    let scaled = data.map_values(|v| 3.7 * v);
    let perm: Vec<usize> = (0..data.n).rev().collect();
    let shuffled = data.select(&perm);
    for model in [Model::Re, Model::Fe] {
        let spec = ModelSpec::tsh(model, 4);
        let r = Restriction::rho(&spec, 0.6);
        let o = QlmOptions::default();
        let base = qlm_test(&spec, &data, &r, &o).unwrap().statistic;
        let s = qlm_test(&spec, &scaled, &r, &o).unwrap().statistic;
        let p = qlm_test(&spec, &shuffled, &r, &o).unwrap().statistic;
        assert!(rel(base, s) < 1e-8, "{model:?} scale: {base} vs {s}");
        assert!(rel(base, p) < 1e-8, "{model:?} permutation: {base} vs {p}");
        let g = gmm_ar_test(&data, 0.6, true).unwrap().statistic;
        let gp = gmm_ar_test(&shuffled, 0.6, true).unwrap().statistic;
        assert!(rel(g, gp) < 1e-10);
    }
}

#[test]
fn unit_root_needs_the_second_order_statistic() {
    let data = panel(Design::NsNormal, 300, 4, 1.0, 4);
    let spec = ModelSpec::tsh(Model::Fe, 4);
    let r = Restriction::rho(&spec, 1.0);
    assert!(qlm_test(&spec, &data, &r, &QlmOptions::default()).is_err());
    let q1 = qlm1_test(&spec, &data, &r, &QlmOptions::default()).unwrap();
    assert_eq!(q1.variant, Variant::Qlm1);
    assert_eq!(q1.df, 1);
    let m = Moments::new(&spec, &data).unwrap();
    let via = test_rho(&spec, &data, &m, 1.0, &QlmOptions::default()).unwrap();
    assert_eq!(via.statistic, q1.statistic);
}

#[test]
fn p_value_is_the_chi_square_tail() {
    let data = panel(Design::SNormal, 200, 5, 0.3, 5);
    let spec = ModelSpec::new(Model::Fe, Variance::TimeHet, 5);
    let t = qlm_test(&spec, &data, &Restriction::rho(&spec, 0.4), &QlmOptions::default()).unwrap();
    assert!(t.statistic >= 0.0 && t.statistic.is_finite());
    assert!((t.p_value - chi2_sf(t.statistic, t.df)).abs() < 1e-15);
}

#[test]
fn centering_is_irrelevant_at_a_zero_score_mean() {
    let data = panel(Design::SNormal, 300, 4, 0.5, 6);
    let spec = ModelSpec::tsh(Model::Fe, 4);
    let f = fit(&spec, &data, None, &FitOptions::default()).unwrap();
    let s = scores(&spec, &data, &f.theta_hat, Coords::Structural).unwrap();
    let d = (opg(&s, true) - opg(&s, false)).abs().max();
    assert!(d < 1e-10 * opg(&s, false).abs().max(), "{d}");
}

#[test]
fn gmm_ar_df_and_moment_validity() {
    assert_eq!(gmm_ar_test(&panel(Design::SNormal, 100, 4, 0.5, 7), 0.5, true).unwrap().df, 4);
    assert_eq!(gmm_ar_test(&panel(Design::SNormal, 200, 9, 0.5, 7), 0.5, true).unwrap().df, 34);
    let data = panel(Design::NsNormal, 100_000, 4, 1.0, 8);
    let m = gmm_ar_moments(&data, 1.0).unwrap();
    let n = m.nrows() as f64;
    for j in 0..m.ncols() {
        let c = m.column(j);
        let mean = c.sum() / n;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 4.0 * sd / n.sqrt(), "component {j}: {mean} (se {})", sd / n.sqrt());
    }
}

#[test]
fn gmm_ar_is_central_under_the_null() {
    let reps = 300;
    let p = 4.0;
    let mean: f64 = (0..reps)
        .map(|r| gmm_ar_test(&panel(Design::SNormal, 500, 4, 0.6, derive_seed(&[9, r])), 0.6, true).unwrap().statistic)
        .sum::<f64>()
        / reps as f64;
    assert!((mean - p).abs() < 3.0 * (2.0 * p / reps as f64).sqrt(), "mean {mean}");
}

#[test]
fn single_point_sets_cover() {
    let reps = 500;
    let mut hits = 0;
    for r in 0..reps {
        let data = panel(Design::SNormal, 250, 4, 0.5, derive_seed(&[10, r]));
        let cs = confidence_set(&ModelSpec::tsh(Model::Fe, 4), &data, 0.95, &[0.5], &QlmOptions::default()).unwrap();
        if cs.contains(0.5) {
            hits += 1;
        }
    }
    let cover = hits as f64 / reps as f64;
    assert!(cover >= 0.91, "coverage {cover}");
}

#[test]
fn confidence_set_intervals_are_runs() {
    let data = panel(Design::SNormal, 300, 5, 0.6, 11);
    let grid = linspace(-0.5, 1.0, 31);
    let cs = confidence_set(&ModelSpec::tsh(Model::Re, 5), &data, 0.9, &grid, &QlmOptions::default()).unwrap();
    assert_eq!(cs.accepted.len(), grid.len());
    let covered: usize = cs
        .intervals
        .iter()
        .map(|[lo, hi]| grid.iter().filter(|g| *g >= lo && *g <= hi).count())
        .sum();
    assert_eq!(covered, cs.accepted.iter().filter(|a| **a).count());
    for [lo, hi] in &cs.intervals {
        assert!(lo <= hi);
    }
    assert!(confidence_set(&ModelSpec::tsh(Model::Re, 5), &data, 1.2, &grid, &QlmOptions::default()).is_err());
    assert!(confidence_set(&ModelSpec::tsh(Model::Re, 5), &data, 0.9, &[0.5, 0.2], &QlmOptions::default()).is_err());
    assert!(confidence_set(&ModelSpec::tsh(Model::Re, 5), &data, 0.9, &[1.5], &QlmOptions::default()).is_err());
}

#[test]
fn noiseless_set_is_narrow() {
    let (n, t, rho) = (40, 5, 0.55);
    let mut y = Vec::new();
    for i in 0..n {
        let mu = (i as f64 * 0.37).sin() * 2.0;
        let mut v = mu + 1.0 + (i as f64 * 1.3).cos();
        y.push(v);
        for _ in 1..t {
            v = rho * v + (1.0 - rho) * mu;
            y.push(v);
        }
    }
    let data = PanelData::from_rows(n, t, y, PanelSource::External("noiseless".into())).unwrap();
    let grid = linspace(0.0, 0.99, 100);
    let step = grid[1] - grid[0];
    let cs = confidence_set(&ModelSpec::tsh(Model::Fe, t), &data, 0.95, &grid, &QlmOptions::default()).unwrap();
    // With the variance floor binding the set is empty here; nothing far from rho may enter.
    let accepted: Vec<f64> = grid.iter().zip(&cs.accepted).filter(|(_, a)| **a).map(|(g, _)| *g).collect();
    assert!(cs.failures.is_empty());
    for g in accepted {
        assert!((g - rho).abs() < 3.0 * step, "accepted {g}");
    }
}
