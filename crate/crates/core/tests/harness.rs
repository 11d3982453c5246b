use panel_qlm::dgp::Design;
use panel_qlm::harness::*;
use panel_qlm::likelihood::Model;

fn small(kind: Kind, reps: usize) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(kind, Model::Fe, 4, vec![60, 80], 99);
    s.replications = reps;
    s
}

#[test]
fn same_table_for_any_worker_count() {
    let mut spec = small(Kind::Size, 20);
    spec.rho_values = vec![0.5, 0.95];
    let a = run_with_jobs(&spec, 1).unwrap();
    let b = run_with_jobs(&spec, 3).unwrap();
    assert_eq!(a.cells, b.cells);
    assert_eq!(emit_table(&a, Layout::Long).unwrap(), emit_table(&b, Layout::Long).unwrap());
}

#[test]
fn zero_replications_give_an_empty_table() {
    let t = run(&small(Kind::Size, 0)).unwrap();
    assert!(t.cells.is_empty());
    assert_eq!(emit_table(&t, Layout::Long).unwrap(), format!("{LONG_HEADER}\n"));
    let grid = emit_table(&t, Layout::Grid).unwrap();
    assert_eq!(grid.lines().count(), 1);
    assert_eq!(grid.split(',').count(), 7);
}

#[test]
fn table_shapes() {
    let size = run(&small(Kind::Size, 2)).unwrap();
    let text = emit_table(&size, Layout::Grid).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + 7);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 6));
    assert_eq!(rows[0], "rho,S_Normal N=60,S_Normal N=80,S_ChiSq N=60,S_ChiSq N=80,NS_Normal N=60,NS_Normal N=80");
    assert_eq!(emit_table(&size, Layout::Long).unwrap().lines().count(), 1 + size.cells.len());

    let power = run(&small(Kind::Power, 2)).unwrap();
    let text = emit_table(&power, Layout::Grid).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text.starts_with("true_rho,"));
    assert!(power.cells.iter().all(|c| c.h0_rho == POWER_H0));
}

#[test]
fn missing_cells_are_an_error() {
    let mut t = run(&small(Kind::Size, 2)).unwrap();
    t.cells.pop();
    assert!(emit_table(&t, Layout::Grid).is_err());
    assert!(emit_table(&t, Layout::Long).is_ok());
}

#[test]
fn cell_arithmetic() {
    let t = run(&small(Kind::Size, 30)).unwrap();
    for c in &t.cells {
        assert_eq!(c.valid + c.failures, 30);
        let r = c.rejections as f64 / c.valid as f64;
        assert_eq!(c.rejection_rate, r);
        assert!((c.mc_se - (r * (1.0 - r) / c.valid as f64).sqrt()).abs() < 1e-15);
        assert_eq!(c.flagged, c.failures as f64 > 0.3);
    }
}

#[test]
fn toml_specs() {
    let s = ExperimentSpec::from_toml("kind = \"power\"\nmodel = \"re\"\nt = 9\nn = [100, 250]\nmaster_seed = 5\n").unwrap();
    assert_eq!(s.replications, 2500);
    assert_eq!(s.level, 0.05);
    assert_eq!(s.designs, Design::ALL.to_vec());
    assert_eq!(s.rhos(), POWER_RHOS.to_vec());
    assert_eq!(s.h0(0.5), 0.8);

    let bad = [
        "kind = \"size\"\nmodel = \"fe\"\nt = 4\nn = [100]\nsigma_mu_sq = 25\nmaster_seed = 1\n",
        "kind = \"size\"\nmodel = \"re\"\nt = 4\nn = [100]\nrho_values = [1.0]\nmaster_seed = 1\n",
        "kind = \"size\"\nmodel = \"re\"\nt = 2\nn = [100]\nmaster_seed = 1\n",
        "kind = \"size\"\nmodel = \"re\"\nt = 4\nn = [100]\nmaster_seed = 1\nseeds = 3\n",
        "kind = \"size\"\nmodel = \"re\"\nt = 4\nn = [100]\nmaster_seed = 1\ndesigns = [\"S_Normal\", \"NS_Normal\", \"S_Normal\"]\n",
        "kind = \"both\"\nmodel = \"re\"\nt = 4\nn = [100]\nmaster_seed = 1\n",
    ];
    for text in bad {
        assert!(ExperimentSpec::from_toml(text).unwrap_err().is_validation(), "{text}");
    }
    let ok = "kind = \"size\"\nmodel = \"re\"\nt = 4\nn = [100]\nrho_values = [1.0]\ndesigns = [\"NS_Normal\"]\nmaster_seed = 1\n";
    assert!(ExperimentSpec::from_toml(ok).is_ok());
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs");
    for k in 1..=12 {
        let text = std::fs::read_to_string(format!("{dir}/table{k}.toml")).unwrap();
        let s = ExperimentSpec::from_toml(&text).unwrap();
        assert_eq!(s.replications, 2500);
        assert_eq!(s.t, if [1, 2, 5, 6, 9, 11].contains(&k) { 4 } else { 9 });
    }
}

#[test]
fn manifest_records_the_run() {
    let (t, m) = run_timed(&small(Kind::Size, 3), 2).unwrap();
    assert_eq!(m.cells, t.cells.len());
    assert_eq!(m.master_seed, 99);
    let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(json["jobs"], 2);
    assert!(json["statistic"].as_str().unwrap().contains("uncentered"));
}
