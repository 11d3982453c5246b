use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panel-qlm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("panel-qlm-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn simulate(path: &Path, design: &str, rho: &str) {
    let o = run(&["simulate", "--design", design, "--n", "200", "--t", "4", "--rho", rho, "--seed", "3", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_all_pass() {
    let o = run(&["verify", "--t-range", "3", "12"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() > 100);
    assert!(!text.contains("FAIL"));
    assert!(text.trim_end().ends_with("0 failed"));
}

#[test]
fn unit_root_test_uses_the_second_order_statistic() {
    let p = scratch("ur.csv");
    simulate(&p, "NS_Normal", "1");
    let o = run(&["test", "--model", "fe", "--h0-rho", "1.0", "--data", p.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "qlm1");
    assert_eq!(row[3], "1");
    let o = run(&["test", "--model", "fe", "--h0-rho", "0.5", "--data", p.to_str().unwrap()]);
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("qlm,"));
}

#[test]
fn subcommands_produce_output() {
    let p = scratch("s.csv");
    simulate(&p, "S_Normal", "0.5");
    let d = p.to_str().unwrap();
    for args in [
        vec!["estimate", "--data", d, "--model", "re"],
        vec!["confset", "--data", d, "--grid", "0:0.9:10"],
        vec!["gmm-ar", "--data", d, "--h0-rho", "0.5"],
        vec!["power", "--t", "4", "--curve", "map", "--grid", "0:2:5"],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).lines().count() >= 2, "{args:?}");
    }
}

#[test]
fn mc_writes_a_table_and_is_reproducible() {
    let spec = scratch("spec.toml");
    std::fs::write(&spec, "kind = \"size\"\nmodel = \"fe\"\nt = 4\nn = [50, 60]\nreplications = 3\nmaster_seed = 7\n").unwrap();
    let mut outputs = Vec::new();
    for (k, jobs) in ["1", "2"].iter().enumerate() {
        let out = scratch(&format!("table{k}.csv"));
        let o = run(&["mc", "--spec", spec.to_str().unwrap(), "--jobs", jobs, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.with_extension("manifest.json").exists());
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.split(',').count() == 7));
}

#[test]
fn bad_input_exits_with_two() {
    let bad = scratch("bad.csv");
    std::fs::write(&bad, "id,t,y\n1,1,0.5\n1,2,oops\n").unwrap();
    let ragged = scratch("ragged.csv");
    std::fs::write(&ragged, "id,t,y\n1,1,0.5\n1,2,0.1\n2,1,0.3\n").unwrap();
    let spec = scratch("bad.toml");
    std::fs::write(&spec, "kind = \"size\"\nmodel = \"fe\"\nt = 4\nn = [50]\nsigma_mu_sq = 25\nmaster_seed = 1\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["test", "--bogus"],
        vec!["simulate", "--design", "S_Normal", "--n", "10", "--t", "4", "--rho", "0.5"],
        vec!["simulate", "--design", "S_Normal", "--n", "10", "--t", "4", "--rho", "1", "--seed", "1"],
        vec!["estimate", "--data", bad.to_str().unwrap()],
        vec!["estimate", "--data", ragged.to_str().unwrap()],
        vec!["estimate", "--data", "/nonexistent/panel.csv"],
        vec!["mc", "--spec", spec.to_str().unwrap(), "--out", "/tmp/unused.csv"],
        vec!["power", "--t", "2", "--curve", "map"],
    ];
    for args in cases {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["simulate", "estimate", "test", "confset", "gmm-ar", "power", "verify", "mc"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(stdout(&o).contains("Usage"));
    }
}
