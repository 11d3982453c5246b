// A small Monte Carlo size table in both layouts.

use panel_qlm::dgp::Design;
use panel_qlm::harness::{emit_table, run as run_table, ExperimentSpec, Kind, Layout};
use panel_qlm::likelihood::Model;

pub fn run_example(replications: usize) -> panel_qlm::Result<()> {
    let mut spec = ExperimentSpec::new(Kind::Size, Model::Re, 4, vec![100], 2024);
    spec.designs = vec![Design::SNormal, Design::NsNormal];
    spec.rho_values = vec![0.5, 0.9];
    spec.replications = replications;
    let table = run_table(&spec)?;
    print!("{}", emit_table(&table, Layout::Grid)?);
    print!("{}", emit_table(&table, Layout::Long)?);
    Ok(())
}

pub fn run() -> panel_qlm::Result<()> {
    run_example(200)
}

fn main() {
    run().unwrap();
}
