// Invert the QLM test over a grid of rho values.

use panel_qlm::dgp::{generate, DgpConfig, Design};
use panel_qlm::inference::{confidence_set, linspace, QlmOptions};
use panel_qlm::likelihood::{Model, ModelSpec};

pub fn run() -> panel_qlm::Result<()> {
    let data = generate(&DgpConfig::new(Design::SNormal, 500, 5, 0.6, 11))?;
    let spec = ModelSpec::tsh(Model::Fe, data.t);
    let cs = confidence_set(&spec, &data, 0.95, &linspace(-0.5, 1.0, 61), &QlmOptions::default())?;
    for [lo, hi] in &cs.intervals {
        println!("[{lo:.3}, {hi:.3}]");
    }
    println!("contains 0.6: {}", cs.contains(0.6));
    Ok(())
}

fn main() {
    run().unwrap();
}
