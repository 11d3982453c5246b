// The GMM-AR statistic next to the QLM statistic at the unit root.

use panel_qlm::dgp::{generate, DgpConfig, Design};
use panel_qlm::inference::{gmm_ar_test, qlm1_test, QlmOptions};
use panel_qlm::estimation::Restriction;
use panel_qlm::likelihood::{Model, ModelSpec};

pub fn run() -> panel_qlm::Result<()> {
    let data = generate(&DgpConfig::new(Design::NsNormal, 1000, 5, 0.9, 5))?;
    let spec = ModelSpec::tsh(Model::Fe, data.t);
    for a in [0.8, 0.9, 1.0] {
        let g = gmm_ar_test(&data, a, true)?;
        println!("GMM-AR rho = {a}: stat = {:7.3} on {} df, p = {:.4}", g.statistic, g.df, g.p_value);
    }
    let q = qlm1_test(&spec, &data, &Restriction::rho(&spec, 1.0), &QlmOptions::default())?;
    println!("QLM1   rho = 1:   stat = {:7.3} on {} df, p = {:.4}", q.statistic, q.df, q.p_value);
    Ok(())
}

fn main() {
    run().unwrap();
}
