// Fit the random- and fixed-effects likelihoods to one simulated panel.

use panel_qlm::dgp::{generate, DgpConfig, Design};
use panel_qlm::estimation::{fit, FitOptions, Restriction};
use panel_qlm::likelihood::{Model, ModelSpec, Variance};

pub fn run() -> panel_qlm::Result<()> {
    let mut cfg = DgpConfig::new(Design::SNormal, 1000, 4, 0.5, 7);
    cfg.remove_time_effects = true;
    let data = generate(&cfg)?;
    for model in [Model::Re, Model::Fe] {
        for variance in [Variance::Tsh, Variance::TimeHet] {
            let spec = ModelSpec::new(model, variance, data.t);
            let f = fit(&spec, &data, None, &FitOptions::default())?;
            println!("{model:?} {variance:?}: rho = {:.4}, loglik = {:.2}, {:?}", f.rho(), f.loglik, f.regime);
        }
    }
    // restricted fit
    let spec = ModelSpec::tsh(Model::Fe, data.t);
    let f = fit(&spec, &data, Some(&Restriction::rho(&spec, 0.8)), &FitOptions::default())?;
    println!("FE with rho = 0.8 imposed: theta = {:.4?}", f.theta_hat);
    Ok(())
}

fn main() {
    run().unwrap();
}
