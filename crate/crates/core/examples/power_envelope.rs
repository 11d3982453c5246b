// Local power near the unit root: QLM, GMM-AR and the maximal attainable curve.

use panel_qlm::inference::linspace;
use panel_qlm::power::{delta_closed, gmm_ar_df, map_curve, power_curve, CurveVariant};

pub fn run() -> panel_qlm::Result<()> {
    for t in [4, 6, 9] {
        println!("T = {t}: delta(e = 1) = {}, GMM-AR df = {}", delta_closed(t), gmm_ar_df(t)?);
    }
    let grid = linspace(0.0, 2.0, 9);
    let qlm = power_curve(4, CurveVariant::QlmCTsh, &grid, 0.05)?;
    let gmm = power_curve(4, CurveVariant::GmmAr, &grid, 0.05)?;
    let env = map_curve(4, &grid, 0.05)?;
    println!("   e    qlm_c  gmm_ar    map");
    for k in 0..grid.len() {
        println!("{:4.2}  {:.4}  {:.4}  {:.4}", grid[k], qlm.power[k], gmm.power[k], env.power[k]);
    }
    Ok(())
}

fn main() {
    run().unwrap();
}
