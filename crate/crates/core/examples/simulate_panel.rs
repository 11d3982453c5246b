// Draw a panel under each design and round-trip it through CSV.

use panel_qlm::dgp::{generate, DgpConfig, Design};
use panel_qlm::io::{read_long, write_long};

pub fn run() -> panel_qlm::Result<()> {
    for design in Design::ALL {
        let cfg = DgpConfig::new(design, 200, 5, 0.8, 42);
        let panel = generate(&cfg)?;
        let mut buf = Vec::new();
        write_long(&panel, &mut buf)?;
        let back = read_long(buf.as_slice(), "memory")?;
        assert_eq!(back.values(), panel.values());
        let mean_diff: f64 = (0..panel.n)
            .map(|i| panel.row(i)[panel.t - 1] - panel.row(i)[0])
            .sum::<f64>()
            / panel.n as f64;
        println!("{:<10} N={} T={} mean(y_T - y_1) = {mean_diff:+.4}", design.label(), panel.n, panel.t);
    }
    Ok(())
}

fn main() {
    run().unwrap();
}
