// Exact matrix identities and noncentrality cross-checks.

use panel_qlm::power::verify;

pub fn run() -> panel_qlm::Result<()> {
    let checks = verify(2, 8)?;
    for c in checks.iter().filter(|c| c.t == 4) {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks for T = 2..8, {failed} failed", checks.len());
    assert_eq!(failed, 0);
    Ok(())
}

fn main() {
    run().unwrap();
}
