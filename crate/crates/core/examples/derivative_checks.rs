//! Runs the built-in checks (derivatives, momentum, witness slacks,
//! time-before-exit consistency) on every bundled scenario.

use dcoc::scenario::{bundled, check, BUNDLED};

fn main() -> dcoc::Result<()> {
    for (name, _) in BUNDLED {
        let report = check(&bundled(name)?, 200)?;
        let items: Vec<String> = report
            .items
            .iter()
            .map(|i| format!("{} {:.2e} ({})", i.name, i.value, if i.pass { "ok" } else { "FAIL" }))
            .collect();
        println!("{name:18} {}", items.join(", "));
    }
    Ok(())
}
