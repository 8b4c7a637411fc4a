//! Loads a scenario (a file path or a bundled name, default the double
//! integrator), solves it and writes the trajectory table, plot and record.

use std::path::{Path, PathBuf};

use dcoc::scenario::{bundled, run_scenario, ScenarioConfig};

fn main() -> dcoc::Result<()> {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "double_integrator".into());
    let config = if Path::new(&arg).exists() {
        ScenarioConfig::load(Path::new(&arg))?
    } else {
        bundled(&arg)?
    };
    let out = PathBuf::from("out").join(&config.name);
    let record = run_scenario(&config, &out, false)?;
    println!("{}: kappa {} of {}, status {:?}", record.name, record.kappa, record.horizon, record.status);
    for v in &record.first_violations {
        match v.first_time {
            Some(t) => println!("  {} first violated at t = {t} s", v.group),
            None => println!("  {} never violated", v.group),
        }
    }
    for h in &record.holds {
        println!("  {} held from {} s to {} s", h.row, h.start_time, h.end_time);
    }
    println!("files in {}: {}", out.display(), record.files.join(", "));
    Ok(())
}
