//! Solves a bundled spacecraft attitude scenario (default `2rw_nominal`) with
//! the pipeline directly and prints the wheel speeds and Euler angles.

use std::time::Instant;

use dcoc::pipeline::solve_dcoc;
use dcoc::scenario::bundled;

fn main() -> dcoc::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "2rw_nominal".into());
    let config = bundled(&name)?;
    let problem = config.problem()?;
    let names = config.state_names();

    let start = Instant::now();
    let result = solve_dcoc(&problem, &config.pipeline_options())?;
    println!(
        "{name}: kappa {} of {}, {:?} after {} iterations, {:.1} s",
        result.extract.kappa,
        problem.horizon(),
        result.solution.status,
        result.solution.iterations,
        start.elapsed().as_secs_f64()
    );

    println!("{:>6} {}", "t", names.iter().map(|n| format!("{n:>11}")).collect::<String>());
    let states = &result.extract.trajectory.states;
    for (k, x) in states.iter().enumerate().step_by(10) {
        let row: String = x.iter().map(|v| format!("{v:>11.3e}")).collect();
        println!("{:>6.1} {row}", k as f64 * config.dt);
    }
    Ok(())
}
