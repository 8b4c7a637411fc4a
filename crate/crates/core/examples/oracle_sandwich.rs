//! Exact LP sweep against the grid dynamic program on a double integrator,
//! and the nonlinear sweep on a pendulum-like system.

use std::sync::Arc;

use dcoc::oracle::{kappa_star_grid_dp, kappa_star_sweep, GridSpec, SweepOptions};
use dcoc::problem::{AffineDynamics, ControlSet, DcocProblem, FnDynamics, Matrix, StageConstraint, Vector};

fn box_2d(p: f64, v: f64) -> dcoc::Result<StageConstraint> {
    StageConstraint::linear(
        Matrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
        Vector::from_vec(vec![p, p, v, v]),
    )
}

fn main() -> dcoc::Result<()> {
    let controls: Vec<Vector> = (0..9).map(|i| Vector::from_element(1, -0.2 + 0.05 * i as f64)).collect();

    let di = DcocProblem::stationary(
        Arc::new(AffineDynamics::double_integrator(0.5)),
        box_2d(1.0, 2.0)?,
        20,
        ControlSet::boxed(&[-0.2], &[0.2])?,
        Vector::from_vec(vec![0.6, 0.4]),
    )?;
    let lp = kappa_star_sweep(&di, &SweepOptions::default())?;
    let grid = GridSpec::uniform(&[(-1.2, 1.2), (-2.4, 2.4)], 81, controls.clone());
    let dp = kappa_star_grid_dp(&di, &grid)?;
    println!("double integrator: LP kappa* = {} (exact {}), grid DP = {}", lp.kappa_star, lp.exact, dp.kappa_star);

    // x1+ = x1 + 0.2 x2, x2+ = x2 + 0.2 (sin x1 + u)
    let pendulum = FnDynamics::new(2, 1, |x: &Vector, u: &Vector| {
        Vector::from_vec(vec![x[0] + 0.2 * x[1], x[1] + 0.2 * (x[0].sin() + u[0])])
    });
    let problem = DcocProblem::stationary(
        Arc::new(pendulum),
        box_2d(0.5, 1.0)?,
        15,
        ControlSet::boxed(&[-0.2], &[0.2])?,
        Vector::from_vec(vec![0.3, 0.1]),
    )?;
    let sweep = kappa_star_sweep(&problem, &SweepOptions::default())?;
    let dp = kappa_star_grid_dp(&problem, &GridSpec::uniform(&[(-0.6, 0.6), (-1.2, 1.2)], 81, controls))?;
    println!(
        "pendulum: sweep kappa* = {} (witness reaches {}), grid DP = {}",
        sweep.kappa_star, sweep.witness_kappa, dp.kappa_star
    );
    Ok(())
}
