//! x+ = x + u - 1 with |u| <= 0.5 and x >= 0 from x0 = 1: the drift wins
//! after two steps whatever the controls do.

use std::sync::Arc;

use dcoc::oracle::{kappa_star_sweep, SweepOptions};
use dcoc::pipeline::{solve_dcoc, PipelineOptions};
use dcoc::problem::{AffineDynamics, ControlSet, DcocProblem, Matrix, StageConstraint, Vector};
use dcoc::solver::SolverOptions;

fn main() -> dcoc::Result<()> {
    let one = Matrix::from_element(1, 1, 1.0);
    let dynamics = AffineDynamics::new(one.clone(), one, Vector::from_element(1, -1.0))?;
    let stay_positive = StageConstraint::linear(Matrix::from_element(1, 1, -1.0), Vector::zeros(1))?;
    let problem = DcocProblem::stationary(
        Arc::new(dynamics),
        stay_positive,
        5,
        ControlSet::boxed(&[-0.5], &[0.5])?,
        Vector::from_element(1, 1.0),
    )?;

    let opts = PipelineOptions {
        solver: SolverOptions { kkt_tol: 1e-10, ..SolverOptions::default() },
        ..PipelineOptions::default()
    };
    let result = solve_dcoc(&problem, &opts)?;
    let oracle = kappa_star_sweep(&problem, &SweepOptions::default())?;

    println!("NLP kappa = {}, LP oracle kappa* = {}", result.extract.kappa, oracle.kappa_star);
    for (k, x) in result.extract.trajectory.states.iter().enumerate() {
        let u = result.extract.controls.get(k).map_or(String::from("-"), |u| format!("{:+.3}", u[0]));
        println!("k={k} x={:+.4} u={u} eps={:.2e}", x[0], result.extract.slacks[k]);
    }
    Ok(())
}
