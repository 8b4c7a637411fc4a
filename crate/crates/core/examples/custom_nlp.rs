//! The bundled SQP solver on a small closure-defined problem:
//! min (x - 2)^2 + (y - 1)^2 s.t. x^2 + y^2 <= 1, y >= 0.

use dcoc::problem::{Matrix, Vector};
use dcoc::solver::{solve, FnNlp, SolverOptions};

fn main() -> dcoc::Result<()> {
    let nlp = FnNlp {
        n_vars: 2,
        n_ineq: 2,
        objective: |z: &Vector| (z[0] - 2.0).powi(2) + (z[1] - 1.0).powi(2),
        gradient: |z: &Vector| Vector::from_vec(vec![2.0 * (z[0] - 2.0), 2.0 * (z[1] - 1.0)]),
        constraints: |z: &Vector| Vector::from_vec(vec![1.0 - z[0] * z[0] - z[1] * z[1], z[1]]),
        jacobian_t: |z: &Vector| Matrix::from_row_slice(2, 2, &[-2.0 * z[0], 0.0, -2.0 * z[1], 1.0]),
        start: Vector::zeros(2),
    };
    let sol = solve(&nlp, &Vector::zeros(2), &SolverOptions::default())?;
    let expected = 1.0 / 5f64.sqrt();
    println!(
        "{:?} after {} iterations: ({:.6}, {:.6}), expected ({:.6}, {:.6}), kkt {:.1e}",
        sol.status,
        sol.iterations,
        sol.primal[0],
        sol.primal[1],
        2.0 * expected,
        expected,
        sol.kkt_residual
    );
    Ok(())
}
