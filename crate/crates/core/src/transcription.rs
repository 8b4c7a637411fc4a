//! Single-shooting transcription of a DCOC problem into a smooth NLP.
//!
//! Decision vector: `[u_0 .. u_{N-1}, eps_0 .. eps_N, s_0 .. s_{N-1}]`, where
//! `s_k` are split variables bounding `|u_k|` on the 1-norm-capped
//! components. States are eliminated by forward substitution. The NLP is
//!
//! ```text
//!     minimize    sum_k theta^{-k} eps_k
//!     subject to  u_k in U
//!                 0 <= eps_0 <= eps_1 <= ... <= eps_N
//!                 H_k(x_k(u)) <= h_k + M eps_k,   k = 0..N
//! ```
//!
//! The weights `theta^{-k}` are `theta^{N-k}` divided by `theta^N`; the
//! positive rescaling leaves the minimizers unchanged and avoids overflow.

use std::ops::Range;

use rand::RngCore;

use crate::error::{DcocError, Result};
use crate::fd;
use crate::problem::{self, ControlSet, DcocProblem, Matrix, Trajectory, Vector, DEFAULT_FEAS_TOL};
use crate::solver::{Multipliers, Nlp, NlpEval, NlpValues};

/// Linear inequality `constant + sum coef_i z_i >= 0`.
#[derive(Debug, Clone)]
pub(crate) struct LinearRow {
    pub constant: f64,
    pub coefs: Vec<(usize, f64)>,
}

impl LinearRow {
    pub fn eval(&self, z: &Vector) -> f64 {
        self.coefs
            .iter()
            .fold(self.constant, |acc, &(i, c)| acc + c * z[i])
    }
}

/// Rows encoding `u_k in U` for `k < steps`. Controls start at `u_offset`,
/// split variables at `aux_offset`.
pub(crate) fn control_rows(
    set: &ControlSet,
    steps: usize,
    u_offset: usize,
    aux_offset: usize,
) -> Vec<LinearRow> {
    let nu = set.dim();
    let mut rows = Vec::new();
    for k in 0..steps {
        let base = u_offset + k * nu;
        for i in 0..nu {
            if let Some(lo) = set.lower()[i] {
                rows.push(LinearRow {
                    constant: -lo,
                    coefs: vec![(base + i, 1.0)],
                });
            }
            if let Some(hi) = set.upper()[i] {
                rows.push(LinearRow {
                    constant: hi,
                    coefs: vec![(base + i, -1.0)],
                });
            }
        }
        if let Some(cap) = set.one_norm_cap() {
            let width = cap.components.len();
            let aux = aux_offset + k * width;
            for (j, &i) in cap.components.iter().enumerate() {
                rows.push(LinearRow {
                    constant: 0.0,
                    coefs: vec![(aux + j, 1.0), (base + i, -1.0)],
                });
                rows.push(LinearRow {
                    constant: 0.0,
                    coefs: vec![(aux + j, 1.0), (base + i, 1.0)],
                });
            }
            rows.push(LinearRow {
                constant: cap.cap,
                coefs: (0..width).map(|j| (aux + j, -1.0)).collect(),
            });
        }
    }
    rows
}

/// Number of split variables per step.
pub(crate) fn aux_width(set: &ControlSet) -> usize {
    set.one_norm_cap().map_or(0, |c| c.components.len())
}

/// Split variables `|u_i|` on the capped components.
pub(crate) fn split_values(set: &ControlSet, u: &Vector) -> Vec<f64> {
    set.one_norm_cap().map_or_else(Vec::new, |c| {
        c.components.iter().map(|&i| u[i].abs()).collect()
    })
}

/// States `x_0..x_steps` and, optionally, sensitivities `dx_k/du`, each
/// `n_x x (steps * n_u)`.
pub(crate) fn shoot(
    problem: &DcocProblem,
    controls: &[Vector],
    with_sensitivity: bool,
) -> Result<(Vec<Vector>, Vec<Matrix>)> {
    let dynamics = problem.dynamics();
    let (nx, nu) = (problem.state_dim(), problem.control_dim());
    let width = controls.len() * nu;
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut sens = Vec::new();
    states.push(problem.x0().clone());
    if with_sensitivity {
        sens.push(Matrix::zeros(nx, width));
    }
    for (k, u) in controls.iter().enumerate() {
        let x = &states[k];
        let next = dynamics.step(x, u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DcocError::SimulationDiverged { step: k + 1 });
        }
        if with_sensitivity {
            let (a, b) = dynamics.jacobians(x, u)?;
            let prev = &sens[k];
            let mut s = Matrix::zeros(nx, width);
            if k > 0 {
                let cols = k * nu;
                let block = &a * prev.columns(0, cols);
                s.columns_mut(0, cols).copy_from(&block);
            }
            s.columns_mut(k * nu, nu).copy_from(&b);
            sens.push(s);
        }
        states.push(next);
    }
    Ok((states, sens))
}

/// Named index ranges of the decision vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableLayout {
    pub horizon: usize,
    pub control_dim: usize,
    pub aux_per_step: usize,
}

impl VariableLayout {
    pub fn controls(&self) -> Range<usize> {
        0..self.horizon * self.control_dim
    }
    pub fn slacks(&self) -> Range<usize> {
        let start = self.controls().end;
        start..start + self.horizon + 1
    }
    pub fn aux(&self) -> Range<usize> {
        let start = self.slacks().end;
        start..start + self.horizon * self.aux_per_step
    }
    pub fn control(&self, k: usize) -> Range<usize> {
        k * self.control_dim..(k + 1) * self.control_dim
    }
    pub fn slack(&self, k: usize) -> usize {
        self.slacks().start + k
    }
    pub fn n_vars(&self) -> usize {
        self.aux().end
    }
}

/// The exponentially weighted slack NLP of a DCOC problem.
#[derive(Clone)]
pub struct NlpInstance {
    problem: DcocProblem,
    layout: VariableLayout,
    theta: f64,
    big_m: f64,
    weights: Vec<f64>,
    linear_rows: Vec<LinearRow>,
    /// First stage row of each stage `k`.
    stage_offsets: Vec<usize>,
    stage_rows: usize,
}

/// `10 * max_k ||h_k||_inf + 10`.
pub fn default_big_m(problem: &DcocProblem) -> f64 {
    let h_max = problem
        .constraints()
        .iter()
        .map(|c| c.bound().amax())
        .fold(0.0, f64::max);
    10.0 * h_max + 10.0
}

pub const DEFAULT_THETA: f64 = 1.1;

/// Builds the NLP with weighting base `theta > 1` and big-M constant `big_m > 0`.
pub fn build_nlp(problem: &DcocProblem, theta: f64, big_m: f64) -> Result<NlpInstance> {
    if !(theta > 1.0) || !theta.is_finite() {
        return Err(DcocError::Parameter(format!(
            "theta must exceed 1, got {theta}"
        )));
    }
    if !(big_m > 0.0) || !big_m.is_finite() {
        return Err(DcocError::Parameter(format!(
            "big-M must be positive, got {big_m}"
        )));
    }
    let n = problem.horizon();
    let layout = VariableLayout {
        horizon: n,
        control_dim: problem.control_dim(),
        aux_per_step: aux_width(problem.control_set()),
    };
    let weights: Vec<f64> = (0..=n).map(|k| theta.powi(-(k as i32))).collect();
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(DcocError::Parameter(format!(
            "theta^-N underflows for theta = {theta}, N = {n}"
        )));
    }
    let mut linear_rows = control_rows(problem.control_set(), n, 0, layout.aux().start);
    linear_rows.push(LinearRow {
        constant: 0.0,
        coefs: vec![(layout.slack(0), 1.0)],
    });
    for k in 0..n {
        linear_rows.push(LinearRow {
            constant: 0.0,
            coefs: vec![(layout.slack(k + 1), 1.0), (layout.slack(k), -1.0)],
        });
    }
    let mut stage_offsets = Vec::with_capacity(n + 1);
    let mut stage_rows = 0;
    for c in problem.constraints() {
        stage_offsets.push(stage_rows);
        stage_rows += c.rows();
    }
    let nlp = NlpInstance {
        problem: problem.clone(),
        layout,
        theta,
        big_m,
        weights,
        linear_rows,
        stage_offsets,
        stage_rows,
    };
    // the default start holds the nominal control; it has to simulate
    let nominal = problem.control_set().nominal();
    nlp.feasible_point(&vec![nominal; n])?;
    Ok(nlp)
}

/// Controls, slacks and the achieved time-before-exit of an NLP point.
#[derive(Debug, Clone)]
pub struct SolutionExtract {
    pub controls: Vec<Vector>,
    pub slacks: Vec<f64>,
    pub kappa: usize,
    pub objective: f64,
    pub trajectory: Trajectory,
}

impl NlpInstance {
    pub fn problem(&self) -> &DcocProblem {
        &self.problem
    }
    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn big_m(&self) -> f64 {
        self.big_m
    }
    /// Normalized weights `theta^{-k}`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    /// Weights `theta^{N-k}` before normalization.
    pub fn raw_weights(&self) -> Vec<f64> {
        let n = self.layout.horizon as i32;
        (0..=n).map(|k| self.theta.powi(n - k)).collect()
    }

    /// `sum_k theta^{N-k} eps_k`, the cost before normalization.
    pub fn raw_cost(&self, z: &Vector) -> f64 {
        self.raw_weights()
            .iter()
            .enumerate()
            .map(|(k, w)| w * z[self.layout.slack(k)])
            .sum()
    }

    /// Index of the first stage constraint row (after the linear rows).
    pub fn stage_row_start(&self) -> usize {
        self.linear_rows.len()
    }

    pub fn controls_of(&self, z: &Vector) -> Vec<Vector> {
        (0..self.layout.horizon)
            .map(|k| {
                z.rows(k * self.layout.control_dim, self.layout.control_dim)
                    .into_owned()
            })
            .collect()
    }

    pub fn slacks_of(&self, z: &Vector) -> Vec<f64> {
        z.rows(self.layout.slacks().start, self.layout.horizon + 1)
            .iter()
            .copied()
            .collect()
    }

    /// Smallest feasible slacks for the given controls:
    /// `eps_k = max(0, max_{i <= k} max_rows (H_i(x_i) - h_i) / M)`.
    pub fn witness_slacks(&self, controls: &[Vector]) -> Result<Vec<f64>> {
        let (states, _) = shoot(&self.problem, controls, false)?;
        let mut running = 0.0f64;
        Ok(states
            .iter()
            .zip(self.problem.constraints())
            .map(|(x, c)| {
                let worst = c.margin(x).iter().fold(0.0f64, |m, &v| m.max(-v));
                running = running.max(worst / self.big_m);
                running
            })
            .collect())
    }

    /// Decision vector for the given controls with split variables at
    /// `|u|` and witness slacks.
    pub fn feasible_point(&self, controls: &[Vector]) -> Result<Vector> {
        if controls.len() != self.layout.horizon {
            return Err(DcocError::Layout(format!(
                "{} controls for horizon {}",
                controls.len(),
                self.layout.horizon
            )));
        }
        let mut z = Vector::zeros(self.layout.n_vars());
        for (k, u) in controls.iter().enumerate() {
            z.rows_mut(k * self.layout.control_dim, self.layout.control_dim)
                .copy_from(u);
            let split = split_values(self.problem.control_set(), u);
            let start = self.layout.aux().start + k * self.layout.aux_per_step;
            for (j, s) in split.iter().enumerate() {
                z[start + j] = *s;
            }
        }
        for (k, e) in self.witness_slacks(controls)?.iter().enumerate() {
            z[self.layout.slack(k)] = *e;
        }
        Ok(z)
    }

    /// Slices controls and slacks from `primal`, simulates and evaluates
    /// the time-before-exit.
    pub fn extract(&self, primal: &Vector) -> Result<SolutionExtract> {
        if primal.len() != self.layout.n_vars() {
            return Err(DcocError::Layout(format!(
                "primal has {} entries, expected {}",
                primal.len(),
                self.layout.n_vars()
            )));
        }
        let controls = self.controls_of(primal);
        let trajectory = problem::simulate(&self.problem, &controls)?;
        let kappa =
            problem::time_before_exit(&trajectory, self.problem.constraints(), DEFAULT_FEAS_TOL)?;
        let objective = self
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * primal[self.layout.slack(k)])
            .sum();
        Ok(SolutionExtract {
            controls,
            slacks: self.slacks_of(primal),
            kappa,
            objective,
            trajectory,
        })
    }

    fn stage_values(&self, z: &Vector, states: &[Vector], out: &mut Vector) {
        let start = self.linear_rows.len();
        for (k, (x, c)) in states.iter().zip(self.problem.constraints()).enumerate() {
            let eps = z[self.layout.slack(k)];
            let margin = c.margin(x);
            for r in 0..c.rows() {
                out[start + self.stage_offsets[k] + r] = margin[r] + self.big_m * eps;
            }
        }
    }

    fn values_inner(&self, z: &Vector) -> Result<(f64, Vector, Vec<Vector>)> {
        if z.len() != self.layout.n_vars() {
            return Err(DcocError::Layout(format!(
                "point has {} entries, expected {}",
                z.len(),
                self.layout.n_vars()
            )));
        }
        let controls = self.controls_of(z);
        let (states, _) = shoot(&self.problem, &controls, false)?;
        let mut ineq = Vector::zeros(self.n_ineq());
        for (i, row) in self.linear_rows.iter().enumerate() {
            ineq[i] = row.eval(z);
        }
        self.stage_values(z, &states, &mut ineq);
        let objective = self
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * z[self.layout.slack(k)])
            .sum();
        Ok((objective, ineq, states))
    }
}

impl Nlp for NlpInstance {
    fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }

    fn curved_vars(&self) -> Vec<usize> {
        if self.problem.is_affine() && self.problem.constraints().iter().all(|c| c.map().as_linear().is_some()) {
            Vec::new()
        } else {
            self.layout.controls().collect()
        }
    }

    /// Backward (adjoint) sweep through the dynamics; no sensitivity matrices.
    fn lagrangian_gradient(&self, z: &Vector, mult: &Multipliers) -> Result<Vector> {
        if z.len() != self.n_vars() || mult.ineq.len() != self.n_ineq() || !mult.eq.is_empty() {
            return Err(DcocError::Layout("lagrangian gradient: dimension mismatch".into()));
        }
        let controls = self.controls_of(z);
        let (states, _) = shoot(&self.problem, &controls, false)?;
        let mu = &mult.ineq;
        let mut grad = Vector::zeros(self.n_vars());
        for (k, w) in self.weights.iter().enumerate() {
            grad[self.layout.slack(k)] = *w;
        }
        for (i, row) in self.linear_rows.iter().enumerate() {
            for &(j, c) in &row.coefs {
                grad[j] -= mu[i] * c;
            }
        }
        let start = self.linear_rows.len();
        let dynamics = self.problem.dynamics();
        let nu = self.layout.control_dim;
        let mut adjoint = Vector::zeros(self.problem.state_dim());
        for k in (0..states.len()).rev() {
            if k < controls.len() {
                let (a, b) = dynamics.jacobians(&states[k], &controls[k])?;
                let du = b.tr_mul(&adjoint);
                for j in 0..nu {
                    grad[k * nu + j] += du[j];
                }
                adjoint = a.tr_mul(&adjoint);
            }
            let c = &self.problem.constraints()[k];
            let rows = start + self.stage_offsets[k];
            let mu_k = mu.rows(rows, c.rows());
            grad[self.layout.slack(k)] -= self.big_m * mu_k.sum();
            adjoint += c.jacobian(&states[k]).tr_mul(&mu_k);
        }
        Ok(grad)
    }

    fn n_ineq(&self) -> usize {
        self.linear_rows.len() + self.stage_rows
    }

    fn values(&self, z: &Vector) -> Result<NlpValues> {
        let (objective, ineq, _) = self.values_inner(z)?;
        Ok(NlpValues {
            objective,
            eq: Vector::zeros(0),
            ineq,
        })
    }

    fn evaluate(&self, z: &Vector) -> Result<NlpEval> {
        if z.len() != self.layout.n_vars() {
            return Err(DcocError::Layout(format!(
                "point has {} entries, expected {}",
                z.len(),
                self.layout.n_vars()
            )));
        }
        let n = self.n_vars();
        let controls = self.controls_of(z);
        let (states, sens) = shoot(&self.problem, &controls, true)?;
        let mut ineq = Vector::zeros(self.n_ineq());
        let mut jac = Matrix::zeros(n, self.n_ineq());
        for (i, row) in self.linear_rows.iter().enumerate() {
            ineq[i] = row.eval(z);
            for &(j, c) in &row.coefs {
                jac[(j, i)] += c;
            }
        }
        self.stage_values(z, &states, &mut ineq);
        let start = self.linear_rows.len();
        let width = self.layout.horizon * self.layout.control_dim;
        for (k, (x, c)) in states.iter().zip(self.problem.constraints()).enumerate() {
            let eps_index = self.layout.slack(k);
            let d_h = c.jacobian(x) * &sens[k];
            for r in 0..c.rows() {
                let col = start + self.stage_offsets[k] + r;
                let mut column = jac.column_mut(col);
                for j in 0..width {
                    column[j] = -d_h[(r, j)];
                }
                column[eps_index] = self.big_m;
            }
        }
        let mut gradient = Vector::zeros(n);
        let mut objective = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            gradient[self.layout.slack(k)] = *w;
            objective += w * z[self.layout.slack(k)];
        }
        Ok(NlpEval {
            objective,
            gradient,
            eq: Vector::zeros(0),
            eq_jacobian_t: Matrix::zeros(n, 0),
            ineq,
            ineq_jacobian_t: jac,
        })
    }

    /// Nominal controls held over the horizon with witness slacks.
    fn initial_point(&self) -> Vector {
        let nominal = self.problem.control_set().nominal();
        self.feasible_point(&vec![nominal; self.layout.horizon])
            .expect("nominal controls simulate; checked in build_nlp")
    }

    /// Controls halfway between the nominal point and a random point of U.
    fn random_point(&self, rng: &mut dyn RngCore) -> Vector {
        let set = self.problem.control_set();
        let nominal = set.nominal();
        let controls: Vec<Vector> = (0..self.layout.horizon)
            .map(|_| &nominal + (set.sample(rng) - &nominal) * 0.5)
            .collect();
        self.feasible_point(&controls)
            .unwrap_or_else(|_| self.initial_point())
    }
}

/// Worst relative error between analytic derivatives (objective gradient
/// and constraint Jacobians) and central finite differences at `point`.
pub fn nlp_gradients_check(nlp: &dyn Nlp, point: &Vector) -> Result<f64> {
    let eval = nlp.evaluate(point)?;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let h = fd::step_size(point[i]);
        probe[i] = point[i] + h;
        let plus = nlp.values(&probe)?;
        probe[i] = point[i] - h;
        let minus = nlp.values(&probe)?;
        probe[i] = point[i];
        let g = (plus.objective - minus.objective) / (2.0 * h);
        worst = worst.max(fd::relative_error(eval.gradient[i], g));
        for (j, (p, m)) in plus.eq.iter().zip(minus.eq.iter()).enumerate() {
            worst = worst.max(fd::relative_error(
                eval.eq_jacobian_t[(i, j)],
                (p - m) / (2.0 * h),
            ));
        }
        for (j, (p, m)) in plus.ineq.iter().zip(minus.ineq.iter()).enumerate() {
            worst = worst.max(fd::relative_error(
                eval.ineq_jacobian_t[(i, j)],
                (p - m) / (2.0 * h),
            ));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{AffineDynamics, FnDynamics, StageConstraint};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    fn double_integrator(horizon: usize) -> DcocProblem {
        let c = StageConstraint::linear(
            Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            v(&[1.0, 1.0]),
        )
        .unwrap();
        DcocProblem::stationary(
            Arc::new(AffineDynamics::double_integrator(0.5)),
            c,
            horizon,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[0.9, 0.4]),
        )
        .unwrap()
    }

    fn pendulum_like(horizon: usize) -> DcocProblem {
        let dynamics = FnDynamics::new(2, 2, |x: &Vector, u: &Vector| {
            v(&[
                x[0] + 0.1 * x[1],
                x[1] + 0.1 * (x[0].sin() + 0.3 + u[0] - 0.5 * u[1] * x[1]),
            ])
        })
        .with_jacobian(|x: &Vector, u: &Vector| {
            (
                Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1 * x[0].cos(), 1.0 - 0.05 * u[1]]),
                Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.1, -0.05 * x[1]]),
            )
        });
        let c = StageConstraint::linear(
            Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            v(&[0.5, 0.5]),
        )
        .unwrap();
        DcocProblem::stationary(
            Arc::new(dynamics),
            c,
            horizon,
            ControlSet::one_norm_ball(2, 0.4).unwrap(),
            v(&[0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn raw_weights_for_two_steps() {
        let nlp = build_nlp(&double_integrator(2), 1.1, 10.0).unwrap();
        let raw = nlp.raw_weights();
        let expected = [1.21, 1.1, 1.0];
        for (r, e) in raw.iter().zip(expected) {
            assert!((r - e).abs() < 1e-15);
        }
        assert_eq!(nlp.weights()[0], 1.0);
        assert!(nlp.weights().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn variable_count_with_one_norm_cap() {
        let dynamics = Arc::new(FnDynamics::new(3, 3, |x: &Vector, _u: &Vector| x.clone()));
        let c = StageConstraint::linear(Matrix::identity(3, 3), v(&[1.0, 1.0, 1.0])).unwrap();
        let p = DcocProblem::stationary(
            dynamics,
            c,
            75,
            ControlSet::one_norm_ball(3, 2.0).unwrap(),
            Vector::zeros(3),
        )
        .unwrap();
        let nlp = build_nlp(&p, 1.1, 10.0).unwrap();
        assert_eq!(nlp.n_vars(), 526);
        let l = nlp.layout();
        assert_eq!(
            (l.controls(), l.slacks(), l.aux()),
            (0..225, 225..301, 301..526)
        );
    }

    #[test]
    fn parameters_validated() {
        let p = double_integrator(3);
        assert!(matches!(
            build_nlp(&p, 1.0, 10.0),
            Err(DcocError::Parameter(_))
        ));
        assert!(matches!(
            build_nlp(&p, 0.9, 10.0),
            Err(DcocError::Parameter(_))
        ));
        assert!(matches!(
            build_nlp(&p, 1.1, 0.0),
            Err(DcocError::Parameter(_))
        ));
    }

    #[test]
    fn zero_controls_zero_slacks_feasible_with_zero_cost() {
        // identity dynamics inside the set: u = 0, eps = 0 is feasible
        let dynamics = Arc::new(FnDynamics::new(1, 1, |x: &Vector, u: &Vector| x + u));
        let c = StageConstraint::linear(Matrix::from_element(1, 1, 1.0), v(&[1.0])).unwrap();
        let p = DcocProblem::stationary(
            dynamics,
            c,
            5,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[0.0]),
        )
        .unwrap();
        let nlp = build_nlp(&p, 1.1, 10.0).unwrap();
        let z = Vector::zeros(nlp.n_vars());
        let vals = nlp.values(&z).unwrap();
        assert_eq!(vals.objective, 0.0);
        assert!(vals.ineq.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn extract_reports_full_horizon_for_feasible_point() {
        let dynamics = Arc::new(FnDynamics::new(1, 1, |x: &Vector, u: &Vector| x + u));
        let c = StageConstraint::linear(Matrix::from_element(1, 1, 1.0), v(&[1.0])).unwrap();
        let p = DcocProblem::stationary(
            dynamics,
            c,
            6,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[0.0]),
        )
        .unwrap();
        let nlp = build_nlp(&p, 1.1, 10.0).unwrap();
        let sol = nlp.extract(&Vector::zeros(nlp.n_vars())).unwrap();
        assert_eq!(sol.kappa, 6);
        assert!(sol.slacks.iter().all(|&e| e == 0.0));
        assert!(nlp.extract(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn extract_detects_violation_at_stage_five() {
        // x+ = x + u; stage 5 is pushed out by u_4 = 2
        let dynamics = Arc::new(FnDynamics::new(1, 1, |x: &Vector, u: &Vector| x + u));
        let c = StageConstraint::linear(Matrix::from_element(1, 1, 1.0), v(&[1.0])).unwrap();
        let p = DcocProblem::stationary(
            dynamics,
            c,
            8,
            ControlSet::boxed(&[-2.0], &[2.0]).unwrap(),
            v(&[0.0]),
        )
        .unwrap();
        let nlp = build_nlp(&p, 1.1, 10.0).unwrap();
        let mut controls = vec![v(&[0.0]); 8];
        controls[4] = v(&[2.0]);
        controls[5] = v(&[-2.0]);
        let z = nlp.feasible_point(&controls).unwrap();
        let sol = nlp.extract(&z).unwrap();
        assert_eq!(sol.kappa, 4);
        assert_eq!(sol.slacks[4], 0.0);
        assert!((sol.slacks[5] - 0.1).abs() < 1e-15);
        assert!((sol.slacks[8] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_on_linear_instance() {
        let p = double_integrator(12);
        let nlp = build_nlp(&p, 1.1, default_big_m(&p)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let z = Vector::from_fn(nlp.n_vars(), |_, _| rng.gen_range(-1.0..1.0));
        assert!(nlp_gradients_check(&nlp, &z).unwrap() < 1e-6);
    }

    #[test]
    fn gradients_match_on_nonlinear_instance() {
        let p = pendulum_like(10);
        let nlp = build_nlp(&p, 1.3, default_big_m(&p)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let z = nlp.random_point(&mut rng);
            assert!(nlp_gradients_check(&nlp, &z).unwrap() < 1e-6);
        }
    }

    #[test]
    fn quadratic_objective_gradient_is_exact_at_zero() {
        use crate::solver::FnNlp;
        let nlp = FnNlp {
            n_vars: 3,
            n_ineq: 0,
            objective: |z: &Vector| z.dot(z),
            gradient: |z: &Vector| z * 2.0,
            constraints: |_z: &Vector| Vector::zeros(0),
            jacobian_t: |_z: &Vector| Matrix::zeros(3, 0),
            start: Vector::zeros(3),
        };
        assert!(nlp_gradients_check(&nlp, &Vector::zeros(3)).unwrap() < 1e-15);
    }

    #[test]
    fn corrupted_jacobian_is_detected() {
        use crate::solver::FnNlp;
        let nlp = FnNlp {
            n_vars: 2,
            n_ineq: 1,
            objective: |z: &Vector| z[0],
            gradient: |_z: &Vector| v(&[1.0, 0.0]),
            constraints: |z: &Vector| v(&[1.0 - z[0] * z[1]]),
            jacobian_t: |z: &Vector| Matrix::from_column_slice(2, 1, &[-z[1], z[0]]),
            start: v(&[0.5, 0.5]),
        };
        assert!(nlp_gradients_check(&nlp, &v(&[0.5, 0.7])).unwrap() > 0.1);
    }

    #[test]
    fn adjoint_lagrangian_gradient_matches_dense_jacobian() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for p in [double_integrator(9), pendulum_like(9)] {
            let nlp = build_nlp(&p, 1.2, default_big_m(&p)).unwrap();
            let z = nlp.random_point(&mut rng);
            let mult = Multipliers {
                eq: Vector::zeros(0),
                ineq: Vector::from_fn(nlp.n_ineq(), |_, _| rng.gen_range(0.0..2.0)),
            };
            let eval = nlp.evaluate(&z).unwrap();
            let dense = &eval.gradient - &eval.ineq_jacobian_t * &mult.ineq;
            let adjoint = nlp.lagrangian_gradient(&z, &mult).unwrap();
            assert!((dense - adjoint).amax() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn normalized_cost_is_proportional(seed in 0u64..100, theta in 1.01f64..3.0) {
            let p = double_integrator(15);
            let nlp = build_nlp(&p, theta, 5.0).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let z = Vector::from_fn(nlp.n_vars(), |_, _| rng.gen_range(-2.0..2.0));
            let scaled = nlp.values(&z).unwrap().objective;
            let raw = nlp.raw_cost(&z) * theta.powi(-15);
            prop_assert!((scaled - raw).abs() <= 1e-12 * scaled.abs().max(raw.abs()).max(1e-300));
        }

        #[test]
        fn witness_point_is_feasible(seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for p in [double_integrator(20), pendulum_like(20)] {
                let nlp = build_nlp(&p, 1.1, default_big_m(&p)).unwrap();
                let controls: Vec<Vector> = (0..20).map(|_| p.control_set().sample(&mut rng)).collect();
                let z = nlp.feasible_point(&controls).unwrap();
                let vals = nlp.values(&z).unwrap();
                prop_assert!(vals.ineq.min() >= -1e-9, "min row {}", vals.ineq.min());
                let eps = nlp.slacks_of(&z);
                prop_assert!(eps.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        /// On feasible points (eps >= 0) the weighted sum equals the split
        /// form with absolute values on the stages up to kappa*.
        #[test]
        fn cost_equality_on_nonnegative_slacks(seed in 0u64..100, kappa_star in 0usize..15) {
            let p = double_integrator(15);
            let nlp = build_nlp(&p, 1.1, default_big_m(&p)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let controls: Vec<Vector> = (0..15).map(|_| p.control_set().sample(&mut rng)).collect();
            let z = nlp.feasible_point(&controls).unwrap();
            let raw = nlp.raw_weights();
            let eps = nlp.slacks_of(&z);
            let split: f64 = (0..=15)
                .map(|k| if k <= kappa_star { raw[k] * eps[k].abs() } else { raw[k] * eps[k] })
                .sum();
            prop_assert!((nlp.raw_cost(&z) - split).abs() <= 1e-12 * split.abs().max(1e-300));
        }
    }
}
