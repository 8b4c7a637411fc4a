//! Dense sequential quadratic programming for smooth NLPs
//!
//! ```text
//!     minimize f(z)  subject to  c_E(z) = 0,  c_I(z) >= 0
//! ```
//!
//! Quadratic subproblems use a damped BFGS approximation of the Lagrangian
//! Hessian and are solved by [`qp::solve_qp`]; steps are globalized with a
//! backtracking line search on the l1 exact penalty merit function.

pub mod qp;

use std::thread;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fd;
use crate::error::{DcocError, Result};
use crate::problem::{Matrix, Vector};
use qp::{Qp, QpFailure};

/// Constraint values at a point.
#[derive(Debug, Clone)]
pub struct NlpValues {
    pub objective: f64,
    pub eq: Vector,
    pub ineq: Vector,
}

/// Values and first derivatives at a point. Jacobians are stored transposed:
/// column `i` is the gradient of constraint `i`.
#[derive(Debug, Clone)]
pub struct NlpEval {
    pub objective: f64,
    pub gradient: Vector,
    pub eq: Vector,
    pub eq_jacobian_t: Matrix,
    pub ineq: Vector,
    pub ineq_jacobian_t: Matrix,
}

impl NlpEval {
    fn check_finite(&self) -> Result<()> {
        if !self.objective.is_finite() {
            return Err(DcocError::Evaluation {
                what: "objective",
                index: 0,
            });
        }
        let checks: [(&'static str, &[f64]); 5] = [
            ("objective gradient", self.gradient.as_slice()),
            ("equality constraint", self.eq.as_slice()),
            ("equality Jacobian", self.eq_jacobian_t.as_slice()),
            ("inequality constraint", self.ineq.as_slice()),
            ("inequality Jacobian", self.ineq_jacobian_t.as_slice()),
        ];
        for (what, values) in checks {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(DcocError::Evaluation { what, index });
            }
        }
        Ok(())
    }
}

/// A smooth NLP with dense derivatives.
pub trait Nlp: Sync {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize {
        0
    }
    fn n_ineq(&self) -> usize;
    fn values(&self, z: &Vector) -> Result<NlpValues>;
    fn evaluate(&self, z: &Vector) -> Result<NlpEval>;
    /// Gradient of the Lagrangian `f - lambda' g - mu' c`.
    fn lagrangian_gradient(&self, z: &Vector, mult: &Multipliers) -> Result<Vector> {
        Ok(lagrangian_gradient(&self.evaluate(z)?, mult))
    }
    /// Variables entering the problem nonlinearly. The Lagrangian Hessian
    /// vanishes outside these rows and columns.
    fn curved_vars(&self) -> Vec<usize> {
        (0..self.n_vars()).collect()
    }
    /// Deterministic default starting point.
    fn initial_point(&self) -> Vector;
    /// A perturbed starting point for multi-start runs.
    fn random_point(&self, rng: &mut dyn RngCore) -> Vector {
        use rand::Rng;
        self.initial_point()
            .map(|v| v + 0.1 * (1.0 + v.abs()) * rng.gen_range(-1.0..1.0))
    }
}

/// How the QP Hessian is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// Damped BFGS from `initial_hessian * I`.
    #[default]
    Bfgs,
    /// Central differences of the Lagrangian gradient over the curved
    /// variables, eigenvalues lifted to at least `initial_hessian`.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Factor applied when the merit penalty must grow.
    pub penalty_growth: f64,
    /// Powell damping threshold for the BFGS update.
    pub bfgs_damping: f64,
    pub backtrack_ratio: f64,
    pub armijo: f64,
    /// Scale of the starting BFGS matrix `initial_hessian * I`.
    pub initial_hessian: f64,
    pub hessian: HessianMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-7,
            max_iter: 300,
            penalty_growth: 2.0,
            bfgs_damping: 0.2,
            backtrack_ratio: 0.5,
            armijo: 1e-4,
            initial_hessian: 1.0,
            hessian: HessianMode::Bfgs,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.kkt_tol,
            self.penalty_growth,
            self.bfgs_damping,
            self.backtrack_ratio,
            self.armijo,
            self.initial_hessian,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_iter == 0 {
            return Err(DcocError::Parameter(
                "solver options must be positive".into(),
            ));
        }
        if self.kkt_tol >= 1.0
            || self.backtrack_ratio >= 1.0
            || self.bfgs_damping >= 1.0
            || self.armijo >= 0.5
        {
            return Err(DcocError::Parameter(
                "kkt_tol, backtrack_ratio and bfgs_damping must be below 1, armijo below 0.5"
                    .into(),
            ));
        }
        if self.penalty_growth <= 1.0 {
            return Err(DcocError::Parameter("penalty growth must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    InfeasibleSubproblem,
    LineSearchFailure,
}

/// Lagrange multipliers, one per constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub eq: Vector,
    pub ineq: Vector,
}

impl Multipliers {
    pub fn zeros(n_eq: usize, n_ineq: usize) -> Self {
        Self {
            eq: Vector::zeros(n_eq),
            ineq: Vector::zeros(n_ineq),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverSolution {
    pub primal: Vector,
    pub multipliers: Multipliers,
    pub status: SolverStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub objective: f64,
    /// Max constraint violation at the returned point.
    pub primal_infeasibility: f64,
    /// `(merit before, merit after)` of every accepted step, same penalty.
    pub merit_trace: Vec<(f64, f64)>,
}

/// Components of the first-order optimality residual.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

fn lagrangian_gradient(eval: &NlpEval, mult: &Multipliers) -> Vector {
    &eval.gradient - &eval.eq_jacobian_t * &mult.eq - &eval.ineq_jacobian_t * &mult.ineq
}

fn infeasibility(eq: &Vector, ineq: &Vector) -> f64 {
    let e = eq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ineq.iter().fold(e, |m, v| m.max(-v))
}

fn l1_violation(eq: &Vector, ineq: &Vector) -> f64 {
    eq.iter().map(|v| v.abs()).sum::<f64>() + ineq.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

fn kkt_parts(eval: &NlpEval, mult: &Multipliers) -> KktResidual {
    KktResidual {
        stationarity: lagrangian_gradient(eval, mult).amax(),
        primal: infeasibility(&eval.eq, &eval.ineq),
        dual: mult.ineq.iter().fold(0.0f64, |m, v| m.max(-v)),
        complementarity: mult
            .ineq
            .iter()
            .zip(eval.ineq.iter())
            .fold(0.0f64, |m, (l, c)| m.max((l * c).abs())),
    }
}

/// Max of stationarity, primal feasibility, dual feasibility and
/// complementarity residuals (infinity norms).
pub fn kkt_residual(nlp: &dyn Nlp, primal: &Vector, multipliers: &Multipliers) -> Result<f64> {
    Ok(kkt_residual_parts(nlp, primal, multipliers)?.max())
}

pub fn kkt_residual_parts(
    nlp: &dyn Nlp,
    primal: &Vector,
    multipliers: &Multipliers,
) -> Result<KktResidual> {
    if primal.len() != nlp.n_vars()
        || multipliers.eq.len() != nlp.n_eq()
        || multipliers.ineq.len() != nlp.n_ineq()
    {
        return Err(DcocError::Layout("kkt residual: dimension mismatch".into()));
    }
    let eval = nlp.evaluate(primal)?;
    Ok(kkt_parts(&eval, multipliers))
}

/// Damped BFGS update of `b` (Powell).
fn bfgs_update(b: &mut Matrix, s: &Vector, y: &Vector, damping: f64) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let y = if sy < damping * sbs {
        let t = (1.0 - damping) * sbs / (sbs - sy);
        y * t + &bs * (1.0 - t)
    } else {
        y.clone()
    };
    let sy = s.dot(&y);
    if !(sy > 0.0) {
        return;
    }
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    b.ger(1.0 / sy, &y, &y, 1.0);
    // keep exact symmetry
    let sym = (&*b + b.transpose()) * 0.5;
    *b = sym;
}

/// Lagrangian Hessian by central differences over `vars`, symmetrized and
/// with eigenvalues replaced by `max(|lambda|, floor)`. Other diagonal
/// entries are `floor`.
fn fd_lagrangian_hessian(
    nlp: &dyn Nlp,
    z: &Vector,
    mult: &Multipliers,
    vars: &[usize],
    floor: f64,
) -> Result<Matrix> {
    let n = z.len();
    let k = vars.len();
    let mut block = Matrix::zeros(k, k);
    let mut probe = z.clone();
    for (c, &i) in vars.iter().enumerate() {
        let h = fd::step_size(z[i]);
        probe[i] = z[i] + h;
        let plus = nlp.lagrangian_gradient(&probe, mult)?;
        probe[i] = z[i] - h;
        let minus = nlp.lagrangian_gradient(&probe, mult)?;
        probe[i] = z[i];
        for (r, &j) in vars.iter().enumerate() {
            block[(r, c)] = (plus[j] - minus[j]) / (2.0 * h);
        }
    }
    let block = (&block + block.transpose()) * 0.5;
    let eig = block.symmetric_eigen();
    let lifted = eig.eigenvalues.map(|v| v.abs().max(floor));
    let block = &eig.eigenvectors * Matrix::from_diagonal(&lifted) * eig.eigenvectors.transpose();
    let mut hess = Matrix::identity(n, n) * floor;
    for (c, &i) in vars.iter().enumerate() {
        for (r, &j) in vars.iter().enumerate() {
            hess[(j, i)] = block[(r, c)];
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Solves the NLP from `init`.
pub fn solve(nlp: &dyn Nlp, init: &Vector, opts: &SolverOptions) -> Result<SolverSolution> {
    opts.validate()?;
    let n = nlp.n_vars();
    if init.len() != n {
        return Err(DcocError::Layout(format!(
            "initial point has {} entries, NLP has {n} variables",
            init.len()
        )));
    }
    if let Some(index) = init.iter().position(|v| !v.is_finite()) {
        return Err(DcocError::Evaluation {
            what: "initial point",
            index,
        });
    }

    let mut z = init.clone();
    let mut eval = nlp.evaluate(&z)?;
    eval.check_finite()?;
    let mut mult = Multipliers::zeros(nlp.n_eq(), nlp.n_ineq());
    let mut hess = Matrix::identity(n, n) * opts.initial_hessian;
    let mut penalty = 1.0f64;
    let mut merit_trace = Vec::new();
    let mut hint: Vec<usize> = Vec::new();
    let curved = match opts.hessian {
        HessianMode::FiniteDifference => nlp.curved_vars(),
        HessianMode::Bfgs => Vec::new(),
    };
    let mut status = SolverStatus::MaxIter;
    let mut iterations = 0;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        if kkt_parts(&eval, &mult).max() <= opts.kkt_tol {
            status = SolverStatus::Optimal;
            break;
        }
        if iter == opts.max_iter {
            break;
        }
        if opts.hessian == HessianMode::FiniteDifference {
            hess = fd_lagrangian_hessian(nlp, &z, &mult, &curved, opts.initial_hessian)?;
        }

        let eq_rhs = -&eval.eq;
        let ineq_rhs = -&eval.ineq;
        let subproblem = |h: &Matrix| {
            qp::solve_qp_warm(
                &Qp {
                    hessian: h,
                    linear: &eval.gradient,
                    eq_normals: &eval.eq_jacobian_t,
                    eq_rhs: &eq_rhs,
                    ineq_normals: &eval.ineq_jacobian_t,
                    ineq_rhs: &ineq_rhs,
                },
                &hint,
            )
        };
        let step = match subproblem(&hess) {
            Err(QpFailure::NotConvex) => {
                hess = Matrix::identity(n, n) * opts.initial_hessian;
                subproblem(&hess)
            }
            other => other,
        };
        let step = match step {
            Ok(s) => s,
            Err(QpFailure::Infeasible) => {
                status = SolverStatus::InfeasibleSubproblem;
                break;
            }
            Err(QpFailure::NotConvex) => return Err(DcocError::QpUnbounded),
            Err(QpFailure::IterationLimit) => {
                return Err(DcocError::Resource("QP subproblem iteration limit".into()));
            }
        };
        hint = step
            .active
            .iter()
            .filter_map(|&i| i.checked_sub(nlp.n_eq()))
            .collect();
        let d = step.x;
        let qp_mult = Multipliers {
            eq: step.eq_multipliers,
            ineq: step.ineq_multipliers,
        };

        let dual_norm = qp_mult.eq.amax().max(qp_mult.ineq.amax());
        if penalty < 1.1 * dual_norm {
            penalty = (opts.penalty_growth * dual_norm).max(penalty * opts.penalty_growth);
        }

        let step_norm = d.amax();
        if step_norm <= 1e-15 * (1.0 + z.amax()) {
            // the current point solves its own QP: accept the QP multipliers
            mult = qp_mult;
            if kkt_parts(&eval, &mult).max() <= opts.kkt_tol {
                status = SolverStatus::Optimal;
            } else {
                status = SolverStatus::LineSearchFailure;
            }
            break;
        }

        let viol = l1_violation(&eval.eq, &eval.ineq);
        let merit = eval.objective + penalty * viol;
        let slope = eval.gradient.dot(&d) - penalty * viol;
        let slope = slope.min(-1e-16 * merit.abs().max(1.0));
        let try_point = |point: &Vector| -> Result<Option<(f64, NlpValues)>> {
            match nlp.values(point) {
                Ok(v)
                    if v.objective.is_finite()
                        && v.eq.iter().chain(v.ineq.iter()).all(|x| x.is_finite()) =>
                {
                    Ok(Some((v.objective + penalty * l1_violation(&v.eq, &v.ineq), v)))
                }
                Ok(_)
                | Err(DcocError::SimulationDiverged { .. })
                | Err(DcocError::GimbalSingularity { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let target = |alpha: f64| merit + opts.armijo * alpha * slope;
        let mut alpha = 1.0;
        let full = &z + &d;
        let mut accepted = None;
        match try_point(&full)? {
            Some((tm, _)) if tm <= target(1.0) => accepted = Some((full, tm)),
            Some((_, values)) => {
                // second-order correction: re-linearize around the full step
                let eq_rhs = -(values.eq - eval.eq_jacobian_t.tr_mul(&d));
                let ineq_rhs = -(values.ineq - eval.ineq_jacobian_t.tr_mul(&d));
                let corrected = qp::solve_qp_warm(
                    &Qp {
                        hessian: &hess,
                        linear: &eval.gradient,
                        eq_normals: &eval.eq_jacobian_t,
                        eq_rhs: &eq_rhs,
                        ineq_normals: &eval.ineq_jacobian_t,
                        ineq_rhs: &ineq_rhs,
                    },
                    &hint,
                );
                if let Ok(c) = corrected {
                    let point = &z + &c.x;
                    if let Some((tm, _)) = try_point(&point)? {
                        if tm <= target(1.0) {
                            accepted = Some((point, tm));
                        }
                    }
                }
            }
            None => {}
        }
        while accepted.is_none() {
            alpha *= opts.backtrack_ratio;
            if alpha < 1e-12 {
                break;
            }
            let trial = &z + &d * alpha;
            if let Some((tm, _)) = try_point(&trial)? {
                if tm <= target(alpha) {
                    accepted = Some((trial, tm));
                }
            }
        }
        let Some((z_new, merit_new)) = accepted else {
            mult = qp_mult;
            status = SolverStatus::LineSearchFailure;
            break;
        };
        merit_trace.push((merit, merit_new));
        log::debug!(
            "iter {iter}: merit {merit:.6e} -> {merit_new:.6e}, alpha {alpha:.3e}, |d| {step_norm:.3e}, qp iters {}, penalty {penalty:.3e}",
            step.iterations
        );

        let eval_new = nlp.evaluate(&z_new)?;
        eval_new.check_finite()?;
        let s = &z_new - &z;
        let y = lagrangian_gradient(&eval_new, &qp_mult) - lagrangian_gradient(&eval, &qp_mult);
        if opts.hessian == HessianMode::Bfgs {
            bfgs_update(&mut hess, &s, &y, opts.bfgs_damping);
        }

        z = z_new;
        eval = eval_new;
        mult = qp_mult;
    }

    let parts = kkt_parts(&eval, &mult);
    if status == SolverStatus::Optimal && parts.max() > opts.kkt_tol {
        status = SolverStatus::MaxIter;
    }
    Ok(SolverSolution {
        primal: z,
        objective: eval.objective,
        primal_infeasibility: parts.primal,
        kkt_residual: parts.max(),
        multipliers: mult,
        status,
        iterations,
        merit_trace,
    })
}

/// Solves from the default start and `n_starts - 1` seeded perturbed starts
/// (run concurrently) and keeps the best optimal run by objective, or the
/// run with the smallest KKT residual when none is optimal. Ties go to the
/// earlier start.
pub fn multi_start(
    nlp: &dyn Nlp,
    n_starts: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<SolverSolution> {
    Ok(multi_start_all(nlp, n_starts, seed, opts)?.0)
}

/// Like [`multi_start`], also returning every run in start order.
pub fn multi_start_all(
    nlp: &dyn Nlp,
    n_starts: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<(SolverSolution, Vec<SolverSolution>)> {
    if n_starts == 0 {
        return Err(DcocError::Parameter(
            "multi-start needs at least one start".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![nlp.initial_point()];
    for _ in 1..n_starts {
        starts.push(nlp.random_point(&mut rng));
    }
    let runs: Vec<Result<SolverSolution>> = thread::scope(|scope| {
        let handles: Vec<_> = starts
            .iter()
            .map(|s| scope.spawn(move || solve(nlp, s, opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("solver thread panicked"))
            .collect()
    });
    let runs: Vec<SolverSolution> = runs.into_iter().collect::<Result<_>>()?;
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.status == SolverStatus::Optimal)
        .min_by(|(ia, a), (ib, b)| a.objective.total_cmp(&b.objective).then(ia.cmp(ib)))
        .or_else(|| {
            runs.iter().enumerate().min_by(|(ia, a), (ib, b)| {
                a.kkt_residual.total_cmp(&b.kkt_residual).then(ia.cmp(ib))
            })
        })
        .map(|(_, r)| r.clone())
        .expect("at least one run");
    Ok((best, runs))
}

/// Closure-backed NLP with inequality constraints only.
pub struct FnNlp<F, G, C, J> {
    pub n_vars: usize,
    pub n_ineq: usize,
    pub objective: F,
    pub gradient: G,
    /// `c(z) >= 0`.
    pub constraints: C,
    /// Transposed Jacobian, `n_vars x n_ineq`.
    pub jacobian_t: J,
    pub start: Vector,
}

impl<F, G, C, J> Nlp for FnNlp<F, G, C, J>
where
    F: Fn(&Vector) -> f64 + Sync,
    G: Fn(&Vector) -> Vector + Sync,
    C: Fn(&Vector) -> Vector + Sync,
    J: Fn(&Vector) -> Matrix + Sync,
{
    fn n_vars(&self) -> usize {
        self.n_vars
    }
    fn n_ineq(&self) -> usize {
        self.n_ineq
    }
    fn values(&self, z: &Vector) -> Result<NlpValues> {
        Ok(NlpValues {
            objective: (self.objective)(z),
            eq: Vector::zeros(0),
            ineq: (self.constraints)(z),
        })
    }
    fn evaluate(&self, z: &Vector) -> Result<NlpEval> {
        Ok(NlpEval {
            objective: (self.objective)(z),
            gradient: (self.gradient)(z),
            eq: Vector::zeros(0),
            eq_jacobian_t: Matrix::zeros(self.n_vars, 0),
            ineq: (self.constraints)(z),
            ineq_jacobian_t: (self.jacobian_t)(z),
        })
    }
    fn initial_point(&self) -> Vector {
        self.start.clone()
    }
}
