//! Independent computation of the maximum time-before-exit.
//!
//! The sweep answers, for a horizon `m`, whether some admissible controls
//! keep the state inside `X(1)..X(m)`, and binary-searches the largest such
//! `m`. Affine problems are decided by a linear program. Other problems use
//! the bundled solver on a max-min-margin formulation from several starts;
//! a feasible verdict there is always backed by a simulated witness, an
//! infeasible one is only as good as the starts.
//!
//! The grid DP is a dynamic program on a state grid with a finite control
//! list. Its greedy policy is replayed on the true dynamics, so the value it
//! reports is attained by an admissible control sequence.

use minilp::{ComparisonOp, OptimizationDirection, Problem as Lp};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{DcocError, Result};
use crate::problem::{self, DcocProblem, Matrix, Vector, DEFAULT_FEAS_TOL};
use crate::solver::{self, Nlp, NlpEval, NlpValues, SolverOptions};
use crate::transcription::{aux_width, control_rows, shoot, split_values, LinearRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    Sweep,
    GridDp,
}

/// Feasibility of horizon `m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub m: usize,
    pub feasible: bool,
    /// Decided by a solve rather than inferred from monotonicity.
    pub solved: bool,
    /// Best min-margin found (positive inside); `None` when inferred.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub kappa_star: usize,
    /// One entry per `m = 1..=N`.
    pub verdicts: Vec<Verdict>,
    /// Controls over the full horizon reaching `kappa_star`.
    #[serde(serialize_with = "serialize_controls")]
    pub witness: Vec<Vector>,
    /// Time-before-exit of the simulated witness.
    pub witness_kappa: usize,
    pub method: OracleMethod,
    /// True when every verdict is exact (linear programs); false when an
    /// infeasible verdict rests on local solves or the value is a DP bound.
    pub exact: bool,
}

fn serialize_controls<S: serde::Serializer>(controls: &[Vector], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(controls.len()))?;
    for u in controls {
        seq.serialize_element(u.as_slice())?;
    }
    seq.end()
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Starts per nonlinear feasibility check, at least 8.
    pub starts: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0,
            solver: SolverOptions {
                kkt_tol: 1e-9,
                max_iter: 200,
                initial_hessian: 1e-4,
                ..SolverOptions::default()
            },
        }
    }
}

/// Outcome of one horizon check.
struct Check {
    feasible: bool,
    margin: f64,
    /// Controls `u_0..u_{m-1}`.
    controls: Vec<Vector>,
}

/// Largest `m` for which `X(1)..X(m)` can be kept, by binary search over
/// horizon feasibility checks.
pub fn kappa_star_sweep(problem: &DcocProblem, opts: &SweepOptions) -> Result<OracleReport> {
    require_initial_state(problem)?;
    let n = problem.horizon();
    let affine = problem.is_affine();
    if !affine && opts.starts < 8 {
        return Err(DcocError::Parameter(format!(
            "nonlinear sweeps need at least 8 starts, got {}",
            opts.starts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut solved: Vec<Option<(bool, f64)>> = vec![None; n + 1];
    let mut best: Vec<Vector> = Vec::new();
    let mut check = |m: usize, best: &mut Vec<Vector>, solved: &mut Vec<Option<(bool, f64)>>| -> Result<bool> {
        let c = if affine {
            lp_check(problem, m)?
        } else {
            nlp_check(problem, m, best, opts, &mut rng)?
        };
        if c.feasible {
            *best = c.controls.clone();
        }
        solved[m] = Some((c.feasible, c.margin));
        Ok(c.feasible)
    };

    // feasible prefix [1, lo], infeasible from hi on
    let (mut lo, mut hi) = (0usize, n + 1);
    if check(n, &mut best, &mut solved)? {
        lo = n;
    } else {
        hi = n;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if check(mid, &mut best, &mut solved)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kappa_star = lo;
    let witness = complete_controls(problem, &best);
    let traj = problem::simulate(problem, &witness)?;
    let witness_kappa = problem::time_before_exit(&traj, problem.constraints(), DEFAULT_FEAS_TOL)?;
    let verdicts = (1..=n)
        .map(|m| Verdict {
            m,
            feasible: m <= kappa_star,
            solved: solved[m].is_some(),
            margin: solved[m].map(|(_, t)| t),
        })
        .collect();
    Ok(OracleReport {
        kappa_star,
        verdicts,
        witness,
        witness_kappa,
        method: OracleMethod::Sweep,
        exact: affine,
    })
}

fn require_initial_state(problem: &DcocProblem) -> Result<()> {
    let m = problem::check_membership(problem.x0(), &problem.constraints()[0], DEFAULT_FEAS_TOL);
    if m.inside {
        Ok(())
    } else {
        Err(DcocError::InvalidInitialState {
            worst_margin: m.margin.min(),
        })
    }
}

/// Pads `prefix` with nominal controls up to the horizon.
fn complete_controls(problem: &DcocProblem, prefix: &[Vector]) -> Vec<Vector> {
    let nominal = problem.control_set().nominal();
    (0..problem.horizon())
        .map(|k| prefix.get(k).cloned().unwrap_or_else(|| nominal.clone()))
        .collect()
}

/// Max-min-margin LP over `m` steps of an affine problem:
/// maximize `t` s.t. `G_k x_k(u) + t <= h_k` for `k = 1..m`, `u_k in U`.
fn lp_check(problem: &DcocProblem, m: usize) -> Result<Check> {
    let dynamics = problem
        .dynamics()
        .as_affine()
        .ok_or_else(|| DcocError::Parameter("LP check needs affine dynamics".into()))?;
    let set = problem.control_set();
    let (nx, nu) = (problem.state_dim(), problem.control_dim());
    let width = aux_width(set);
    let mut lp = Lp::new(OptimizationDirection::Maximize);
    let mut vars = Vec::new();
    for _ in 0..m {
        for i in 0..nu {
            let lo = set.lower()[i].unwrap_or(f64::NEG_INFINITY);
            let hi = set.upper()[i].unwrap_or(f64::INFINITY);
            vars.push(lp.add_var(0.0, (lo, hi)));
        }
    }
    let aux: Vec<_> = (0..m * width).map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    // the cap keeps t bounded even when no stage constraint binds
    let t = lp.add_var(1.0, (f64::NEG_INFINITY, 1.0));
    for row in control_rows(set, m, 0, m * nu) {
        let expr: Vec<_> = row
            .coefs
            .iter()
            .map(|&(j, c)| (if j < m * nu { vars[j] } else { aux[j - m * nu] }, c))
            .collect();
        lp.add_constraint(expr, ComparisonOp::Ge, -row.constant);
    }
    // x_k = alpha + Gamma u
    let mut alpha = problem.x0().clone();
    let mut gamma = Matrix::zeros(nx, m * nu);
    for k in 1..=m {
        alpha = &dynamics.a * &alpha + &dynamics.c;
        let mut next = &dynamics.a * &gamma;
        next.columns_mut((k - 1) * nu, nu).copy_from(&dynamics.b);
        gamma = next;
        let c = &problem.constraints()[k];
        let g = c.map().as_linear().expect("affine problem has linear stage maps");
        let ga = g * &alpha;
        let gg = g * &gamma;
        for r in 0..c.rows() {
            let mut expr: Vec<_> = (0..k * nu)
                .filter(|&j| gg[(r, j)] != 0.0)
                .map(|j| (vars[j], gg[(r, j)]))
                .collect();
            expr.push((t, 1.0));
            lp.add_constraint(expr, ComparisonOp::Le, c.bound()[r] - ga[r]);
        }
    }
    let solution = match lp.solve() {
        Ok(s) => s,
        // U is nonempty and t is free below, so this only signals numerical trouble
        Err(e) => return Err(DcocError::Resource(format!("oracle LP failed: {e}"))),
    };
    let margin = *solution.var_value(t);
    let controls = (0..m)
        .map(|k| Vector::from_fn(nu, |i, _| *solution.var_value(vars[k * nu + i])))
        .collect();
    Ok(Check {
        feasible: margin >= -1e-9,
        margin,
        controls,
    })
}

/// Tries the max-min-margin NLP from several starts; stops at the first
/// witness that survives simulation.
fn nlp_check(
    problem: &DcocProblem,
    m: usize,
    best: &[Vector],
    opts: &SweepOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Check> {
    let truncated = problem.truncated(m)?;
    let nlp = MarginNlp::new(&truncated)?;
    let mut best_margin = f64::NEG_INFINITY;
    let mut best_controls = complete_controls(&truncated, best);
    for start in 0..opts.starts {
        let init = if start == 0 {
            nlp.point(&complete_controls(&truncated, best))?
        } else {
            nlp.random_point(rng)
        };
        let sol = solver::solve(&nlp, &init, &opts.solver)?;
        let controls = nlp.controls_of(&sol.primal);
        let traj = match problem::simulate(&truncated, &controls) {
            Ok(t) => t,
            Err(DcocError::SimulationDiverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let margin = traj.stage_margins[1..].iter().map(|v| v.min()).fold(f64::INFINITY, f64::min);
        let admissible = controls.iter().all(|u| truncated.control_set().contains(u, 1e-9));
        if admissible && margin > best_margin {
            best_margin = margin;
            best_controls = controls;
        }
        if admissible && margin >= -DEFAULT_FEAS_TOL {
            break;
        }
    }
    Ok(Check {
        feasible: best_margin >= -DEFAULT_FEAS_TOL,
        margin: best_margin,
        controls: best_controls,
    })
}

/// `min t` s.t. `h_k - H_k(x_k(u)) + t >= 0` for `k = 1..N`, `u_k in U`.
/// Decision vector `[u, aux, t]`.
pub struct MarginNlp {
    problem: DcocProblem,
    linear_rows: Vec<LinearRow>,
    aux_start: usize,
    t_index: usize,
    stage_rows: usize,
}

impl MarginNlp {
    pub fn new(problem: &DcocProblem) -> Result<Self> {
        let n = problem.horizon();
        let nu = problem.control_dim();
        let aux_start = n * nu;
        let t_index = aux_start + n * aux_width(problem.control_set());
        let stage_rows = problem.constraints()[1..].iter().map(|c| c.rows()).sum();
        Ok(Self {
            problem: problem.clone(),
            linear_rows: control_rows(problem.control_set(), n, 0, aux_start),
            aux_start,
            t_index,
            stage_rows,
        })
    }

    pub fn controls_of(&self, z: &Vector) -> Vec<Vector> {
        let nu = self.problem.control_dim();
        (0..self.problem.horizon())
            .map(|k| z.rows(k * nu, nu).into_owned())
            .collect()
    }

    /// Decision vector for `controls` with the smallest feasible `t`.
    pub fn point(&self, controls: &[Vector]) -> Result<Vector> {
        let nu = self.problem.control_dim();
        let width = aux_width(self.problem.control_set());
        let mut z = Vector::zeros(self.t_index + 1);
        for (k, u) in controls.iter().enumerate() {
            z.rows_mut(k * nu, nu).copy_from(u);
            for (j, s) in split_values(self.problem.control_set(), u).iter().enumerate() {
                z[self.aux_start + k * width + j] = *s;
            }
        }
        let (states, _) = shoot(&self.problem, controls, false)?;
        z[self.t_index] = states[1..]
            .iter()
            .zip(&self.problem.constraints()[1..])
            .map(|(x, c)| -c.margin(x).min())
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(z)
    }

    fn stage_values(&self, z: &Vector, states: &[Vector], out: &mut Vector) {
        let mut row = self.linear_rows.len();
        for (x, c) in states[1..].iter().zip(&self.problem.constraints()[1..]) {
            for v in c.margin(x).iter() {
                out[row] = v + z[self.t_index];
                row += 1;
            }
        }
    }
}

impl Nlp for MarginNlp {
    fn n_vars(&self) -> usize {
        self.t_index + 1
    }

    fn n_ineq(&self) -> usize {
        self.linear_rows.len() + self.stage_rows
    }

    fn curved_vars(&self) -> Vec<usize> {
        (0..self.aux_start).collect()
    }

    fn values(&self, z: &Vector) -> Result<NlpValues> {
        let (states, _) = shoot(&self.problem, &self.controls_of(z), false)?;
        let mut ineq = Vector::zeros(self.n_ineq());
        for (i, row) in self.linear_rows.iter().enumerate() {
            ineq[i] = row.eval(z);
        }
        self.stage_values(z, &states, &mut ineq);
        Ok(NlpValues {
            objective: z[self.t_index],
            eq: Vector::zeros(0),
            ineq,
        })
    }

    fn evaluate(&self, z: &Vector) -> Result<NlpEval> {
        let n = self.n_vars();
        let (states, sens) = shoot(&self.problem, &self.controls_of(z), true)?;
        let mut ineq = Vector::zeros(self.n_ineq());
        let mut jac = Matrix::zeros(n, self.n_ineq());
        for (i, row) in self.linear_rows.iter().enumerate() {
            ineq[i] = row.eval(z);
            for &(j, c) in &row.coefs {
                jac[(j, i)] += c;
            }
        }
        self.stage_values(z, &states, &mut ineq);
        let mut row = self.linear_rows.len();
        for (k, c) in self.problem.constraints().iter().enumerate().skip(1) {
            let d_h = c.jacobian(&states[k]) * &sens[k];
            for r in 0..c.rows() {
                for j in 0..self.aux_start {
                    jac[(j, row)] = -d_h[(r, j)];
                }
                jac[(self.t_index, row)] = 1.0;
                row += 1;
            }
        }
        let mut gradient = Vector::zeros(n);
        gradient[self.t_index] = 1.0;
        Ok(NlpEval {
            objective: z[self.t_index],
            gradient,
            eq: Vector::zeros(0),
            eq_jacobian_t: Matrix::zeros(n, 0),
            ineq,
            ineq_jacobian_t: jac,
        })
    }

    fn initial_point(&self) -> Vector {
        let nominal = self.problem.control_set().nominal();
        self.point(&vec![nominal; self.problem.horizon()])
            .expect("nominal controls must simulate")
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Vector {
        let set = self.problem.control_set();
        let controls: Vec<Vector> = (0..self.problem.horizon()).map(|_| set.sample(rng)).collect();
        self.point(&controls).unwrap_or_else(|_| self.initial_point())
    }
}

/// Axis points per state component and a finite list of admissible controls.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub axes: Vec<Vec<f64>>,
    pub controls: Vec<Vector>,
    /// Upper bound on grid points times controls times stages.
    pub max_work: usize,
}

impl GridSpec {
    /// `points` evenly spaced values on each `[lo, hi]`.
    pub fn uniform(ranges: &[(f64, f64)], points: usize, controls: Vec<Vector>) -> Self {
        let axes = ranges
            .iter()
            .map(|&(lo, hi)| {
                (0..points)
                    .map(|i| lo + (hi - lo) * i as f64 / (points.max(2) - 1) as f64)
                    .collect()
            })
            .collect();
        Self {
            axes,
            controls,
            max_work: 50_000_000,
        }
    }
}

fn nearest(axis: &[f64], v: f64) -> usize {
    let pos = axis.partition_point(|&a| a < v);
    if pos == 0 {
        0
    } else if pos == axis.len() {
        axis.len() - 1
    } else if v - axis[pos - 1] <= axis[pos] - v {
        pos - 1
    } else {
        pos
    }
}

/// Value iteration on the gridded system; the greedy policy is replayed on
/// the exact dynamics and the attained time-before-exit is reported.
pub fn kappa_star_grid_dp(problem: &DcocProblem, grid: &GridSpec) -> Result<OracleReport> {
    require_initial_state(problem)?;
    let nx = problem.state_dim();
    if nx > 3 {
        return Err(DcocError::Parameter(format!("grid DP supports up to 3 states, got {nx}")));
    }
    if grid.axes.len() != nx || grid.axes.iter().any(|a| a.is_empty()) || grid.controls.is_empty() {
        return Err(DcocError::Parameter("grid needs one nonempty axis per state and at least one control".into()));
    }
    for axis in &grid.axes {
        if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DcocError::Parameter("grid axes must be finite and increasing".into()));
        }
    }
    if let Some(bad) = grid.controls.iter().find(|u| !problem.control_set().contains(u, 1e-12)) {
        return Err(DcocError::Parameter(format!("grid control {:?} is outside U", bad.as_slice())));
    }
    let n = problem.horizon();
    let points: usize = grid.axes.iter().map(|a| a.len()).product();
    let work = points.saturating_mul(grid.controls.len()).saturating_mul(n);
    if work > grid.max_work {
        return Err(DcocError::Resource(format!(
            "grid DP needs {work} transitions, cap is {}",
            grid.max_work
        )));
    }

    let point = |mut idx: usize| -> Vector {
        Vector::from_fn(nx, |d, _| {
            let len = grid.axes[d].len();
            let v = grid.axes[d][idx % len];
            idx /= len;
            v
        })
    };
    let index_of = |x: &Vector| -> usize {
        let mut idx = 0;
        for d in (0..nx).rev() {
            idx = idx * grid.axes[d].len() + nearest(&grid.axes[d], x[d]);
        }
        idx
    };
    let dynamics = problem.dynamics();
    let inside = |x: &Vector, k: usize| problem::check_membership(x, &problem.constraints()[k], DEFAULT_FEAS_TOL).inside;

    // successor table, shared by all stages when the constraints are stationary
    let mut next: Vec<Option<Vector>> = Vec::with_capacity(points * grid.controls.len());
    for p in 0..points {
        let x = point(p);
        for u in &grid.controls {
            next.push(dynamics.step(&x, u).ok().filter(|y| y.iter().all(|v| v.is_finite())));
        }
    }
    // value[k][p]: steps survivable from grid point p at time k
    let mut value = vec![vec![0usize; points]; n + 1];
    for k in (0..n).rev() {
        for p in 0..points {
            let mut best = 0;
            for c in 0..grid.controls.len() {
                if let Some(y) = &next[p * grid.controls.len() + c] {
                    if inside(y, k + 1) {
                        best = best.max(1 + value[k + 1][index_of(y)]);
                    }
                }
            }
            value[k][p] = best;
        }
    }

    // greedy replay from the exact initial state
    let mut x = problem.x0().clone();
    let mut witness = Vec::with_capacity(n);
    for k in 0..n {
        let mut choice = (0usize, &grid.controls[0]);
        for u in &grid.controls {
            let score = match dynamics.step(&x, u) {
                Ok(y) if y.iter().all(|v| v.is_finite()) && inside(&y, k + 1) => 1 + value[k + 1][index_of(&y)],
                _ => 0,
            };
            if score > choice.0 {
                choice = (score, u);
            }
        }
        witness.push(choice.1.clone());
        x = dynamics.step(&x, choice.1)?;
        if x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    witness.resize(n, grid.controls[0].clone());
    let traj = problem::simulate(problem, &witness)?;
    let kappa = problem::time_before_exit(&traj, problem.constraints(), DEFAULT_FEAS_TOL)?;
    let verdicts = (1..=n)
        .map(|m| Verdict {
            m,
            feasible: m <= kappa,
            solved: false,
            margin: None,
        })
        .collect();
    Ok(OracleReport {
        kappa_star: kappa,
        verdicts,
        witness,
        witness_kappa: kappa,
        method: OracleMethod::GridDp,
        exact: false,
    })
}
