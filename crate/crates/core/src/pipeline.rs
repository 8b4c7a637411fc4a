//! Build, solve and extract in one call.

use serde::{Deserialize, Serialize};

use crate::error::{DcocError, Result};
use crate::problem::DcocProblem;
use crate::solver::{self, SolverOptions, SolverSolution, SolverStatus};
use crate::transcription::{build_nlp, default_big_m, NlpInstance, SolutionExtract, DEFAULT_THETA};

/// Runs whose constraint violation stays below this count as feasible when
/// picking among starts.
const PICK_FEAS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    pub theta: f64,
    /// `None` picks [`default_big_m`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    pub starts: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            big_m: None,
            starts: 1,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

/// Short account of one start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartSummary {
    pub status: SolverStatus,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    pub kappa: usize,
}

#[derive(Clone)]
pub struct PipelineResult {
    pub nlp: NlpInstance,
    pub solution: SolverSolution,
    pub extract: SolutionExtract,
    /// Index of the chosen start in `starts`.
    pub chosen: usize,
    pub starts: Vec<StartSummary>,
}

impl PipelineResult {
    pub fn theta(&self) -> f64 {
        self.nlp.theta()
    }
    pub fn big_m(&self) -> f64 {
        self.nlp.big_m()
    }
}

/// Transcribes `problem`, solves from `opts.starts` starts and extracts the
/// best run: lowest objective among feasible runs, otherwise the least
/// infeasible one.
pub fn solve_dcoc(problem: &DcocProblem, opts: &PipelineOptions) -> Result<PipelineResult> {
    let big_m = opts.big_m.unwrap_or_else(|| default_big_m(problem));
    let nlp = build_nlp(problem, opts.theta, big_m)?;
    let (_, runs) = solver::multi_start_all(&nlp, opts.starts, opts.seed, &opts.solver)?;
    let mut extracts = Vec::with_capacity(runs.len());
    for run in &runs {
        extracts.push(nlp.extract(&run.primal)?);
    }
    let key = |r: &SolverSolution| {
        let feasible = r.primal_infeasibility <= PICK_FEAS_TOL;
        (!feasible, if feasible { r.objective } else { r.primal_infeasibility })
    };
    let chosen = (0..runs.len())
        .min_by(|&a, &b| {
            let (fa, va) = key(&runs[a]);
            let (fb, vb) = key(&runs[b]);
            fa.cmp(&fb).then(va.total_cmp(&vb)).then(a.cmp(&b))
        })
        .expect("at least one start");
    let starts = runs
        .iter()
        .zip(&extracts)
        .map(|(r, e)| StartSummary {
            status: r.status,
            iterations: r.iterations,
            objective: r.objective,
            kkt_residual: r.kkt_residual,
            primal_infeasibility: r.primal_infeasibility,
            kappa: e.kappa,
        })
        .collect();
    let solution = runs.into_iter().nth(chosen).expect("chosen run");
    let extract = extracts.into_iter().nth(chosen).expect("chosen extract");
    Ok(PipelineResult {
        nlp,
        solution,
        extract,
        chosen,
        starts,
    })
}

/// Outcome of comparing a solve against a known `kappa_star`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaDiagnostic {
    pub kappa_star: usize,
    pub kappa: usize,
    /// `Some` when `kappa < kappa_star` and a re-solve with `theta^2` ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squared_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squared_theta_kappa: Option<usize>,
}

/// When the solve falls short of `kappa_star`, re-solves once with
/// `theta^2` and reports both values. Never loops.
pub fn theta_diagnostic(
    problem: &DcocProblem,
    opts: &PipelineOptions,
    result: &PipelineResult,
    kappa_star: usize,
) -> Result<ThetaDiagnostic> {
    let kappa = result.extract.kappa;
    if kappa > kappa_star {
        return Err(DcocError::Parameter(format!(
            "solve reached {kappa} steps, above the claimed optimum {kappa_star}"
        )));
    }
    let mut diag = ThetaDiagnostic {
        kappa_star,
        kappa,
        squared_theta: None,
        squared_theta_kappa: None,
    };
    if kappa < kappa_star {
        let theta = result.theta() * result.theta();
        let again = solve_dcoc(
            problem,
            &PipelineOptions {
                theta,
                big_m: Some(result.big_m()),
                ..opts.clone()
            },
        )?;
        diag.squared_theta = Some(theta);
        diag.squared_theta_kappa = Some(again.extract.kappa);
    }
    Ok(diag)
}
