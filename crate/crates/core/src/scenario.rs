//! Scenario files and the runs driven by them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attitude::{AttitudeLimits, AttitudeModel, AttitudeParams, DiscreteAttitude, EULER_LABELS};
use crate::error::{DcocError, Result};
use crate::oracle::{self, GridSpec, OracleMethod, OracleReport, SweepOptions};
use crate::pipeline::{self, PipelineOptions, StartSummary, ThetaDiagnostic};
use crate::plot::{self, Panel, Series};
use crate::problem::{
    self, AffineDynamics, ControlSet, DcocProblem, Dynamics, Matrix, OneNormCap, StageConstraint, Trajectory,
    Vector, DEFAULT_FEAS_TOL,
};
use crate::solver::{Nlp, SolverOptions, SolverStatus};
use crate::transcription::{self, DEFAULT_THETA};

pub const SCHEMA_VERSION: u32 = 1;

/// A margin counts as "at the bound" while `0 <= margin <= HOLD_REL * |h|`.
pub const HOLD_REL: f64 = 1e-2;
/// Shortest run of held steps reported as a plateau.
pub const HOLD_MIN_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub system: SystemConfig,
    pub x0: Vec<f64>,
    pub horizon: usize,
    /// Sampling period (s); also the time axis of the outputs.
    pub dt: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Test hook: perturbs the dynamics Jacobian so derivative checks fail.
    #[serde(default, skip_serializing_if = "is_false")]
    pub corrupt_jacobian: bool,
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_starts() -> usize {
    1
}
fn is_false(b: &bool) -> bool {
    !*b
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemConfig {
    #[serde(rename = "attitude-3rw")]
    Attitude3rw(AttitudeSystem),
    #[serde(rename = "attitude-2rw")]
    Attitude2rw(AttitudeSystem),
    DoubleIntegrator(DoubleIntegratorSystem),
    CustomLinear(LinearSystem),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttitudeSystem {
    pub params: AttitudeParams,
    pub limits: AttitudeLimits,
    #[serde(default = "default_true")]
    pub srp: bool,
}

/// `p+ = p + v dt`, `v+ = v + u dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleIntegratorSystem {
    pub position: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    pub accel_limit: f64,
}

/// `x+ = A x + B u + c`, `G x <= h`, box and optional 1-norm cap on `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub u_lower: Vec<Option<f64>>,
    pub u_upper: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_one_norm_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Starts per nonlinear sweep check.
    pub starts: usize,
    pub solver: SolverOptions,
    /// Grid DP: points per state axis over the stage box.
    pub grid_points: usize,
    /// Grid DP: levels per control component.
    pub control_levels: usize,
    pub max_work: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let sweep = SweepOptions::default();
        Self {
            starts: sweep.starts,
            solver: sweep.solver,
            grid_points: 101,
            control_levels: 5,
            max_work: 50_000_000,
        }
    }
}

fn config_err(msg: impl Into<String>) -> DcocError {
    DcocError::Config(msg.into())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(config_err(format!("{what} must be a nonempty rectangular matrix")));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl ScenarioConfig {
    /// Parses and validates; every failure is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form, output directory left out.
    pub fn hash(&self) -> String {
        let keyed = ScenarioConfig {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(serde_json::to_string(&keyed).expect("config serializes").as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.theta > 1.0) || !self.theta.is_finite() {
            return Err(config_err(format!("theta > 1 violated: {}", self.theta)));
        }
        if let Some(m) = self.big_m {
            if !(m > 0.0) || !m.is_finite() {
                return Err(config_err(format!("big_m must be positive, got {m}")));
            }
        }
        if self.horizon == 0 {
            return Err(config_err("horizon must be at least 1"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(config_err(format!("dt must be positive, got {}", self.dt)));
        }
        if self.starts == 0 || self.oracle.starts == 0 {
            return Err(config_err("starts must be at least 1"));
        }
        self.solver.validate().map_err(|e| config_err(e.to_string()))?;
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(config_err("x0 must be finite"));
        }
        let (wheels, expected) = match &self.system {
            SystemConfig::Attitude3rw(s) => (s.params.wheel_count(), 3),
            SystemConfig::Attitude2rw(s) => (s.params.wheel_count(), 2),
            _ => (0, 0),
        };
        if wheels != expected {
            return Err(config_err(format!("{expected}-wheel scenario lists {wheels} wheel axes")));
        }
        // building checks dimensions, bounds and x0 in X(0)
        self.problem().map(|_| ()).map_err(|e| match e {
            DcocError::Config(_) => e,
            other => config_err(other.to_string()),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn state_names(&self) -> Vec<String> {
        match &self.system {
            SystemConfig::Attitude3rw(s) | SystemConfig::Attitude2rw(s) => {
                let mut names: Vec<String> = EULER_LABELS.iter().map(|s| s.to_string()).collect();
                names.extend((1..=3).map(|i| format!("omega{i}")));
                names.extend((1..=s.params.wheel_count()).map(|i| format!("nu{i}")));
                names
            }
            SystemConfig::DoubleIntegrator(_) => vec!["p".into(), "v".into()],
            SystemConfig::CustomLinear(_) => (1..=self.state_dim()).map(|i| format!("x{i}")).collect(),
        }
    }

    pub fn control_names(&self) -> Vec<String> {
        let n = match &self.system {
            SystemConfig::Attitude3rw(s) | SystemConfig::Attitude2rw(s) => s.params.wheel_count(),
            SystemConfig::DoubleIntegrator(_) => 1,
            SystemConfig::CustomLinear(l) => l.u_lower.len(),
        };
        (1..=n).map(|i| format!("u{i}")).collect()
    }

    /// The attitude model when this is an attitude scenario.
    pub fn attitude_model(&self) -> Result<Option<AttitudeModel>> {
        match &self.system {
            SystemConfig::Attitude3rw(s) | SystemConfig::Attitude2rw(s) => {
                let model = AttitudeModel::new(s.params.clone())?;
                Ok(Some(if s.srp { model } else { model.without_srp() }))
            }
            _ => Ok(None),
        }
    }

    pub fn problem(&self) -> Result<DcocProblem> {
        let x0 = Vector::from_column_slice(&self.x0);
        let (dynamics, stage, controls): (Arc<dyn Dynamics>, StageConstraint, ControlSet) = match &self.system {
            SystemConfig::Attitude3rw(s) | SystemConfig::Attitude2rw(s) => {
                let wheels = s.params.wheel_count();
                let model = self.attitude_model()?.expect("attitude system");
                (
                    Arc::new(DiscreteAttitude::new(model, self.dt)?),
                    s.limits.stage_constraint(wheels)?,
                    s.limits.control_set(wheels)?,
                )
            }
            SystemConfig::DoubleIntegrator(d) => {
                let mut bounds = vec![problem::ComponentBound {
                    index: 0,
                    lower: Some(d.position[0]),
                    upper: Some(d.position[1]),
                    label: "p".into(),
                }];
                if let Some(v) = d.velocity {
                    bounds.push(problem::ComponentBound {
                        index: 1,
                        lower: Some(v[0]),
                        upper: Some(v[1]),
                        label: "v".into(),
                    });
                }
                if !(d.accel_limit >= 0.0) {
                    return Err(config_err("accel_limit must be nonnegative"));
                }
                (
                    Arc::new(AffineDynamics::double_integrator(self.dt)),
                    StageConstraint::component_bounds(2, &bounds)?,
                    ControlSet::boxed(&[-d.accel_limit], &[d.accel_limit])?,
                )
            }
            SystemConfig::CustomLinear(l) => {
                let a = matrix(&l.a, "a")?;
                let b = matrix(&l.b, "b")?;
                let c = Vector::from_vec(l.c.clone().unwrap_or_else(|| vec![0.0; a.nrows()]));
                let g = matrix(&l.g, "g")?;
                let cap = l.u_one_norm_cap.map(|cap| OneNormCap {
                    components: (0..l.u_lower.len()).collect(),
                    cap,
                });
                (
                    Arc::new(AffineDynamics::new(a, b, c)?),
                    StageConstraint::linear(g, Vector::from_column_slice(&l.h))?,
                    ControlSet::new(l.u_lower.clone(), l.u_upper.clone(), cap)?,
                )
            }
        };
        let dynamics: Arc<dyn Dynamics> = if self.corrupt_jacobian {
            Arc::new(CorruptJacobian(dynamics))
        } else {
            dynamics
        };
        DcocProblem::stationary(dynamics, stage, self.horizon, controls, x0)
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            theta: self.theta,
            big_m: self.big_m,
            starts: self.starts,
            seed: self.seed,
            solver: self.solver.clone(),
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            starts: self.oracle.starts,
            seed: self.seed,
            solver: self.oracle.solver.clone(),
        }
    }

    /// Applies command-line overrides and re-validates.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.theta {
            self.theta = v;
        }
        if let Some(v) = o.big_m {
            self.big_m = Some(v);
        }
        if let Some(v) = o.starts {
            self.starts = v;
        }
        if let Some(v) = &o.out {
            self.output_dir = Some(v.display().to_string());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.output_dir.clone().unwrap_or_else(|| format!("out/{}", self.name)))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub theta: Option<f64>,
    pub big_m: Option<f64>,
    pub starts: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Wraps dynamics and scales `df/dx` by 1.01.
struct CorruptJacobian(Arc<dyn Dynamics>);

impl Dynamics for CorruptJacobian {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.0.control_dim()
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        self.0.step(x, u)
    }
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        let (a, b) = self.0.jacobians(x, u)?;
        Ok((a * 1.01, b))
    }
}

/// Bundled scenario files, by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("3rw_nominal", include_str!("../scenarios/3rw_nominal.json")),
    ("3rw_saturated", include_str!("../scenarios/3rw_saturated.json")),
    ("2rw_nominal", include_str!("../scenarios/2rw_nominal.json")),
    ("2rw_restricted", include_str!("../scenarios/2rw_restricted.json")),
    ("double_integrator", include_str!("../scenarios/double_integrator.json")),
];

pub fn bundled(name: &str) -> Result<ScenarioConfig> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| config_err(format!("no bundled scenario named {name}")))
        .and_then(|(_, text)| ScenarioConfig::from_json(text))
}

/// Scenario behind each reproduced figure.
pub fn figure_scenario(figure: &str) -> Result<ScenarioConfig> {
    let name = match figure {
        "fig1" => "3rw_nominal",
        "fig2" => "3rw_saturated",
        "fig3" => "2rw_nominal",
        "fig4" => "2rw_restricted",
        other => return Err(config_err(format!("unknown figure {other}; expected fig1..fig4"))),
    };
    bundled(name)
}

/// Name of each stage row: `<label>:upper` / `<label>:lower` for rows of a
/// linear map with a single nonzero, `<label>:row<r>` otherwise.
pub fn row_names(c: &StageConstraint) -> Vec<String> {
    let g = c.map().as_linear();
    (0..c.rows())
        .map(|r| {
            let label = &c.labels()[r];
            let side = g.and_then(|g| {
                let nz: Vec<f64> = g.row(r).iter().copied().filter(|v| *v != 0.0).collect();
                (nz.len() == 1).then(|| if nz[0] > 0.0 { "upper" } else { "lower" })
            });
            match side {
                Some(s) => format!("{label}:{s}"),
                None => format!("{label}:row{r}"),
            }
        })
        .collect()
}

/// Distinct row labels in order of first appearance.
pub fn groups(c: &StageConstraint) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in c.labels() {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

/// Smallest margin of each group at each stage, `[k][group]`.
pub fn group_margins(problem: &DcocProblem, traj: &Trajectory) -> Vec<Vec<f64>> {
    traj.stage_margins
        .iter()
        .zip(problem.constraints())
        .map(|(m, c)| {
            groups(c)
                .iter()
                .map(|g| {
                    c.labels()
                        .iter()
                        .zip(m.iter())
                        .filter(|(l, _)| *l == g)
                        .map(|(_, v)| *v)
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupViolation {
    pub group: String,
    /// First step with margin below `-tol`, if any.
    pub first_step: Option<usize>,
    pub first_time: Option<f64>,
}

pub fn first_violations(problem: &DcocProblem, traj: &Trajectory, dt: f64) -> Vec<GroupViolation> {
    let names = groups(&problem.constraints()[0]);
    let margins = group_margins(problem, traj);
    names
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let first = (1..margins.len()).find(|&k| margins[k][g] < -DEFAULT_FEAS_TOL);
            GroupViolation {
                group: name.clone(),
                first_step: first,
                first_time: first.map(|k| k as f64 * dt),
            }
        })
        .collect()
}

/// Run of consecutive stages with one row held at its bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hold {
    pub row: String,
    pub start_step: usize,
    pub end_step: usize,
    pub start_time: f64,
    pub end_time: f64,
}

/// Plateaus: at least [`HOLD_MIN_STEPS`] consecutive stages `k >= 1` with
/// `0 <= margin <= HOLD_REL * |h|` on the same row.
pub fn holds(problem: &DcocProblem, traj: &Trajectory, dt: f64) -> Vec<Hold> {
    let c0 = &problem.constraints()[0];
    let names = row_names(c0);
    let mut out = Vec::new();
    for (r, name) in names.iter().enumerate() {
        let mut start: Option<usize> = None;
        let n = traj.stage_margins.len();
        for k in 1..=n {
            let held = k < n && {
                let c = &problem.constraints()[k];
                let m = traj.stage_margins[k][r];
                m >= -DEFAULT_FEAS_TOL && m <= HOLD_REL * c.bound()[r].abs()
            };
            match (held, start) {
                (true, None) => start = Some(k),
                (false, Some(s)) => {
                    if k - s >= HOLD_MIN_STEPS {
                        out.push(Hold {
                            row: name.clone(),
                            start_step: s,
                            end_step: k - 1,
                            start_time: s as f64 * dt,
                            end_time: (k - 1) as f64 * dt,
                        });
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trajectory table: `t`, states, controls (blank on the last row), `eps`,
/// then `margin_<group>`.
pub fn trajectory_csv(config: &ScenarioConfig, problem: &DcocProblem, traj: &Trajectory, slacks: Option<&[f64]>) -> String {
    let group_names = groups(&problem.constraints()[0]);
    let margins = group_margins(problem, traj);
    let mut header = vec!["t".to_string()];
    header.extend(config.state_names());
    header.extend(config.control_names());
    header.push("eps".into());
    header.extend(group_names.iter().map(|g| format!("margin_{g}")));
    let mut out = header.join(",");
    out.push('\n');
    let nu = problem.control_dim();
    for (k, x) in traj.states.iter().enumerate() {
        let mut row = vec![fmt17(k as f64 * config.dt)];
        row.extend(x.iter().map(|v| fmt17(*v)));
        match traj.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| fmt17(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), nu)),
        }
        row.push(slacks.map_or(String::new(), |s| fmt17(s[k])));
        row.extend(margins[k].iter().map(|v| fmt17(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parsed trajectory table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    /// `None` for blank cells.
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| config_err("empty table"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<Option<f64>> = line
                .split(',')
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|e| config_err(format!("row {}: {e}", i + 1)))
                    }
                })
                .collect::<Result<_>>()?;
            if cells.len() != header.len() {
                return Err(config_err(format!("row {} has {} cells, header {}", i + 1, cells.len(), header.len())));
            }
            rows.push(cells);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Controls in the columns named `names`, from rows that have them.
    pub fn controls(&self, names: &[String]) -> Result<Vec<Vector>> {
        let cols: Vec<usize> = names
            .iter()
            .map(|n| self.column(n).ok_or_else(|| config_err(format!("missing column {n}"))))
            .collect::<Result<_>>()?;
        Ok(self
            .rows
            .iter()
            .filter(|r| cols.iter().all(|&c| r[c].is_some()))
            .map(|r| Vector::from_iterator(cols.len(), cols.iter().map(|&c| r[c].expect("checked"))))
            .collect())
    }
}

fn figure(config: &ScenarioConfig, problem: &DcocProblem, traj: &Trajectory) -> String {
    let t = |k: usize| k as f64 * config.dt;
    let names = config.state_names();
    let controls: Vec<Series> = config
        .control_names()
        .iter()
        .enumerate()
        .map(|(i, n)| Series {
            name: n.clone(),
            points: traj.controls.iter().enumerate().map(|(k, u)| (t(k), u[i])).collect(),
        })
        .collect();
    let state_series = |range: std::ops::Range<usize>| -> Vec<Series> {
        range
            .map(|i| Series {
                name: names[i].clone(),
                points: traj.states.iter().enumerate().map(|(k, x)| (t(k), x[i])).collect(),
            })
            .collect()
    };
    let bounds_of = |index: usize| -> (Option<f64>, Option<f64>) {
        let c = &problem.constraints()[0];
        let (mut lo, mut hi) = (None, None);
        if let Some(g) = c.map().as_linear() {
            for r in 0..c.rows() {
                let row = g.row(r);
                let nz: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
                if nz == [index] {
                    let v = c.bound()[r] / row[index];
                    if row[index] > 0.0 {
                        hi = Some(v);
                    } else {
                        lo = Some(v);
                    }
                }
            }
        }
        (lo, hi)
    };
    let guides = |indices: std::ops::Range<usize>| -> Vec<f64> {
        let mut g: Vec<f64> = indices
            .flat_map(|i| {
                let (lo, hi) = bounds_of(i);
                [lo, hi]
            })
            .flatten()
            .collect();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    };
    let lines = |title: &str, series: Vec<Series>, guides: Vec<f64>| Panel::Lines {
        title: title.into(),
        x_label: "t [s]".into(),
        series,
        guides,
    };
    let panels = match &config.system {
        SystemConfig::Attitude3rw(s) | SystemConfig::Attitude2rw(s) => {
            let wheels = s.params.wheel_count();
            let e = s.limits.euler;
            vec![
                lines("wheel accelerations u [rad/s^2]", controls, vec![]),
                lines("wheel speeds [rad/s]", state_series(6..6 + wheels), guides(6..6 + wheels)),
                lines("Euler angles [rad]", state_series(0..3), guides(0..3)),
                Panel::Box3d {
                    title: "Euler angles against the constraint box".into(),
                    labels: ["phi".into(), "theta".into(), "psi".into()],
                    lo: [e[0][0], e[1][0], e[2][0]],
                    hi: [e[0][1], e[1][1], e[2][1]],
                    path: traj.states.iter().map(|x| [x[0], x[1], x[2]]).collect(),
                },
            ]
        }
        _ => {
            let n = problem.state_dim();
            vec![lines("controls", controls, vec![]), lines("states", state_series(0..n), guides(0..n))]
        }
    };
    plot::render(&panels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub kappa: usize,
    pub horizon: usize,
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    pub theta: f64,
    pub big_m: f64,
    pub chosen_start: usize,
    pub starts: Vec<StartSummary>,
    pub first_violations: Vec<GroupViolation>,
    pub holds: Vec<Hold>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_check: Option<ThetaDiagnostic>,
    /// Relative to the output directory.
    pub files: Vec<String>,
}

impl RunRecord {
    pub fn solved(&self) -> bool {
        self.status == SolverStatus::Optimal
    }

    pub fn violation_time(&self, group: &str) -> Option<f64> {
        self.first_violations
            .iter()
            .find(|v| v.group == group)
            .and_then(|v| v.first_time)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    files.push(name.to_string());
    Ok(())
}

/// Solve, extract, simulate and write `trajectory.csv`, `figure.svg` and
/// `record.json` into `out`. With `cross_check`, also runs the sweep oracle
/// and the `theta^2` diagnostic.
pub fn run_scenario(config: &ScenarioConfig, out: &Path, cross_check: bool) -> Result<RunRecord> {
    let problem = config.problem()?;
    let opts = config.pipeline_options();
    let result = pipeline::solve_dcoc(&problem, &opts)?;
    let traj = &result.extract.trajectory;
    let theta_check = if cross_check {
        let report = oracle::kappa_star_sweep(&problem, &config.sweep_options())?;
        Some(pipeline::theta_diagnostic(&problem, &opts, &result, report.kappa_star)?)
    } else {
        None
    };
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    write_file(out, "trajectory.csv", &trajectory_csv(config, &problem, traj, Some(&result.extract.slacks)), &mut files)?;
    write_file(out, "figure.svg", &figure(config, &problem, traj), &mut files)?;
    files.push("record.json".into());
    let record = RunRecord {
        name: config.name.clone(),
        config_hash: config.hash(),
        kappa: result.extract.kappa,
        horizon: problem.horizon(),
        objective: result.solution.objective,
        status: result.solution.status,
        iterations: result.solution.iterations,
        kkt_residual: result.solution.kkt_residual,
        primal_infeasibility: result.solution.primal_infeasibility,
        theta: result.theta(),
        big_m: result.big_m(),
        chosen_start: result.chosen,
        starts: result.starts.clone(),
        first_violations: first_violations(&problem, traj, config.dt),
        holds: holds(&problem, traj, config.dt),
        theta_check,
        files,
    };
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    fs::write(out.join("record.json"), json)?;
    Ok(record)
}

/// Oracle run writing `oracle.json` and `verdicts.csv`.
pub fn run_oracle(config: &ScenarioConfig, method: OracleMethod, out: &Path) -> Result<OracleReport> {
    let problem = config.problem()?;
    let report = match method {
        OracleMethod::Sweep => oracle::kappa_star_sweep(&problem, &config.sweep_options())?,
        OracleMethod::GridDp => oracle::kappa_star_grid_dp(&problem, &grid_for(config, &problem)?)?,
    };
    fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out.join("oracle.json"), json)?;
    let mut csv = String::from("m,feasible,solved,margin\n");
    for v in &report.verdicts {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            v.m,
            v.feasible,
            v.solved,
            v.margin.map_or(String::new(), fmt17)
        );
    }
    fs::write(out.join("verdicts.csv"), csv)?;
    Ok(report)
}

/// Uniform grid over the stage box (padded by 10%) and a lattice of
/// admissible controls.
pub fn grid_for(config: &ScenarioConfig, problem: &DcocProblem) -> Result<GridSpec> {
    let c = &problem.constraints()[0];
    let g = c
        .map()
        .as_linear()
        .ok_or_else(|| config_err("grid DP needs box-shaped stage constraints"))?;
    let n = problem.state_dim();
    let mut ranges = Vec::with_capacity(n);
    for i in 0..n {
        let (mut lo, mut hi) = (None::<f64>, None::<f64>);
        for r in 0..c.rows() {
            let row = g.row(r);
            if (0..n).all(|j| j == i || row[j] == 0.0) && row[i] != 0.0 {
                let v = c.bound()[r] / row[i];
                if row[i] > 0.0 {
                    hi = Some(hi.map_or(v, |h| h.min(v)));
                } else {
                    lo = Some(lo.map_or(v, |l| l.max(v)));
                }
            }
        }
        let (Some(lo), Some(hi)) = (lo, hi) else {
            return Err(config_err(format!("state {i} has no finite box for the grid")));
        };
        let pad = 0.1 * (hi - lo);
        ranges.push((lo - pad, hi + pad));
    }
    let set = problem.control_set();
    let nominal = set.nominal();
    let levels = config.oracle.control_levels.max(1);
    let axes: Vec<Vec<f64>> = (0..problem.control_dim())
        .map(|i| {
            let cap = set.one_norm_cap().map(|c| c.cap);
            let lo = set.lower()[i].or(cap.map(|c| -c)).unwrap_or(nominal[i]);
            let hi = set.upper()[i].or(cap).unwrap_or(nominal[i]);
            if levels == 1 {
                vec![nominal[i]]
            } else {
                (0..levels).map(|j| lo + (hi - lo) * j as f64 / (levels - 1) as f64).collect()
            }
        })
        .collect();
    let mut controls = vec![Vector::zeros(problem.control_dim())];
    for (i, axis) in axes.iter().enumerate() {
        controls = controls
            .iter()
            .flat_map(|u| {
                axis.iter().map(move |&v| {
                    let mut w = u.clone();
                    w[i] = v;
                    w
                })
            })
            .collect();
    }
    controls.retain(|u| set.contains(u, 1e-12));
    let mut grid = GridSpec::uniform(&ranges, config.oracle.grid_points, controls);
    grid.max_work = config.oracle.max_work;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRecord {
    pub name: String,
    pub kappa: usize,
    pub first_violations: Vec<GroupViolation>,
    pub files: Vec<String>,
}

/// Simulates `controls` (nominal controls when `None`) and writes
/// `simulation.csv`.
pub fn run_simulation(config: &ScenarioConfig, controls: Option<Vec<Vector>>, out: &Path) -> Result<SimulationRecord> {
    let problem = config.problem()?;
    let controls = controls.unwrap_or_else(|| vec![problem.control_set().nominal(); problem.horizon()]);
    let traj = problem::simulate(&problem, &controls)?;
    let kappa = problem::time_before_exit(&traj, problem.constraints(), DEFAULT_FEAS_TOL)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    write_file(out, "simulation.csv", &trajectory_csv(config, &problem, &traj, None), &mut files)?;
    Ok(SimulationRecord {
        name: config.name.clone(),
        kappa,
        first_violations: first_violations(&problem, &traj, config.dt),
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }
}

pub const GRADIENT_TOL: f64 = 1e-5;
pub const MOMENTUM_TOL: f64 = 1e-12;
pub const WITNESS_TOL: f64 = 1e-9;

/// Random control sequences in `U`: 10 per call site, seeded.
pub fn random_controls(problem: &DcocProblem, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    (0..problem.horizon()).map(|_| problem.control_set().sample(rng)).collect()
}

/// Worst violation of the NLP constraints at the witness point built from
/// `controls`.
pub fn witness_violation(nlp: &transcription::NlpInstance, controls: &[Vector]) -> Result<f64> {
    let z = nlp.feasible_point(controls)?;
    let v = nlp.values(&z)?;
    Ok(v
        .ineq
        .iter()
        .map(|c| (-c).max(0.0))
        .chain(v.eq.iter().map(|e| e.abs()))
        .fold(0.0, f64::max))
}

/// Derivative, momentum, witness and time-before-exit consistency checks.
pub fn check(config: &ScenarioConfig, momentum_states: usize) -> Result<CheckReport> {
    let problem = config.problem()?;
    let big_m = config.big_m.unwrap_or_else(|| transcription::default_big_m(&problem));
    let nlp = transcription::build_nlp(&problem, config.theta, big_m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut items = Vec::new();
    let mut item = |name: &str, value: f64, threshold: f64| {
        items.push(CheckItem {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        })
    };

    let mut grad = transcription::nlp_gradients_check(&nlp, &nlp.initial_point())?;
    for _ in 0..2 {
        let z = nlp.random_point(&mut rng);
        grad = grad.max(transcription::nlp_gradients_check(&nlp, &z)?);
    }
    item("gradient", grad, GRADIENT_TOL);

    if let Some(model) = config.attitude_model()? {
        let wheels = model.wheel_count();
        let mut worst: f64 = 0.0;
        for _ in 0..momentum_states {
            let x = Vector::from_fn(6 + wheels, |i, _| match i {
                0..=2 => rng.gen_range(-0.5..0.5),
                3..=5 => rng.gen_range(-1e-2..1e-2),
                _ => rng.gen_range(-100.0..100.0),
            });
            let u = problem.control_set().sample(&mut rng);
            worst = worst.max(model.momentum_identity_residual(&x, &u)?);
        }
        item("momentum", worst, MOMENTUM_TOL);
    }

    let mut witness: f64 = 0.0;
    let mut mismatches = 0usize;
    let mut sequences = vec![vec![problem.control_set().nominal(); problem.horizon()]];
    sequences.extend((0..10).map(|_| random_controls(&problem, &mut rng)));
    for controls in &sequences {
        witness = witness.max(witness_violation(&nlp, controls)?);
        let traj = problem::simulate(&problem, controls)?;
        let direct = problem::time_before_exit(&traj, problem.constraints(), DEFAULT_FEAS_TOL)?;
        let extracted = nlp.extract(&nlp.feasible_point(controls)?)?.kappa;
        mismatches += usize::from(direct != extracted);
    }
    item("witness", witness, WITNESS_TOL);
    item("kappa-consistency", mismatches as f64, 0.0);

    Ok(CheckReport {
        name: config.name.clone(),
        items,
    })
}

/// Parsed first-violation summary keyed by group, for tests and reports.
pub fn violation_map(v: &[GroupViolation]) -> BTreeMap<String, Option<f64>> {
    v.iter().map(|g| (g.group.clone(), g.first_time)).collect()
}
