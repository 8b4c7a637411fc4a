//! Problem definition: discrete-time dynamics, time-varying stage constraint
//! sets `X(k) = {x : H_k(x) <= h_k}`, the admissible control set, forward
//! simulation and the time-before-exit.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{DcocError, Result};
use crate::fd;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Absolute per-row tolerance used when deciding `x in X(k)`.
pub const DEFAULT_FEAS_TOL: f64 = 1e-8;

/// Discrete-time map `x_{k+1} = f_d(x_k, u_k)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector>;
    /// `(df/dx, df/du)` at `(x, u)`.
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)>;
    /// Exposes the affine structure `x+ = A x + B u + c`, when there is one.
    fn as_affine(&self) -> Option<&AffineDynamics> {
        None
    }
    fn uses_finite_differences(&self) -> bool {
        false
    }
}

/// `x+ = A x + B u + c`.
#[derive(Debug, Clone)]
pub struct AffineDynamics {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
}

impl AffineDynamics {
    pub fn new(a: Matrix, b: Matrix, c: Vector) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.len() != n {
            return Err(DcocError::Layout(format!(
                "affine dynamics: A is {}x{}, B is {}x{}, c has {}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.len()
            )));
        }
        Ok(Self { a, b, c })
    }

    /// Euler-discretized double integrator `p+ = p + v dt`, `v+ = v + u dt`.
    pub fn double_integrator(dt: f64) -> Self {
        Self {
            a: Matrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: Matrix::from_row_slice(2, 1, &[0.0, dt]),
            c: Vector::zeros(2),
        }
    }
}

impl Dynamics for AffineDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(&self.a * x + &self.b * u + &self.c)
    }
    fn jacobians(&self, _x: &Vector, _u: &Vector) -> Result<(Matrix, Matrix)> {
        Ok((self.a.clone(), self.b.clone()))
    }
    fn as_affine(&self) -> Option<&AffineDynamics> {
        Some(self)
    }
}

type StepFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;
type StepJacobianFn = dyn Fn(&Vector, &Vector) -> (Matrix, Matrix) + Send + Sync;

/// Dynamics from closures. Without an analytic Jacobian, central finite
/// differences are used and reported through `uses_finite_differences`.
pub struct FnDynamics {
    state_dim: usize,
    control_dim: usize,
    step: Box<StepFn>,
    jacobian: Option<Box<StepJacobianFn>>,
}

impl FnDynamics {
    pub fn new<F>(state_dim: usize, control_dim: usize, step: F) -> Self
    where
        F: Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    {
        Self {
            state_dim,
            control_dim,
            step: Box::new(step),
            jacobian: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&Vector, &Vector) -> (Matrix, Matrix) + Send + Sync + 'static,
    {
        self.jacobian = Some(Box::new(jacobian));
        self
    }
}

impl fmt::Debug for FnDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDynamics")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl Dynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok((self.step)(x, u))
    }
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        if let Some(jac) = &self.jacobian {
            return Ok(jac(x, u));
        }
        let a = fd::jacobian(|xp| (self.step)(xp, u), x);
        let b = fd::jacobian(|up| (self.step)(x, up), u);
        Ok((a, b))
    }
    fn uses_finite_differences(&self) -> bool {
        self.jacobian.is_none()
    }
}

/// The map `H_k` of one stage constraint.
pub trait ConstraintMap: Send + Sync {
    fn rows(&self) -> usize;
    fn eval(&self, x: &Vector) -> Vector;
    fn jacobian(&self, x: &Vector) -> Matrix;
    /// `Some(G)` when `H(x) = G x`.
    fn as_linear(&self) -> Option<&Matrix> {
        None
    }
    fn uses_finite_differences(&self) -> bool {
        false
    }
}

/// `H(x) = G x`.
#[derive(Debug, Clone)]
pub struct LinearMap(pub Matrix);

impl ConstraintMap for LinearMap {
    fn rows(&self) -> usize {
        self.0.nrows()
    }
    fn eval(&self, x: &Vector) -> Vector {
        &self.0 * x
    }
    fn jacobian(&self, _x: &Vector) -> Matrix {
        self.0.clone()
    }
    fn as_linear(&self) -> Option<&Matrix> {
        Some(&self.0)
    }
}

type MapFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type MapJacobianFn = dyn Fn(&Vector) -> Matrix + Send + Sync;

/// Constraint map from closures, with an optional analytic Jacobian.
pub struct FnMap {
    rows: usize,
    eval: Box<MapFn>,
    jacobian: Option<Box<MapJacobianFn>>,
}

impl FnMap {
    pub fn new<F>(rows: usize, eval: F) -> Self
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        Self {
            rows,
            eval: Box::new(eval),
            jacobian: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&Vector) -> Matrix + Send + Sync + 'static,
    {
        self.jacobian = Some(Box::new(jacobian));
        self
    }
}

impl ConstraintMap for FnMap {
    fn rows(&self) -> usize {
        self.rows
    }
    fn eval(&self, x: &Vector) -> Vector {
        (self.eval)(x)
    }
    fn jacobian(&self, x: &Vector) -> Matrix {
        match &self.jacobian {
            Some(j) => j(x),
            None => fd::jacobian(|p| (self.eval)(p), x),
        }
    }
    fn uses_finite_differences(&self) -> bool {
        self.jacobian.is_none()
    }
}

/// A subset of the rows of another map.
struct RowSelection {
    inner: Arc<dyn ConstraintMap>,
    rows: Vec<usize>,
    linear: Option<Matrix>,
}

impl ConstraintMap for RowSelection {
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn eval(&self, x: &Vector) -> Vector {
        let full = self.inner.eval(x);
        Vector::from_iterator(self.rows.len(), self.rows.iter().map(|&r| full[r]))
    }
    fn jacobian(&self, x: &Vector) -> Matrix {
        self.inner.jacobian(x).select_rows(&self.rows)
    }
    fn as_linear(&self) -> Option<&Matrix> {
        self.linear.as_ref()
    }
    fn uses_finite_differences(&self) -> bool {
        self.inner.uses_finite_differences()
    }
}

/// One stage set `X(k) = {x : H_k(x) <= h_k}` with a label per row.
#[derive(Clone)]
pub struct StageConstraint {
    map: Arc<dyn ConstraintMap>,
    bound: Vector,
    labels: Vec<String>,
}

impl fmt::Debug for StageConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageConstraint")
            .field("bound", &self.bound.as_slice())
            .field("labels", &self.labels)
            .finish()
    }
}

/// Bound on one state component, used to build box-shaped stage sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentBound {
    pub index: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub label: String,
}

impl StageConstraint {
    pub fn new(map: Arc<dyn ConstraintMap>, bound: Vector) -> Result<Self> {
        let labels = (0..bound.len()).map(|i| format!("row{i}")).collect();
        Self::with_labels(map, bound, labels)
    }

    pub fn with_labels(
        map: Arc<dyn ConstraintMap>,
        bound: Vector,
        labels: Vec<String>,
    ) -> Result<Self> {
        if bound.is_empty() {
            return Err(DcocError::Layout(
                "stage constraint needs at least one row".into(),
            ));
        }
        if map.rows() != bound.len() || labels.len() != bound.len() {
            return Err(DcocError::Layout(format!(
                "stage constraint: map has {} rows, bound {}, labels {}",
                map.rows(),
                bound.len(),
                labels.len()
            )));
        }
        Ok(Self { map, bound, labels })
    }

    /// `G x <= h`.
    pub fn linear(g: Matrix, bound: Vector) -> Result<Self> {
        Self::new(Arc::new(LinearMap(g)), bound)
    }

    /// Component-wise bounds `lower <= x_i <= upper`, one row per finite
    /// side. Rows are labelled `"<label>"` and share the label of their
    /// component so violations can be grouped.
    pub fn component_bounds(state_dim: usize, bounds: &[ComponentBound]) -> Result<Self> {
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        let mut labels = Vec::new();
        for b in bounds {
            if b.index >= state_dim {
                return Err(DcocError::Layout(format!(
                    "bound on component {} of a {state_dim}-state",
                    b.index
                )));
            }
            if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
                if lo > hi {
                    return Err(DcocError::Parameter(format!(
                        "bound {}: lower {lo} > upper {hi}",
                        b.label
                    )));
                }
            }
            if let Some(hi) = b.upper {
                rows.push((b.index, 1.0, hi));
                labels.push(b.label.clone());
            }
            if let Some(lo) = b.lower {
                rows.push((b.index, -1.0, -lo));
                labels.push(b.label.clone());
            }
        }
        let mut g = Matrix::zeros(rows.len(), state_dim);
        let mut h = Vector::zeros(rows.len());
        for (r, &(i, sign, value)) in rows.iter().enumerate() {
            g[(r, i)] = sign;
            h[r] = value;
        }
        Self::with_labels(Arc::new(LinearMap(g)), h, labels)
    }

    /// Stage constraint keeping only the listed rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.bound.len()) {
            return Err(DcocError::Layout(format!("row {bad} out of range")));
        }
        let linear = self.map.as_linear().map(|g| g.select_rows(rows));
        let map = RowSelection {
            inner: self.map.clone(),
            rows: rows.to_vec(),
            linear,
        };
        let bound = Vector::from_iterator(rows.len(), rows.iter().map(|&r| self.bound[r]));
        let labels = rows.iter().map(|&r| self.labels[r].clone()).collect();
        Self::with_labels(Arc::new(map), bound, labels)
    }

    /// Concatenates the rows of two stage constraints on the same state.
    pub fn stack(&self, other: &StageConstraint) -> Result<Self> {
        let a = self.clone();
        let b = other.clone();
        let rows = a.rows() + b.rows();
        let linear = match (a.map.as_linear(), b.map.as_linear()) {
            (Some(ga), Some(gb)) if ga.ncols() == gb.ncols() => {
                let mut g = Matrix::zeros(rows, ga.ncols());
                g.rows_mut(0, ga.nrows()).copy_from(ga);
                g.rows_mut(ga.nrows(), gb.nrows()).copy_from(gb);
                Some(g)
            }
            _ => None,
        };
        let bound = Vector::from_iterator(rows, a.bound.iter().chain(b.bound.iter()).copied());
        let labels = a.labels.iter().chain(b.labels.iter()).cloned().collect();
        if let Some(g) = linear {
            return Self::with_labels(Arc::new(LinearMap(g)), bound, labels);
        }
        let (ma, mb) = (a.map.clone(), b.map.clone());
        let (ja, jb) = (a.map.clone(), b.map.clone());
        let fd_used = a.map.uses_finite_differences() || b.map.uses_finite_differences();
        let eval = move |x: &Vector| {
            let (va, vb) = (ma.eval(x), mb.eval(x));
            Vector::from_iterator(va.len() + vb.len(), va.iter().chain(vb.iter()).copied())
        };
        let jac = move |x: &Vector| {
            let (ga, gb) = (ja.jacobian(x), jb.jacobian(x));
            let mut g = Matrix::zeros(ga.nrows() + gb.nrows(), ga.ncols());
            g.rows_mut(0, ga.nrows()).copy_from(&ga);
            g.rows_mut(ga.nrows(), gb.nrows()).copy_from(&gb);
            g
        };
        let map = FnMap::new(rows, eval);
        // keep the finite-difference flag of the parts
        let map: Arc<dyn ConstraintMap> = if fd_used {
            Arc::new(map)
        } else {
            Arc::new(map.with_jacobian(jac))
        };
        Self::with_labels(map, bound, labels)
    }

    pub fn rows(&self) -> usize {
        self.bound.len()
    }

    pub fn bound(&self) -> &Vector {
        &self.bound
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn map(&self) -> &Arc<dyn ConstraintMap> {
        &self.map
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        self.map.eval(x)
    }

    pub fn jacobian(&self, x: &Vector) -> Matrix {
        self.map.jacobian(x)
    }

    /// `h - H(x)`.
    pub fn margin(&self, x: &Vector) -> Vector {
        &self.bound - self.map.eval(x)
    }

    /// Worst relative error of the analytic Jacobian against central
    /// differences at `x`.
    pub fn derivative_error(&self, x: &Vector) -> f64 {
        let analytic = self.map.jacobian(x);
        let numeric = fd::jacobian(|p| self.map.eval(p), x);
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| fd::relative_error(a, n))
            .fold(0.0, f64::max)
    }
}

/// Outcome of a membership test.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    /// `h - H(x)`, one entry per row.
    pub margin: Vector,
    pub inside: bool,
}

/// Tests `H(x) <= h + tol` row-wise.
pub fn check_membership(x: &Vector, constraint: &StageConstraint, tol_feas: f64) -> Membership {
    let margin = constraint.margin(x);
    let inside = margin.iter().all(|&m| m >= -tol_feas);
    Membership { margin, inside }
}

/// `sum_{i in components} |u_i| <= cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneNormCap {
    pub components: Vec<usize>,
    pub cap: f64,
}

/// Compact convex admissible control set: optional box bounds per component
/// plus an optional 1-norm cap on a subset of components.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
    one_norm_cap: Option<OneNormCap>,
}

impl ControlSet {
    pub fn new(
        lower: Vec<Option<f64>>,
        upper: Vec<Option<f64>>,
        one_norm_cap: Option<OneNormCap>,
    ) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(DcocError::Layout(
                "control set: lower/upper lengths differ".into(),
            ));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if let (Some(lo), Some(hi)) = (lo, hi) {
                if lo > hi {
                    return Err(DcocError::Parameter(format!(
                        "control {i}: lower {lo} > upper {hi}"
                    )));
                }
            }
        }
        if let Some(c) = &one_norm_cap {
            if !(c.cap > 0.0) {
                return Err(DcocError::Parameter(format!(
                    "1-norm cap must be positive, got {}",
                    c.cap
                )));
            }
            if c.components.iter().any(|&i| i >= lower.len()) {
                return Err(DcocError::Layout(
                    "1-norm cap selects a missing component".into(),
                ));
            }
        }
        let set = Self {
            lower,
            upper,
            one_norm_cap,
        };
        for i in 0..set.dim() {
            let boxed = set.lower[i].is_some() && set.upper[i].is_some();
            let capped = set
                .one_norm_cap
                .as_ref()
                .is_some_and(|c| c.components.contains(&i));
            if !boxed && !capped {
                return Err(DcocError::Parameter(format!(
                    "control {i} is unbounded; U must be compact"
                )));
            }
        }
        if !set.contains(&set.nominal(), 0.0) {
            return Err(DcocError::Parameter("control set is empty".into()));
        }
        Ok(set)
    }

    /// `lower <= u <= upper` componentwise.
    pub fn boxed(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(
            lower.iter().map(|&v| Some(v)).collect(),
            upper.iter().map(|&v| Some(v)).collect(),
            None,
        )
    }

    /// `||u||_1 <= cap` over all components.
    pub fn one_norm_ball(dim: usize, cap: f64) -> Result<Self> {
        Self::new(
            vec![None; dim],
            vec![None; dim],
            Some(OneNormCap {
                components: (0..dim).collect(),
                cap,
            }),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[Option<f64>] {
        &self.lower
    }

    pub fn upper(&self) -> &[Option<f64>] {
        &self.upper
    }

    pub fn one_norm_cap(&self) -> Option<&OneNormCap> {
        self.one_norm_cap.as_ref()
    }

    /// Zero clamped into the box: the point of U closest to the origin
    /// componentwise.
    pub fn nominal(&self) -> Vector {
        Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                let mut v = 0.0f64;
                if let Some(lo) = self.lower[i] {
                    v = v.max(lo);
                }
                if let Some(hi) = self.upper[i] {
                    v = v.min(hi);
                }
                v
            }),
        )
    }

    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        for i in 0..self.dim() {
            if self.lower[i].is_some_and(|lo| u[i] < lo - tol)
                || self.upper[i].is_some_and(|hi| u[i] > hi + tol)
            {
                return false;
            }
        }
        match &self.one_norm_cap {
            Some(c) => c.components.iter().map(|&i| u[i].abs()).sum::<f64>() <= c.cap + tol,
            None => true,
        }
    }

    /// Random point of U: uniform in the box, then pulled towards the
    /// nominal point until the 1-norm cap holds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let nominal = self.nominal();
        let cap_sel = self.one_norm_cap.as_ref();
        let mut u = Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                let scale = cap_sel.map_or(1.0, |c| c.cap);
                let lo = self.lower[i].unwrap_or(-scale);
                let hi = self.upper[i].unwrap_or(scale);
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            }),
        );
        if let Some(c) = cap_sel {
            let norm = |v: &Vector| c.components.iter().map(|&i| v[i].abs()).sum::<f64>();
            let base = norm(&nominal);
            let cur = norm(&u);
            if cur > c.cap {
                // the segment from nominal to u stays in the box; the 1-norm is
                // convex along it so the scaled point satisfies the cap
                let t = ((c.cap - base) / (cur - base).max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
                u = &nominal + (u - &nominal) * t;
            }
        }
        u
    }
}

/// A drift counteraction problem over a finite horizon.
#[derive(Clone)]
pub struct DcocProblem {
    dynamics: Arc<dyn Dynamics>,
    constraints: Vec<StageConstraint>,
    control_set: ControlSet,
    x0: Vector,
}

impl fmt::Debug for DcocProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DcocProblem")
            .field("state_dim", &self.state_dim())
            .field("control_dim", &self.control_dim())
            .field("horizon", &self.horizon())
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl DcocProblem {
    /// `constraints` holds `X(0), ..., X(N)`.
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        constraints: Vec<StageConstraint>,
        control_set: ControlSet,
        x0: Vector,
    ) -> Result<Self> {
        if constraints.len() < 2 {
            return Err(DcocError::Parameter(format!(
                "need N + 1 >= 2 stage constraints, got {}",
                constraints.len()
            )));
        }
        let nx = dynamics.state_dim();
        if x0.len() != nx {
            return Err(DcocError::Layout(format!(
                "x0 has {} entries, state dimension is {nx}",
                x0.len()
            )));
        }
        if control_set.dim() != dynamics.control_dim() {
            return Err(DcocError::Layout(format!(
                "control set has {} components, dynamics expects {}",
                control_set.dim(),
                dynamics.control_dim()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(DcocError::Parameter("x0 is not finite".into()));
        }
        for (k, c) in constraints.iter().enumerate() {
            if c.jacobian(&x0).ncols() != nx {
                return Err(DcocError::Layout(format!(
                    "stage {k}: Jacobian width differs from state dimension"
                )));
            }
        }
        let m0 = check_membership(&x0, &constraints[0], DEFAULT_FEAS_TOL);
        if !m0.inside {
            return Err(DcocError::InvalidInitialState {
                worst_margin: m0.margin.min(),
            });
        }
        Ok(Self {
            dynamics,
            constraints,
            control_set,
            x0,
        })
    }

    /// Same constraint set at every stage.
    pub fn stationary(
        dynamics: Arc<dyn Dynamics>,
        constraint: StageConstraint,
        horizon: usize,
        control_set: ControlSet,
        x0: Vector,
    ) -> Result<Self> {
        Self::new(dynamics, vec![constraint; horizon + 1], control_set, x0)
    }

    pub fn horizon(&self) -> usize {
        self.constraints.len() - 1
    }
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }
    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }
    pub fn constraints(&self) -> &[StageConstraint] {
        &self.constraints
    }
    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }
    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    /// Copy of the problem truncated to the first `horizon` steps.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 || horizon > self.horizon() {
            return Err(DcocError::Parameter(format!(
                "truncation to {horizon} of a {}-step problem",
                self.horizon()
            )));
        }
        Ok(Self {
            constraints: self.constraints[..=horizon].to_vec(),
            ..self.clone()
        })
    }

    /// Whether dynamics and all stage maps are affine.
    pub fn is_affine(&self) -> bool {
        self.dynamics.as_affine().is_some()
            && self
                .constraints
                .iter()
                .all(|c| c.map().as_linear().is_some())
    }

    /// Whether any derivative comes from finite differences.
    pub fn uses_finite_differences(&self) -> bool {
        self.dynamics.uses_finite_differences()
            || self
                .constraints
                .iter()
                .any(|c| c.map().uses_finite_differences())
    }
}

/// States, controls and stage margins over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    /// `h_k - H_k(x_k)` for `k = 0..=N`.
    pub stage_margins: Vec<Vector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Rolls the dynamics forward from `x0`.
pub fn rollout(dynamics: &dyn Dynamics, x0: &Vector, controls: &[Vector]) -> Result<Vec<Vector>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = dynamics.step(&states[k], u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DcocError::SimulationDiverged { step: k + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// Applies `x_{k+1} = f_d(x_k, u_k)` from the problem's initial state.
pub fn simulate(problem: &DcocProblem, controls: &[Vector]) -> Result<Trajectory> {
    if controls.len() != problem.horizon() {
        return Err(DcocError::Layout(format!(
            "expected {} controls, got {}",
            problem.horizon(),
            controls.len()
        )));
    }
    for (k, u) in controls.iter().enumerate() {
        if u.len() != problem.control_dim() {
            return Err(DcocError::Layout(format!(
                "control {k} has {} entries",
                u.len()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(DcocError::Parameter(format!("control {k} is not finite")));
        }
    }
    let states = rollout(problem.dynamics().as_ref(), problem.x0(), controls)?;
    let stage_margins = states
        .iter()
        .zip(problem.constraints())
        .map(|(x, c)| c.margin(x))
        .collect();
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        stage_margins,
    })
}

/// Largest `k in [1, N]` with `x_i in X(i)` for every `i <= k`, or 0 when
/// already `x_1` leaves `X(1)`.
pub fn time_before_exit(
    traj: &Trajectory,
    constraints: &[StageConstraint],
    tol_feas: f64,
) -> Result<usize> {
    if traj.states.len() != constraints.len() {
        return Err(DcocError::Layout(format!(
            "trajectory has {} states but {} stage constraints",
            traj.states.len(),
            constraints.len()
        )));
    }
    let first = check_membership(&traj.states[0], &constraints[0], tol_feas);
    if !first.inside {
        return Err(DcocError::InvalidInitialState {
            worst_margin: first.margin.min(),
        });
    }
    let exit = traj
        .states
        .iter()
        .zip(constraints)
        .skip(1)
        .position(|(x, c)| !check_membership(x, c, tol_feas).inside);
    Ok(exit.unwrap_or(constraints.len() - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_upper(bound: f64) -> StageConstraint {
        StageConstraint::linear(
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, bound),
        )
        .unwrap()
    }

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    #[test]
    fn identity_dynamics_keep_initial_state() {
        let dynamics = Arc::new(FnDynamics::new(2, 1, |x: &Vector, _u: &Vector| x.clone()));
        let c = StageConstraint::linear(Matrix::identity(2, 2), v(&[10.0, 10.0])).unwrap();
        let problem = DcocProblem::stationary(
            dynamics,
            c,
            4,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[0.3, -2.0]),
        )
        .unwrap();
        let controls = vec![v(&[0.5]), v(&[-1.0]), v(&[0.0]), v(&[0.25])];
        let traj = simulate(&problem, &controls).unwrap();
        assert!(traj.states.iter().all(|x| x == problem.x0()));
    }

    #[test]
    fn double_integrator_two_steps() {
        let dynamics = Arc::new(AffineDynamics::double_integrator(1.0));
        let c = StageConstraint::linear(Matrix::identity(2, 2), v(&[10.0, 10.0])).unwrap();
        let problem = DcocProblem::stationary(
            dynamics,
            c,
            2,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[0.0, 0.0]),
        )
        .unwrap();
        let traj = simulate(&problem, &[v(&[1.0]), v(&[1.0])]).unwrap();
        assert_eq!(traj.states[1], v(&[0.0, 1.0]));
        assert_eq!(traj.states[2], v(&[1.0, 2.0]));
        assert_eq!(traj.stage_margins.len(), 3);
        assert_eq!(traj.stage_margins[2], v(&[9.0, 8.0]));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let dynamics = Arc::new(FnDynamics::new(1, 1, |x: &Vector, _u: &Vector| {
            if x[0] > 2.5 {
                v(&[f64::NAN])
            } else {
                x.add_scalar(1.0)
            }
        }));
        let problem = DcocProblem::stationary(
            dynamics,
            scalar_upper(100.0),
            5,
            ControlSet::boxed(&[0.0], &[0.0]).unwrap(),
            v(&[0.0]),
        )
        .unwrap();
        let err = simulate(&problem, &vec![v(&[0.0]); 5]).unwrap_err();
        assert!(matches!(err, DcocError::SimulationDiverged { step: 4 }));
    }

    #[test]
    fn wrong_control_count_is_rejected() {
        let dynamics = Arc::new(AffineDynamics::double_integrator(1.0));
        let c = StageConstraint::linear(Matrix::identity(2, 2), v(&[1.0, 1.0])).unwrap();
        let problem = DcocProblem::stationary(
            dynamics,
            c,
            3,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[0.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(
            simulate(&problem, &[v(&[0.0])]),
            Err(DcocError::Layout(_))
        ));
    }

    fn scalar_traj(values: &[f64]) -> Trajectory {
        Trajectory {
            states: values.iter().map(|&x| v(&[x])).collect(),
            controls: vec![v(&[0.0]); values.len() - 1],
            stage_margins: Vec::new(),
        }
    }

    #[test]
    fn kappa_all_feasible_is_horizon() {
        let traj = scalar_traj(&[0.0, 0.1, 0.2, 0.3]);
        assert_eq!(
            time_before_exit(&traj, &vec![scalar_upper(1.0); 4], DEFAULT_FEAS_TOL).unwrap(),
            3
        );
    }

    #[test]
    fn kappa_first_step_exit_is_zero() {
        let traj = scalar_traj(&[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(
            time_before_exit(&traj, &vec![scalar_upper(1.0); 4], DEFAULT_FEAS_TOL).unwrap(),
            0
        );
    }

    #[test]
    fn kappa_ignores_reentry() {
        let traj = scalar_traj(&[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        assert_eq!(
            time_before_exit(&traj, &vec![scalar_upper(1.0); 7], DEFAULT_FEAS_TOL).unwrap(),
            3
        );
    }

    #[test]
    fn kappa_rejects_infeasible_start() {
        let traj = scalar_traj(&[3.0, 0.0]);
        let err =
            time_before_exit(&traj, &vec![scalar_upper(1.0); 2], DEFAULT_FEAS_TOL).unwrap_err();
        assert!(matches!(err, DcocError::InvalidInitialState { .. }));
    }

    #[test]
    fn membership_examples() {
        let c = scalar_upper(1.0);
        let m = check_membership(&v(&[0.5]), &c, DEFAULT_FEAS_TOL);
        assert_eq!(m.margin[0], 0.5);
        assert!(m.inside);
        assert!(check_membership(&v(&[1.0 + 1e-12]), &c, 1e-9).inside);
        let m = check_membership(&v(&[2.0]), &c, DEFAULT_FEAS_TOL);
        assert_eq!(m.margin[0], -1.0);
        assert!(!m.inside);
    }

    #[test]
    fn component_bounds_rows_and_labels() {
        let c = StageConstraint::component_bounds(
            3,
            &[
                ComponentBound {
                    index: 0,
                    lower: Some(-1.0),
                    upper: Some(2.0),
                    label: "a".into(),
                },
                ComponentBound {
                    index: 2,
                    lower: None,
                    upper: Some(5.0),
                    label: "c".into(),
                },
            ],
        )
        .unwrap();
        assert_eq!(c.rows(), 3);
        assert_eq!(c.labels(), &["a", "a", "c"]);
        assert_eq!(c.margin(&v(&[0.0, 100.0, 1.0])), v(&[2.0, 1.0, 4.0]));
    }

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::boxed(&[1.0], &[0.0]).is_err());
        assert!(ControlSet::one_norm_ball(2, 0.0).is_err());
        assert!(ControlSet::new(vec![None], vec![Some(1.0)], None).is_err());
        let u = ControlSet::one_norm_ball(3, 2.0).unwrap();
        assert!(u.contains(&v(&[1.0, -0.5, 0.5]), 0.0));
        assert!(!u.contains(&v(&[1.0, -0.5, 0.6]), 1e-12));
    }

    #[test]
    fn initial_state_outside_is_rejected() {
        let dynamics = Arc::new(AffineDynamics::double_integrator(1.0));
        let c = StageConstraint::linear(Matrix::identity(2, 2), v(&[1.0, 1.0])).unwrap();
        let err = DcocProblem::stationary(
            dynamics,
            c,
            3,
            ControlSet::boxed(&[-1.0], &[1.0]).unwrap(),
            v(&[2.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, DcocError::InvalidInitialState { .. }));
    }

    /// Definition of the time-before-exit applied literally: the largest k in
    /// [1, N] such that every i <= k is feasible.
    fn kappa_literal(states: &[f64], bounds: &[f64], tol: f64) -> usize {
        let n = states.len() - 1;
        (1..=n)
            .filter(|&k| (0..=k).all(|i| states[i] <= bounds[i] + tol))
            .max()
            .unwrap_or(0)
    }

    proptest! {
        #[test]
        fn kappa_matches_literal_definition(
            tail in proptest::collection::vec(-2.0f64..2.0, 1..20),
            bound in 0.0f64..1.5,
        ) {
            let mut states = vec![0.0];
            states.extend(tail);
            let bounds = vec![bound; states.len()];
            let traj = scalar_traj(&states);
            let cs = vec![scalar_upper(bound); states.len()];
            prop_assert_eq!(
                time_before_exit(&traj, &cs, DEFAULT_FEAS_TOL).unwrap(),
                kappa_literal(&states, &bounds, DEFAULT_FEAS_TOL)
            );
        }

        #[test]
        fn removing_a_row_never_decreases_kappa(
            tail in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 2), 1..15),
            drop in 0usize..4,
        ) {
            let mut states = vec![v(&[0.0, 0.0])];
            states.extend(tail.iter().map(|s| v(s)));
            let traj = Trajectory {
                controls: vec![v(&[0.0]); states.len() - 1],
                states,
                stage_margins: Vec::new(),
            };
            let full = StageConstraint::linear(
                Matrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
                v(&[1.0, 1.0, 1.0, 1.0]),
            ).unwrap();
            let kept: Vec<usize> = (0..4).filter(|&r| r != drop).collect();
            let weaker = full.select_rows(&kept).unwrap();
            let n = traj.states.len();
            let k_full = time_before_exit(&traj, &vec![full; n], DEFAULT_FEAS_TOL).unwrap();
            let k_weak = time_before_exit(&traj, &vec![weaker; n], DEFAULT_FEAS_TOL).unwrap();
            prop_assert!(k_weak >= k_full);
        }

        #[test]
        fn membership_flag_matches_margin(x in -3.0f64..3.0, h in -3.0f64..3.0, tol in 0.0f64..1e-3) {
            let c = scalar_upper(h);
            let m = check_membership(&v(&[x]), &c, tol);
            prop_assert_eq!(m.inside, m.margin.min() >= -tol);
        }

        #[test]
        fn simulation_is_bit_deterministic(us in proptest::collection::vec(-1.0f64..1.0, 1..10)) {
            let dynamics = Arc::new(FnDynamics::new(2, 1, |x: &Vector, u: &Vector| {
                v(&[x[0] + 0.1 * x[1].sin(), x[1] + 0.1 * (u[0] - x[0].powi(3))])
            }));
            let c = StageConstraint::linear(Matrix::identity(2, 2), v(&[10.0, 10.0])).unwrap();
            let problem = DcocProblem::stationary(
                dynamics, c, us.len(), ControlSet::boxed(&[-1.0], &[1.0]).unwrap(), v(&[0.1, 0.2]),
            ).unwrap();
            let controls: Vec<Vector> = us.iter().map(|&u| v(&[u])).collect();
            let a = simulate(&problem, &controls).unwrap();
            let b = simulate(&problem, &controls).unwrap();
            for (xa, xb) in a.states.iter().zip(&b.states) {
                for (p, q) in xa.iter().zip(xb.iter()) {
                    prop_assert_eq!(p.to_bits(), q.to_bits());
                }
            }
        }

        #[test]
        fn sampled_controls_are_admissible(seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sets = [
                ControlSet::one_norm_ball(3, 2.0).unwrap(),
                ControlSet::boxed(&[-1.0, 0.5], &[1.0, 2.0]).unwrap(),
                ControlSet::new(
                    vec![Some(-1.0), None], vec![Some(1.0), None],
                    Some(OneNormCap { components: vec![0, 1], cap: 1.5 }),
                ).unwrap(),
            ];
            for s in &sets {
                prop_assert!(s.contains(&s.sample(&mut rng), 1e-12));
            }
        }
    }
}
