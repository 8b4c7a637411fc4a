//! Rigid spacecraft with `p` reaction wheels: 3-2-1 Euler-angle kinematics,
//! wheel-coupled rotational dynamics with a solar radiation pressure torque,
//! and the explicit-Euler discretization used for transcription.
//!
//! State layout: `[phi, theta, psi, w1, w2, w3, nu_1 .. nu_p]`; the control is
//! the wheel acceleration vector `nu_dot` (length `p`).

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{DcocError, Result};
use crate::problem::{
    ComponentBound, ConstraintMap, ControlSet, DcocProblem, Dynamics, FnMap, Matrix,
    StageConstraint, Vector,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Kinematics are refused when `|cos(theta)|` drops to this value.
pub const GIMBAL_MARGIN: f64 = 1e-6;

/// Physical parameters of the bus, wheels and radiation environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttitudeParams {
    /// Principal bus inertias `J1, J2, J3` (kg m^2).
    pub inertia: [f64; 3],
    /// Wheel inertia about its spin axis (kg m^2).
    pub wheel_inertia: f64,
    /// Unit spin axes of the wheels, body frame.
    pub wheel_axes: Vec<[f64; 3]>,
    /// Bus dimensions `L_x, L_y, L_z` (m).
    pub dimensions: [f64; 3],
    /// Center of mass minus geometric center (m).
    pub com_offset: [f64; 3],
    /// Solar flux (W/m^2).
    pub solar_flux: f64,
    pub diffuse_coefficient: f64,
    /// Unit vector towards the Sun, inertial frame.
    pub sun_direction: [f64; 3],
    #[serde(default = "default_speed_of_light")]
    pub speed_of_light: f64,
}

fn default_speed_of_light() -> f64 {
    SPEED_OF_LIGHT
}

impl AttitudeParams {
    /// Table of case-study values with the given wheel axes.
    pub fn reference(wheel_axes: Vec<[f64; 3]>) -> Self {
        let s = 1.0 / 3f64.sqrt();
        Self {
            inertia: [430.0, 1210.0, 1300.0],
            wheel_inertia: 0.043,
            wheel_axes,
            dimensions: [2.0, 2.5, 5.0],
            com_offset: [0.0, 0.5, 0.0],
            solar_flux: 1367.0,
            diffuse_coefficient: 0.2,
            sun_direction: [s, s, s],
            speed_of_light: SPEED_OF_LIGHT,
        }
    }

    pub fn wheel_count(&self) -> usize {
        self.wheel_axes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: &[f64; 3]| (Vector3::from(*v).norm() - 1.0).abs() < 1e-9;
        if self.inertia.iter().any(|&j| !(j > 0.0)) || !(self.wheel_inertia > 0.0) {
            return Err(DcocError::Parameter("inertias must be positive".into()));
        }
        if !(2..=3).contains(&self.wheel_count()) {
            return Err(DcocError::Parameter(format!(
                "{} wheels; expected 2 or 3",
                self.wheel_count()
            )));
        }
        if !self.wheel_axes.iter().all(unit) {
            return Err(DcocError::Parameter(
                "wheel axes must be unit vectors".into(),
            ));
        }
        if !unit(&self.sun_direction) {
            return Err(DcocError::Parameter(
                "sun direction must be a unit vector".into(),
            ));
        }
        if self.dimensions.iter().any(|&d| !(d > 0.0))
            || self.solar_flux < 0.0
            || !(self.speed_of_light > 0.0)
        {
            return Err(DcocError::Parameter(
                "bus dimensions, flux and speed of light must be positive".into(),
            ));
        }
        if self.locked_inertia().cholesky().is_none() {
            return Err(DcocError::Parameter(
                "locked inertia is not positive definite".into(),
            ));
        }
        Ok(())
    }

    /// `W`, 3 x p.
    pub fn wheel_matrix(&self) -> Matrix {
        Matrix::from_fn(3, self.wheel_count(), |r, c| self.wheel_axes[c][r])
    }

    /// `J + J_w W W^T`.
    pub fn locked_inertia(&self) -> Matrix3<f64> {
        let mut jbar = Matrix3::from_diagonal(&Vector3::from(self.inertia));
        for g in &self.wheel_axes {
            let g = Vector3::from(*g);
            jbar += self.wheel_inertia * g * g.transpose();
        }
        jbar
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Matrix mapping body rates to 3-2-1 Euler-angle rates.
pub fn euler_kinematics_matrix(phi: f64, theta: f64) -> Result<Matrix3<f64>> {
    let ct = theta.cos();
    if ct.abs() <= GIMBAL_MARGIN {
        return Err(DcocError::GimbalSingularity {
            cos_pitch: ct.abs(),
        });
    }
    let (sp, cp) = phi.sin_cos();
    let st = theta.sin();
    Ok(Matrix3::new(ct, sp * st, cp * st, 0.0, cp * ct, -sp * ct, 0.0, sp, cp) / ct)
}

/// Partial derivatives of the kinematics matrix with respect to roll and pitch.
fn euler_kinematics_partials(phi: f64, theta: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let tt = st / ct;
    let sec2 = 1.0 / (ct * ct);
    let d_phi = Matrix3::new(
        0.0,
        cp * tt,
        -sp * tt,
        0.0,
        -sp,
        -cp,
        0.0,
        cp / ct,
        -sp / ct,
    );
    let d_theta = Matrix3::new(
        0.0,
        sp * sec2,
        cp * sec2,
        0.0,
        0.0,
        0.0,
        0.0,
        sp * tt / ct,
        cp * tt / ct,
    );
    (d_phi, d_theta)
}

fn rot1(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}
fn rot2(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}
fn rot3(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}
fn rot1_d(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, c, 0.0, -c, -s)
}
fn rot2_d(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s)
}
fn rot3_d(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Inertial-to-body direction cosine matrix of the 3-2-1 sequence.
pub fn body_from_inertial(phi: f64, theta: f64, psi: f64) -> Matrix3<f64> {
    rot1(phi) * rot2(theta) * rot3(psi)
}

struct Face {
    normal: Vector3<f64>,
    area: f64,
    center: Vector3<f64>,
}

fn faces(params: &AttitudeParams) -> [Face; 6] {
    let [lx, ly, lz] = params.dimensions;
    let offset = Vector3::from(params.com_offset);
    let face = |axis: usize, sign: f64| {
        let mut normal = Vector3::zeros();
        normal[axis] = sign;
        let area = match axis {
            0 => ly * lz,
            1 => lx * lz,
            _ => lx * ly,
        };
        let center = normal * (params.dimensions[axis] / 2.0) - offset;
        Face {
            normal,
            area,
            center,
        }
    };
    [
        face(0, 1.0),
        face(0, -1.0),
        face(1, 1.0),
        face(1, -1.0),
        face(2, 1.0),
        face(2, -1.0),
    ]
}

/// Torque and its Jacobian with respect to the body-frame sun vector.
fn srp_torque_and_sensitivity(
    sun_body: &Vector3<f64>,
    params: &AttitudeParams,
) -> (Vector3<f64>, Matrix3<f64>) {
    let pressure = params.solar_flux / params.speed_of_light;
    let cd = params.diffuse_coefficient;
    let mut torque = Vector3::zeros();
    let mut d_torque = Matrix3::zeros();
    for f in faces(params) {
        let cos_incidence = f.normal.dot(sun_body);
        if cos_incidence <= 0.0 {
            continue;
        }
        let scale = -pressure * f.area;
        let direction = (1.0 - cd) * sun_body + (2.0 / 3.0) * cd * f.normal;
        let force = scale * cos_incidence * direction;
        let d_force = scale
            * ((1.0 - cd)
                * (cos_incidence * Matrix3::identity() + sun_body * f.normal.transpose())
                + (2.0 / 3.0) * cd * f.normal * f.normal.transpose());
        torque += f.center.cross(&force);
        d_torque += skew(&f.center) * d_force;
    }
    (torque, d_torque)
}

/// Solar radiation pressure torque on the six-face cuboid bus (body frame).
/// Each illuminated face contributes an absorbed part along the Sun line
/// and a diffuse part along its normal.
pub fn srp_torque(phi: f64, theta: f64, psi: f64, params: &AttitudeParams) -> Vector3<f64> {
    let sun = body_from_inertial(phi, theta, psi) * Vector3::from(params.sun_direction);
    srp_torque_and_sensitivity(&sun, params).0
}

/// Torque together with `d tau / d (phi, theta, psi)`.
fn srp_torque_with_jacobian(
    phi: f64,
    theta: f64,
    psi: f64,
    params: &AttitudeParams,
) -> (Vector3<f64>, Matrix3<f64>) {
    let sun_inertial = Vector3::from(params.sun_direction);
    let (r1, r2, r3) = (rot1(phi), rot2(theta), rot3(psi));
    let sun = r1 * r2 * r3 * sun_inertial;
    let (torque, d_torque) = srp_torque_and_sensitivity(&sun, params);
    let d_sun = Matrix3::from_columns(&[
        rot1_d(phi) * r2 * r3 * sun_inertial,
        r1 * rot2_d(theta) * r3 * sun_inertial,
        r1 * r2 * rot3_d(psi) * sun_inertial,
    ]);
    (torque, d_torque * d_sun)
}

/// Continuous-time model with cached locked inertia.
#[derive(Debug, Clone)]
pub struct AttitudeModel {
    params: AttitudeParams,
    wheels: Matrix,
    locked: Matrix3<f64>,
    locked_inv: Matrix3<f64>,
    /// Replaces the SRP torque by zero; used by momentum checks.
    srp_enabled: bool,
}

impl AttitudeModel {
    pub fn new(params: AttitudeParams) -> Result<Self> {
        params.validate()?;
        let locked = params.locked_inertia();
        let locked_inv = locked
            .try_inverse()
            .ok_or_else(|| DcocError::Parameter("singular locked inertia".into()))?;
        let wheels = params.wheel_matrix();
        Ok(Self {
            params,
            wheels,
            locked,
            locked_inv,
            srp_enabled: true,
        })
    }

    pub fn without_srp(mut self) -> Self {
        self.srp_enabled = false;
        self
    }

    pub fn params(&self) -> &AttitudeParams {
        &self.params
    }

    pub fn wheel_count(&self) -> usize {
        self.params.wheel_count()
    }

    pub fn state_dim(&self) -> usize {
        6 + self.wheel_count()
    }

    pub fn locked_inertia(&self) -> &Matrix3<f64> {
        &self.locked
    }

    fn split(&self, x: &Vector) -> Result<(f64, f64, f64, Vector3<f64>, Vector)> {
        if x.len() != self.state_dim() {
            return Err(DcocError::Layout(format!(
                "attitude state has {} entries, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        let omega = Vector3::new(x[3], x[4], x[5]);
        let nu = x.rows(6, self.wheel_count()).into_owned();
        Ok((x[0], x[1], x[2], omega, nu))
    }

    /// `J_w W v` for a wheel-space vector.
    fn wheel_momentum(&self, v: &Vector) -> Vector3<f64> {
        let m = &self.wheels * v * self.params.wheel_inertia;
        Vector3::new(m[0], m[1], m[2])
    }

    pub fn srp(&self, phi: f64, theta: f64, psi: f64) -> Vector3<f64> {
        if self.srp_enabled {
            srp_torque(phi, theta, psi, &self.params)
        } else {
            Vector3::zeros()
        }
    }

    /// Body-frame total angular momentum `J_bar w + J_w W nu`.
    pub fn body_momentum(&self, x: &Vector) -> Result<Vector3<f64>> {
        let (_, _, _, omega, nu) = self.split(x)?;
        Ok(self.locked * omega + self.wheel_momentum(&nu))
    }

    /// Relative mismatch between `d/dt (J_bar w + J_w W nu)` along the model
    /// and `tau_srp - w x h`.
    pub fn momentum_identity_residual(&self, x: &Vector, u: &Vector) -> Result<f64> {
        let xdot = self.continuous_dynamics(x, u)?;
        let (phi, theta, psi, omega, _) = self.split(x)?;
        let omega_dot = Vector3::new(xdot[3], xdot[4], xdot[5]);
        let nu_dot = xdot.rows(6, self.wheel_count()).into_owned();
        let h = self.body_momentum(x)?;
        let h_dot = self.locked * omega_dot + self.wheel_momentum(&nu_dot);
        let rhs = self.srp(phi, theta, psi) - omega.cross(&h);
        let scale = h_dot.amax().max(rhs.amax()).max(1e-300);
        Ok((h_dot - rhs).amax() / scale)
    }

    /// `x_dot = f(x, u)`.
    pub fn continuous_dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let (phi, theta, psi, omega, nu) = self.split(x)?;
        if u.len() != self.wheel_count() {
            return Err(DcocError::Layout(format!(
                "{} wheel accelerations for {} wheels",
                u.len(),
                self.wheel_count()
            )));
        }
        let angle_rates = euler_kinematics_matrix(phi, theta)? * omega;
        let h = self.locked * omega + self.wheel_momentum(&nu);
        let omega_dot = self.locked_inv
            * (self.srp(phi, theta, psi) - omega.cross(&h) - self.wheel_momentum(u));
        let mut xdot = Vector::zeros(self.state_dim());
        xdot.rows_mut(0, 3).copy_from(&angle_rates);
        xdot.rows_mut(3, 3).copy_from(&omega_dot);
        xdot.rows_mut(6, self.wheel_count()).copy_from(u);
        Ok(xdot)
    }

    /// `(df/dx, df/du)` of the continuous model.
    pub fn continuous_jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        let (phi, theta, psi, omega, nu) = self.split(x)?;
        let p = self.wheel_count();
        if u.len() != p {
            return Err(DcocError::Layout(format!(
                "{} wheel accelerations for {p} wheels",
                u.len()
            )));
        }
        let n = self.state_dim();
        let kin = euler_kinematics_matrix(phi, theta)?;
        let (k_phi, k_theta) = euler_kinematics_partials(phi, theta);
        let mut a = Matrix::zeros(n, n);
        let mut b = Matrix::zeros(n, p);

        let dk_phi = k_phi * omega;
        let dk_theta = k_theta * omega;
        for r in 0..3 {
            a[(r, 0)] = dk_phi[r];
            a[(r, 1)] = dk_theta[r];
            for c in 0..3 {
                a[(r, 3 + c)] = kin[(r, c)];
            }
        }

        let d_tau = if self.srp_enabled {
            srp_torque_with_jacobian(phi, theta, psi, &self.params).1
        } else {
            Matrix3::zeros()
        };
        let h = self.locked * omega + self.wheel_momentum(&nu);
        let d_omega_angles = self.locked_inv * d_tau;
        let d_omega_omega = self.locked_inv * (skew(&h) - skew(&omega) * self.locked);
        let jw = self.params.wheel_inertia;
        let d_omega_nu = -(self.locked_inv * skew(&omega)) * &self.wheels * jw;
        let d_omega_u = -(self.locked_inv * &self.wheels) * jw;
        for r in 0..3 {
            for c in 0..3 {
                a[(3 + r, c)] = d_omega_angles[(r, c)];
                a[(3 + r, 3 + c)] = d_omega_omega[(r, c)];
            }
            for c in 0..p {
                a[(3 + r, 6 + c)] = d_omega_nu[(r, c)];
                b[(3 + r, c)] = d_omega_u[(r, c)];
            }
        }
        for i in 0..p {
            b[(6 + i, i)] = 1.0;
        }
        Ok((a, b))
    }

    /// One explicit-Euler step `x + f(x, u) dt`.
    pub fn discretize_step(&self, x: &Vector, u: &Vector, dt: f64) -> Result<Vector> {
        if !(dt > 0.0) {
            return Err(DcocError::Parameter(format!(
                "sampling period must be positive, got {dt}"
            )));
        }
        Ok(x + self.continuous_dynamics(x, u)? * dt)
    }
}

/// Explicit-Euler discretization of [`AttitudeModel`] as a [`Dynamics`].
#[derive(Debug, Clone)]
pub struct DiscreteAttitude {
    model: AttitudeModel,
    dt: f64,
}

impl DiscreteAttitude {
    pub fn new(model: AttitudeModel, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(DcocError::Parameter(format!(
                "sampling period must be positive, got {dt}"
            )));
        }
        Ok(Self { model, dt })
    }

    pub fn model(&self) -> &AttitudeModel {
        &self.model
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl Dynamics for DiscreteAttitude {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.model.wheel_count()
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        self.model.discretize_step(x, u, self.dt)
    }
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        let (a, b) = self.model.continuous_jacobians(x, u)?;
        let n = self.state_dim();
        Ok((Matrix::identity(n, n) + a * self.dt, b * self.dt))
    }
}

/// How the wheel-speed band is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WheelSpeedMode {
    /// `lower <= nu_i <= upper` for each wheel.
    #[default]
    PerWheel,
    /// `lower <= ||nu||_1 <= upper`, with `|.|` smoothed as `sqrt(v^2 + d^2)`.
    OneNorm,
}

/// Smoothing length for the 1-norm reading of the wheel-speed band.
pub const ONE_NORM_SMOOTHING: f64 = 1e-6;

/// State and control limits of an attitude-keeping run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttitudeLimits {
    /// `(lower, upper)` for roll, pitch and yaw (rad).
    pub euler: [[f64; 2]; 3],
    /// `(lower, upper)` wheel speed band (rad/s).
    pub wheel_speed: [f64; 2],
    #[serde(default)]
    pub wheel_speed_mode: WheelSpeedMode,
    /// Cap on `||u||_1` (rad/s^2).
    pub accel_one_norm_cap: f64,
}

pub const EULER_LABELS: [&str; 3] = ["phi", "theta", "psi"];

impl AttitudeLimits {
    /// Stage constraint over the full attitude state.
    pub fn stage_constraint(&self, wheels: usize) -> Result<StageConstraint> {
        let n = 6 + wheels;
        let mut bounds: Vec<ComponentBound> = (0..3)
            .map(|i| ComponentBound {
                index: i,
                lower: Some(self.euler[i][0]),
                upper: Some(self.euler[i][1]),
                label: EULER_LABELS[i].to_string(),
            })
            .collect();
        match self.wheel_speed_mode {
            WheelSpeedMode::PerWheel => {
                bounds.extend((0..wheels).map(|i| ComponentBound {
                    index: 6 + i,
                    lower: Some(self.wheel_speed[0]),
                    upper: Some(self.wheel_speed[1]),
                    label: format!("nu{}", i + 1),
                }));
                StageConstraint::component_bounds(n, &bounds)
            }
            WheelSpeedMode::OneNorm => {
                let angles = StageConstraint::component_bounds(n, &bounds)?;
                let smooth_abs = |v: f64| (v * v + ONE_NORM_SMOOTHING * ONE_NORM_SMOOTHING).sqrt();
                let eval = move |x: &Vector| {
                    let s: f64 = (0..wheels).map(|i| smooth_abs(x[6 + i])).sum();
                    Vector::from_vec(vec![s, -s])
                };
                let jac = move |x: &Vector| {
                    let mut g = Matrix::zeros(2, n);
                    for i in 0..wheels {
                        let d = x[6 + i] / smooth_abs(x[6 + i]);
                        g[(0, 6 + i)] = d;
                        g[(1, 6 + i)] = -d;
                    }
                    g
                };
                let map: Arc<dyn ConstraintMap> = Arc::new(FnMap::new(2, eval).with_jacobian(jac));
                let band = StageConstraint::with_labels(
                    map,
                    Vector::from_vec(vec![self.wheel_speed[1], -self.wheel_speed[0]]),
                    vec!["nu_norm".into(), "nu_norm".into()],
                )?;
                angles.stack(&band)
            }
        }
    }

    pub fn control_set(&self, wheels: usize) -> Result<ControlSet> {
        ControlSet::one_norm_ball(wheels, self.accel_one_norm_cap)
    }
}

/// Builds the attitude-keeping problem over `horizon` steps.
pub fn attitude_problem(
    params: AttitudeParams,
    limits: &AttitudeLimits,
    x0: Vector,
    dt: f64,
    horizon: usize,
) -> Result<DcocProblem> {
    let wheels = params.wheel_count();
    let dynamics = DiscreteAttitude::new(AttitudeModel::new(params)?, dt)?;
    DcocProblem::stationary(
        Arc::new(dynamics),
        limits.stage_constraint(wheels)?,
        horizon,
        limits.control_set(wheels)?,
        x0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn three_wheel() -> AttitudeModel {
        AttitudeModel::new(AttitudeParams::reference(vec![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]))
        .unwrap()
    }

    fn two_wheel() -> AttitudeModel {
        let s = 1.0 / 3f64.sqrt();
        AttitudeModel::new(AttitudeParams::reference(vec![[s, s, s], [1.0, 0.0, 0.0]])).unwrap()
    }

    fn nominal_x0() -> Vector {
        Vector::from_vec(vec![
            -1e-3, 3.5e-4, -5e-4, -5e-4, 2e-4, 5e-4, 50.0, 50.0, 50.0,
        ])
    }

    fn assert_vec_rel(actual: &Vector, expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert_relative_eq!(*a, *e, max_relative = tol, epsilon = 1e-300);
        }
    }

    #[test]
    fn kinematics_identity_at_zero() {
        assert_eq!(
            euler_kinematics_matrix(0.0, 0.0).unwrap(),
            Matrix3::identity()
        );
    }

    #[test]
    fn kinematics_singular_at_ninety_degrees_pitch() {
        let err = euler_kinematics_matrix(0.3, std::f64::consts::FRAC_PI_2).unwrap_err();
        assert!(matches!(err, DcocError::GimbalSingularity { .. }));
    }

    #[test]
    fn kinematics_matches_reference_values() {
        // numpy evaluation of the rate matrix at (0.1, 0.2)
        let expected = Matrix3::new(
            1.0,
            0.02023723543343063,
            0.20169732967478565,
            0.0,
            0.9950041652780259,
            -0.09983341664682815,
            0.0,
            0.10186391302795748,
            1.0152414007114565,
        );
        let m = euler_kinematics_matrix(0.1, 0.2).unwrap();
        assert!((m - expected).amax() < 1e-14);
    }

    #[test]
    fn kinematics_smooth_in_operating_range() {
        for i in 0..=20 {
            let theta = -0.1 + 0.01 * i as f64;
            let m = euler_kinematics_matrix(0.05, theta).unwrap();
            assert!(m.iter().all(|v| v.is_finite()));
            let (_, d_theta) = euler_kinematics_partials(0.05, theta);
            assert!(d_theta.amax() < 2.0);
        }
    }

    #[test]
    fn srp_vanishes_for_centered_mass_and_axis_sun() {
        for cd in [0.0, 0.2, 0.7, 1.0] {
            let mut p = three_wheel().params().clone();
            p.com_offset = [0.0; 3];
            p.diffuse_coefficient = cd;
            for axis in 0..3 {
                let mut sun = [0.0; 3];
                sun[axis] = 1.0;
                p.sun_direction = sun;
                assert!(srp_torque(0.0, 0.0, 0.0, &p).amax() < 1e-20);
            }
        }
    }

    #[test]
    fn srp_zero_without_flux() {
        let mut p = three_wheel().params().clone();
        p.solar_flux = 0.0;
        assert_eq!(srp_torque(0.01, -0.02, 0.3, &p), Vector3::zeros());
    }

    #[test]
    fn srp_reference_values() {
        // independent face-sum evaluation (numpy) of the cuboid model
        let p = three_wheel().params().clone();
        let t = srp_torque(0.0, 0.0, 0.0, &p);
        assert_relative_eq!(t.x, 1.759688232715339e-05, max_relative = 1e-12);
        assert!(t.y.abs() < 1e-20);
        assert_relative_eq!(t.z, -1.891318932041040e-05, max_relative = 1e-12);
        let t = srp_torque(-1e-3, 3.5e-4, -5e-4, &p);
        assert_relative_eq!(t.x, 1.7615222807901977e-05, max_relative = 1e-12);
        assert_relative_eq!(t.z, -1.8891710332188756e-05, max_relative = 1e-12);
    }

    #[test]
    fn continuous_dynamics_reference_values() {
        let m = three_wheel();
        let f = m
            .continuous_dynamics(&nominal_x0(), &Vector::zeros(3))
            .unwrap();
        let expected = [
            -4.9982507008034536e-04,
            2.0049989991667498e-04,
            4.9979978064609040e-04,
            1.5198834135374881e-06,
            -1.9565420402415453e-06,
            1.2031204272995672e-06,
            0.0,
            0.0,
            0.0,
        ];
        assert_vec_rel(&f, &expected, 1e-12);
        let f = m
            .continuous_dynamics(&nominal_x0(), &Vector::from_vec(vec![0.5, -0.7, 0.3]))
            .unwrap();
        let expected = [
            -4.9982507008034536e-04,
            2.0049989991667498e-04,
            4.9979978064609040e-04,
            -4.8475117086412518e-05,
            2.2918607024709036e-05,
            -8.7196282817815919e-06,
            0.5,
            -0.7,
            0.3,
        ];
        assert_vec_rel(&f, &expected, 1e-12);
    }

    #[test]
    fn two_wheel_reference_values() {
        let m = two_wheel();
        let x = Vector::from_vec(vec![-1e-3, 6e-4, -5e-4, -5e-4, 2e-4, 3e-4, 50.0, 50.0]);
        let f = m
            .continuous_dynamics(&x, &Vector::from_vec(vec![1.0, -2.0]))
            .unwrap();
        let expected = [
            -4.9982012006839435e-04,
            2.0029989995000834e-04,
            2.9979990399732687e-04,
            1.4256438913659011e-04,
            -2.1980220822195147e-05,
            -1.8053468589232671e-05,
            1.0,
            -2.0,
        ];
        assert_vec_rel(&f, &expected, 1e-12);
    }

    #[test]
    fn one_euler_step_reference_values() {
        let m = three_wheel();
        let x1 = m
            .discretize_step(&nominal_x0(), &Vector::zeros(3), 2.0)
            .unwrap();
        let expected = [
            -1.9996501401606907e-03,
            7.5099979983334997e-04,
            4.9959956129218080e-04,
            -4.9696023317292505e-04,
            1.9608691591951693e-04,
            5.0240624085459912e-04,
            50.0,
            50.0,
            50.0,
        ];
        assert_vec_rel(&x1, &expected, 1e-12);
        let x0 = nominal_x0();
        let omega = Vector3::new(x0[3], x0[4], x0[5]);
        let increment = euler_kinematics_matrix(x0[0], x0[1]).unwrap() * omega * 2.0;
        for i in 0..3 {
            assert_relative_eq!(x1[i] - x0[i], increment[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn equilibrium_without_srp() {
        let m = three_wheel().without_srp();
        let f = m
            .continuous_dynamics(&Vector::zeros(9), &Vector::zeros(3))
            .unwrap();
        assert_eq!(f, Vector::zeros(9));
        let x = m
            .discretize_step(&Vector::zeros(9), &Vector::zeros(3), 2.0)
            .unwrap();
        assert_eq!(x, Vector::zeros(9));
    }

    #[test]
    fn two_wheel_speeds_integrate_directly() {
        let m = two_wheel();
        let x = Vector::from_vec(vec![-1e-3, 6e-4, -5e-4, -5e-4, 2e-4, 3e-4, 50.0, 50.0]);
        let u = Vector::from_vec(vec![0.75, -1.25]);
        let next = m.discretize_step(&x, &u, 2.0).unwrap();
        assert_eq!(next[6], 50.0 + 0.75 * 2.0);
        assert_eq!(next[7], 50.0 - 1.25 * 2.0);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(three_wheel()
            .discretize_step(&nominal_x0(), &Vector::zeros(3), 0.0)
            .is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = AttitudeParams::reference(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        assert!(AttitudeModel::new(p.clone()).is_err());
        p.wheel_axes = vec![[1.0, 0.0, 0.0]];
        assert!(AttitudeModel::new(p).is_err());
    }

    fn random_state<R: Rng>(rng: &mut R, wheels: usize) -> Vector {
        let mut x = Vector::zeros(6 + wheels);
        for i in 0..3 {
            x[i] = rng.gen_range(-0.5..0.5);
        }
        for i in 3..6 {
            x[i] = rng.gen_range(-1e-2..1e-2);
        }
        for i in 6..6 + wheels {
            x[i] = rng.gen_range(-100.0..100.0);
        }
        x
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for model in [three_wheel(), two_wheel()] {
            let p = model.wheel_count();
            for _ in 0..25 {
                let x = random_state(&mut rng, p);
                let u = Vector::from_fn(p, |_, _| rng.gen_range(-2.0..2.0));
                let (a, b) = model.continuous_jacobians(&x, &u).unwrap();
                let na = fd::jacobian(|xp| model.continuous_dynamics(xp, &u).unwrap(), &x);
                let nb = fd::jacobian(|up| model.continuous_dynamics(&x, up).unwrap(), &u);
                for (exact, numeric) in [(&a, &na), (&b, &nb)] {
                    let scale = exact.amax().max(1e-12);
                    assert!(
                        (exact - numeric).amax() / scale < 1e-6,
                        "{exact} vs {numeric}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn body_momentum_identity(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for model in [three_wheel(), two_wheel()] {
                let p = model.wheel_count();
                let x = random_state(&mut rng, p);
                let u = Vector::from_fn(p, |_, _| rng.gen_range(-2.0..2.0));
                prop_assert!(model.momentum_identity_residual(&x, &u).unwrap() < 1e-12);
            }
        }
    }
}
