//! Rigid-body quadrotor model.
//!
//! State layout (13 entries, quaternion scalar-first):
//!
//! ```text
//! [ p_W (0..3) | q_WB (3..7) | v_W (7..10) | omega_B (10..13) ]
//! ```
//!
//! The angular rate is expressed in the body frame throughout. The raw-vector
//! functions (`f_phys_vec`, `f_phys_jacobian`) accept non-unit quaternions so
//! that integrator stages and finite-difference perturbations stay well defined;
//! rotations are then scaled by `|q|^2`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 4;
pub const GRAVITY: f64 = 9.81;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type InputVec = Vector4<f64>;
pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputJacobian = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Slot offsets inside [`StateVec`].
pub mod idx {
    pub const POS: usize = 0;
    pub const QUAT: usize = 3;
    pub const VEL: usize = 7;
    pub const RATE: usize = 10;
}

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s).normalized()
    }

    /// Quaternion of the rotation matrix `r` (columns are body axes in world coordinates).
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        let uq = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        Self::new(uq.w, uq.i, uq.j, uq.k).normalized()
    }

    pub fn from_vec(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vec(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn vec_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().norm()
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Unit-norm copy with the sign fixed so that `w >= 0`.
    pub fn normalized(&self) -> Self {
        let q = self.normalized_keep_sign();
        if q.w < 0.0 {
            q.neg()
        } else {
            q
        }
    }

    /// Unit-norm copy without touching the double-cover sign.
    pub fn normalized_keep_sign(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Hamilton product `self * o`.
    pub fn mul(&self, o: &Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation matrix of `v -> q v q*`, valid for any `q` (scaled by `|q|^2`).
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix_raw(&self.to_vec())
    }

    /// Yaw angle (rotation about world z) of the body x axis.
    pub fn yaw(&self) -> f64 {
        let r = self.rotation_matrix();
        r[(1, 0)].atan2(r[(0, 0)])
    }
}

/// `q ⊙ v = q v q*`. Fails if `q` is not unit-norm within 1e-6.
pub fn quat_rotate(q: &Quaternion, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    if !q.is_unit(UNIT_TOL) {
        return Err(Error::Contract(format!(
            "quat_rotate requires a unit quaternion, got norm {}",
            q.norm()
        )));
    }
    Ok(rotate_raw(&q.to_vec(), v))
}

/// `q* ⊙ v`: world-to-body for the body-to-world attitude `q`.
pub fn quat_rotate_inv(q: &Quaternion, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    quat_rotate(&q.conjugate(), v)
}

/// Matrix form of `v -> q v q*` for an arbitrary (possibly non-unit) `q`.
pub(crate) fn rotation_matrix_raw(q: &Vector4<f64>) -> Matrix3<f64> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    Matrix3::identity() * (w * w - u.dot(&u)) + u * u.transpose() * 2.0 + skew(&u) * (2.0 * w)
}

pub(crate) fn rotate_raw(q: &Vector4<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    v * (w * w - u.dot(&u)) + u * (2.0 * u.dot(v)) + u.cross(v) * (2.0 * w)
}

/// `q* v q` for an arbitrary `q`.
pub(crate) fn rotate_conj_raw(q: &Vector4<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    v * (w * w - u.dot(&u)) + u * (2.0 * u.dot(v)) - u.cross(v) * (2.0 * w)
}

/// ∂(q v q*)/∂q, 3×4.
pub(crate) fn rotate_jac_q(q: &Vector4<f64>, v: &Vector3<f64>) -> SMatrix<f64, 3, 4> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    let dw = v * (2.0 * w) + u.cross(v) * 2.0;
    let du = -(v * u.transpose()) * 2.0 + Matrix3::identity() * (2.0 * u.dot(v))
        + u * v.transpose() * 2.0
        - skew(v) * (2.0 * w);
    let mut j = SMatrix::<f64, 3, 4>::zeros();
    j.set_column(0, &dw);
    j.fixed_view_mut::<3, 3>(0, 1).copy_from(&du);
    j
}

/// ∂(q* v q)/∂q, 3×4.
pub(crate) fn rotate_conj_jac_q(q: &Vector4<f64>, v: &Vector3<f64>) -> SMatrix<f64, 3, 4> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    let dw = v * (2.0 * w) - u.cross(v) * 2.0;
    let du = -(v * u.transpose()) * 2.0 + Matrix3::identity() * (2.0 * u.dot(v))
        + u * v.transpose() * 2.0
        + skew(v) * (2.0 * w);
    let mut j = SMatrix::<f64, 3, 4>::zeros();
    j.set_column(0, &dw);
    j.fixed_view_mut::<3, 3>(0, 1).copy_from(&du);
    j
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left-multiplication matrix: `q ⊗ p = quat_left(q) p`.
pub(crate) fn quat_left(q: &Vector4<f64>) -> SMatrix<f64, 4, 4> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    SMatrix::<f64, 4, 4>::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right-multiplication matrix: `q ⊗ p = quat_right(p) q`.
pub(crate) fn quat_right(p: &Vector4<f64>) -> SMatrix<f64, 4, 4> {
    let (w, x, y, z) = (p[0], p[1], p[2], p[3]);
    SMatrix::<f64, 4, 4>::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub p_w: Vector3<f64>,
    pub q_wb: Quaternion,
    pub v_w: Vector3<f64>,
    pub omega_b: Vector3<f64>,
}

impl Default for QuadState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl QuadState {
    pub fn at_rest(p_w: Vector3<f64>) -> Self {
        Self {
            p_w,
            q_wb: Quaternion::identity(),
            v_w: Vector3::zeros(),
            omega_b: Vector3::zeros(),
        }
    }

    pub fn to_vec(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(idx::POS).copy_from(&self.p_w);
        x.fixed_rows_mut::<4>(idx::QUAT).copy_from(&self.q_wb.to_vec());
        x.fixed_rows_mut::<3>(idx::VEL).copy_from(&self.v_w);
        x.fixed_rows_mut::<3>(idx::RATE).copy_from(&self.omega_b);
        x
    }

    /// Unpacks a raw vector without normalizing the quaternion.
    pub fn from_vec(x: &StateVec) -> Self {
        Self {
            p_w: x.fixed_rows::<3>(idx::POS).into_owned(),
            q_wb: Quaternion::from_vec(&x.fixed_rows::<4>(idx::QUAT).into_owned()),
            v_w: x.fixed_rows::<3>(idx::VEL).into_owned(),
            omega_b: x.fixed_rows::<3>(idx::RATE).into_owned(),
        }
    }

    /// Velocity expressed in the body frame.
    pub fn v_body(&self) -> Vector3<f64> {
        rotate_conj_raw(&self.q_wb.to_vec(), &self.v_w)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Contract("state has non-finite entries".into()));
        }
        if !self.q_wb.is_unit(UNIT_TOL) {
            return Err(Error::Contract(format!(
                "state quaternion not unit-norm (|q| = {})",
                self.q_wb.norm()
            )));
        }
        Ok(())
    }
}

/// Rotor activations, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput([f64; 4]);

impl ControlInput {
    pub fn new(u: [f64; 4]) -> Result<Self> {
        if u.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Contract(format!("rotor input out of [0,1]: {u:?}")));
        }
        Ok(Self(u))
    }

    pub fn zero() -> Self {
        Self([0.0; 4])
    }

    pub fn uniform(u: f64) -> Result<Self> {
        Self::new([u; 4])
    }

    /// Clips each entry into `[0, 1]`.
    pub fn saturating(u: [f64; 4]) -> Self {
        Self(u.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }

    pub fn to_vec(&self) -> InputVec {
        InputVec::from(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the inertia tensor, kg·m².
    pub inertia: [f64; 3],
    pub d_x: f64,
    pub d_y: f64,
    pub c_tau: f64,
    /// Per-rotor thrust at `u = 1`, N.
    pub t_max: f64,
    pub gravity: [f64; 3],
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.72,
            inertia: [0.007, 0.007, 0.012],
            d_x: 0.17,
            d_y: 0.17,
            c_tau: 0.016,
            t_max: 5.0,
            gravity: [0.0, 0.0, -GRAVITY],
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mass, self.t_max, self.d_x, self.d_y, self.c_tau];
        if all.iter().chain(self.inertia.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("quad parameters must be finite".into()));
        }
        if self.mass <= 0.0 || self.t_max <= 0.0 {
            return Err(Error::Config("mass and t_max must be positive".into()));
        }
        if self.inertia.iter().any(|j| *j <= 0.0) {
            return Err(Error::Config("inertia must be positive definite".into()));
        }
        let g = Vector3::from(self.gravity).norm();
        if 4.0 * self.t_max <= self.mass * g {
            return Err(Error::Config(format!(
                "hover infeasible: 4·t_max = {} N <= m·g = {} N",
                4.0 * self.t_max,
                self.mass * g
            )));
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    pub fn inertia_inv(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia.map(|j| 1.0 / j)))
    }

    pub fn gravity_vec(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Per-rotor activation that balances gravity with equal thrust split.
    pub fn hover_input(&self) -> f64 {
        self.mass * self.gravity_vec().norm() / (4.0 * self.t_max)
    }

    /// 3×4 map from rotor thrusts `T_i` to body torque.
    pub fn torque_map(&self) -> SMatrix<f64, 3, 4> {
        SMatrix::<f64, 3, 4>::new(
            -self.d_y, -self.d_y, self.d_y, self.d_y, //
            -self.d_x, self.d_x, self.d_x, -self.d_x, //
            -self.c_tau, self.c_tau, -self.c_tau, self.c_tau,
        )
    }
}

/// Collective thrust and torque in the body frame.
pub fn thrust_torque(u: &ControlInput, params: &QuadParams) -> (Vector3<f64>, Vector3<f64>) {
    thrust_torque_raw(&u.to_vec(), params)
}

fn thrust_torque_raw(u: &InputVec, params: &QuadParams) -> (Vector3<f64>, Vector3<f64>) {
    let thrusts = u * params.t_max;
    let t_b = Vector3::new(0.0, 0.0, thrusts.sum());
    let tau_b = params.torque_map() * thrusts;
    (t_b, tau_b)
}

/// Nominal physics model `ẋ = f_phys(x, u)`.
pub fn f_phys(x: &QuadState, u: &ControlInput, params: &QuadParams) -> StateVec {
    f_phys_vec(&x.to_vec(), &u.to_vec(), params)
}

pub fn f_phys_vec(x: &StateVec, u: &InputVec, params: &QuadParams) -> StateVec {
    let q = x.fixed_rows::<4>(idx::QUAT).into_owned();
    let v = x.fixed_rows::<3>(idx::VEL).into_owned();
    let w = x.fixed_rows::<3>(idx::RATE).into_owned();
    let (t_b, tau_b) = thrust_torque_raw(u, params);

    let q_dot = quat_left(&q) * Vector4::new(0.0, w.x, w.y, w.z) * 0.5;
    let v_dot = rotate_raw(&q, &(t_b / params.mass)) + params.gravity_vec();
    let j = params.inertia_matrix();
    let w_dot = params.inertia_inv() * (tau_b - w.cross(&(j * w)));

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(idx::POS).copy_from(&v);
    dx.fixed_rows_mut::<4>(idx::QUAT).copy_from(&q_dot);
    dx.fixed_rows_mut::<3>(idx::VEL).copy_from(&v_dot);
    dx.fixed_rows_mut::<3>(idx::RATE).copy_from(&w_dot);
    dx
}

/// Analytic `(∂f_phys/∂x, ∂f_phys/∂u)`.
pub fn f_phys_jacobian(
    x: &StateVec,
    u: &InputVec,
    params: &QuadParams,
) -> (StateJacobian, InputJacobian) {
    let q = x.fixed_rows::<4>(idx::QUAT).into_owned();
    let w = x.fixed_rows::<3>(idx::RATE).into_owned();
    let (t_b, _) = thrust_torque_raw(u, params);
    let j = params.inertia_matrix();
    let j_inv = params.inertia_inv();

    let mut fx = StateJacobian::zeros();
    fx.fixed_view_mut::<3, 3>(idx::POS, idx::VEL)
        .copy_from(&Matrix3::identity());
    fx.fixed_view_mut::<4, 4>(idx::QUAT, idx::QUAT)
        .copy_from(&(quat_right(&Vector4::new(0.0, w.x, w.y, w.z)) * 0.5));
    fx.fixed_view_mut::<4, 3>(idx::QUAT, idx::RATE)
        .copy_from(&(quat_left(&q).fixed_columns::<3>(1) * 0.5));
    fx.fixed_view_mut::<3, 4>(idx::VEL, idx::QUAT)
        .copy_from(&rotate_jac_q(&q, &(t_b / params.mass)));
    fx.fixed_view_mut::<3, 3>(idx::RATE, idx::RATE)
        .copy_from(&(j_inv * (skew(&(j * w)) - skew(&w) * j)));

    let mut fu = InputJacobian::zeros();
    let z_axis = rotation_matrix_raw(&q).column(2).into_owned() * (params.t_max / params.mass);
    for i in 0..4 {
        fu.fixed_view_mut::<3, 1>(idx::VEL, i).copy_from(&z_axis);
    }
    fu.fixed_view_mut::<3, 4>(idx::RATE, 0)
        .copy_from(&(j_inv * params.torque_map() * params.t_max));
    (fx, fu)
}

/// Normalizes the quaternion slot (with `w >= 0`).
pub fn normalize_state(x: &mut StateVec) {
    let q = Quaternion::from_vec(&x.fixed_rows::<4>(idx::QUAT).into_owned()).normalized();
    x.fixed_rows_mut::<4>(idx::QUAT).copy_from(&q.to_vec());
}

/// One classical RK4 step of `f` followed by quaternion renormalization.
pub fn rk4_step<F>(f: F, x: &QuadState, u: &ControlInput, dt: f64) -> Result<QuadState>
where
    F: Fn(&StateVec, &InputVec) -> StateVec,
{
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("rk4_step needs dt > 0, got {dt}")));
    }
    let mut next = rk4_raw(&f, &x.to_vec(), &u.to_vec(), dt);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            step: 0,
            t: dt,
            reason: "non-finite state derivative".into(),
        });
    }
    normalize_state(&mut next);
    Ok(QuadState::from_vec(&next))
}

pub(crate) fn rk4_raw<F>(f: &F, x: &StateVec, u: &InputVec, dt: f64) -> StateVec
where
    F: Fn(&StateVec, &InputVec) -> StateVec,
{
    let k1 = f(x, u);
    let k2 = f(&(x + k1 * (0.5 * dt)), u);
    let k3 = f(&(x + k2 * (0.5 * dt)), u);
    let k4 = f(&(x + k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}
