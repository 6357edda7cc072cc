//! Free-flyer rigid-body dynamics.
//!
//! Translation is a double integrator driven by a world-frame force; attitude
//! follows quaternion kinematics with body rates and Euler's rotational
//! equations for a diagonal inertia tensor. Quaternions are stored scalar-last
//! `(x, y, z, s)`.

use nalgebra::{DMatrix, DVector, Matrix4x3, Quaternion, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 6;
/// Tangent-space dimension of the state (attitude as a rotation vector).
pub const TANGENT_DIM: usize = 12;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;
pub type TangentVector = SVector<f64, TANGENT_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Unit quaternion, scalar last.
    pub q: Vector4<f64>,
    /// Body angular velocity.
    pub w: Vector3<f64>,
}

impl Default for State {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros(), identity_quaternion())
    }
}

impl State {
    pub fn at_rest(r: Vector3<f64>, q: Vector4<f64>) -> Self {
        Self {
            r,
            v: Vector3::zeros(),
            q,
            w: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.r);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        x.fixed_rows_mut::<4>(6).copy_from(&self.q);
        x.fixed_rows_mut::<3>(10).copy_from(&self.w);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            r: x.fixed_rows::<3>(0).into(),
            v: x.fixed_rows::<3>(3).into(),
            q: x.fixed_rows::<4>(6).into(),
            w: x.fixed_rows::<3>(10).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    pub fn with_normalized_attitude(mut self) -> Self {
        self.q /= self.q.norm();
        self
    }

    /// Position and velocity stacked.
    pub fn translational(&self) -> SVector<f64, 6> {
        let mut t = SVector::<f64, 6>::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(&self.r);
        t.fixed_rows_mut::<3>(3).copy_from(&self.v);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// World-frame force.
    pub f: Vector3<f64>,
    /// Body-frame torque.
    pub tau: Vector3<f64>,
}

impl ControlInput {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn force(f: Vector3<f64>) -> Self {
        Self {
            f,
            tau: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> InputVector {
        let mut u = InputVector::zeros();
        u.fixed_rows_mut::<3>(0).copy_from(&self.f);
        u.fixed_rows_mut::<3>(3).copy_from(&self.tau);
        u
    }

    pub fn from_vector(u: &InputVector) -> Self {
        Self {
            f: u.fixed_rows::<3>(0).into(),
            tau: u.fixed_rows::<3>(3).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().chain(self.tau.iter()).all(|c| c.is_finite())
    }
}

/// Symmetric per-axis box bounds on force and torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    pub force: f64,
    pub torque: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self {
            force: 0.5,
            torque: 0.1,
        }
    }
}

impl ControlLimits {
    pub fn clamp(&self, u: &ControlInput) -> ControlInput {
        ControlInput {
            f: u.f.map(|c| c.clamp(-self.force, self.force)),
            tau: u.tau.map(|c| c.clamp(-self.torque, self.torque)),
        }
    }

    pub fn contains(&self, u: &ControlInput, tol: f64) -> bool {
        u.f.iter().all(|c| c.abs() <= self.force + tol)
            && u.tau.iter().all(|c| c.abs() <= self.torque + tol)
    }
}

/// Mass and diagonal inertia of the rigid body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertialParams {
    pub mass: f64,
    /// Principal moments `(Ixx, Iyy, Izz)`.
    pub inertia: Vector3<f64>,
}

impl InertialParams {
    /// Astrobee alone.
    pub const ASTROBEE: InertialParams = InertialParams {
        mass: 9.0877,
        inertia: Vector3::new(0.1454, 0.1366, 0.1594),
    };

    /// Astrobee rigidly holding the printed part.
    pub const ASTROBEE_WITH_OBJECT: InertialParams = InertialParams {
        mass: 15.0,
        inertia: Vector3::new(0.1464, 0.1376, 0.1604),
    };

    pub fn new(mass: f64, inertia: Vector3<f64>) -> Result<Self> {
        let p = Self { mass, inertia };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        if self.inertia.iter().any(|i| !(i.is_finite() && *i > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "principal moments must be positive, got {:?}",
                self.inertia.as_slice()
            )));
        }
        let [a, b, c] = [self.inertia.x, self.inertia.y, self.inertia.z];
        if a + b < c || b + c < a || a + c < b {
            return Err(Error::InvalidArgument(format!(
                "principal moments {:?} violate the triangle inequality",
                self.inertia.as_slice()
            )));
        }
        Ok(())
    }

    /// Parameter vector `(m, Ixx, Iyy, Izz)`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.mass, self.inertia.x, self.inertia.y, self.inertia.z)
    }

    pub fn from_vector(theta: &Vector4<f64>) -> Self {
        Self {
            mass: theta[0],
            inertia: Vector3::new(theta[1], theta[2], theta[3]),
        }
    }
}

pub fn identity_quaternion() -> Vector4<f64> {
    Vector4::new(0.0, 0.0, 0.0, 1.0)
}

/// Quaternion kinematics matrix: `q_dot = 0.5 * xi(q) * w`.
pub fn xi_matrix(q: &Vector4<f64>) -> Matrix4x3<f64> {
    let (qx, qy, qz, qs) = (q[0], q[1], q[2], q[3]);
    Matrix4x3::new(
        qs, -qz, qy, //
        qz, qs, -qx, //
        -qy, qx, qs, //
        -qx, -qy, -qz,
    )
}

fn derivative_unchecked(x: &StateVector, u: &InputVector, p: &InertialParams) -> StateVector {
    let mut dx = StateVector::zeros();
    let q: Vector4<f64> = x.fixed_rows::<4>(6).into();
    let w: Vector3<f64> = x.fixed_rows::<3>(10).into();
    let f: Vector3<f64> = u.fixed_rows::<3>(0).into();
    let tau: Vector3<f64> = u.fixed_rows::<3>(3).into();

    dx.fixed_rows_mut::<3>(0).copy_from(&x.fixed_rows::<3>(3));
    dx.fixed_rows_mut::<3>(3).copy_from(&(f / p.mass));
    dx.fixed_rows_mut::<4>(6)
        .copy_from(&(0.5 * xi_matrix(&q) * w));
    let iw = p.inertia.component_mul(&w);
    let w_dot = (tau - w.cross(&iw)).component_div(&p.inertia);
    dx.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    dx
}

/// Continuous-time state derivative `[v, f/m, 0.5 xi(q) w, I^-1 (tau - w x I w)]`.
pub fn derivative(x: &State, u: &ControlInput, p: &InertialParams) -> Result<StateVector> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::InvalidArgument("non-finite state or input".into()));
    }
    p.validate()?;
    Ok(derivative_unchecked(&x.to_vector(), &u.to_vector(), p))
}

pub(crate) fn rk4_vector(
    x: &StateVector,
    u: &InputVector,
    p: &InertialParams,
    dt: f64,
) -> StateVector {
    let k1 = derivative_unchecked(x, u, p);
    let k2 = derivative_unchecked(&(x + 0.5 * dt * k1), u, p);
    let k3 = derivative_unchecked(&(x + 0.5 * dt * k2), u, p);
    let k4 = derivative_unchecked(&(x + dt * k3), u, p);
    let mut next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let qn = next.fixed_rows::<4>(6).norm();
    next.fixed_rows_mut::<4>(6).unscale_mut(qn);
    next
}

/// One classical RK4 step with the input held constant, attitude renormalized.
pub fn step_rk4(x: &State, u: &ControlInput, p: &InertialParams, dt: f64) -> Result<State> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::InvalidArgument("non-finite state or input".into()));
    }
    p.validate()?;
    Ok(State::from_vector(&rk4_vector(
        &x.to_vector(),
        &u.to_vector(),
        p,
        dt,
    )))
}

/// Unchecked stepping for hot loops whose inputs were validated upstream.
pub(crate) fn step_fast(x: &State, u: &ControlInput, p: &InertialParams, dt: f64) -> State {
    State::from_vector(&rk4_vector(&x.to_vector(), &u.to_vector(), p, dt))
}

/// Linear time-varying model `dx[k+1] = A[k] dx[k] + B[k] du[k] + g[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub g: Vec<DVector<f64>>,
    pub dt: f64,
}

impl LtvModel {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        g: Vec<DVector<f64>>,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if a.is_empty() || a.len() != b.len() || a.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "sequence lengths A={}, B={}, g={}",
                a.len(),
                b.len(),
                g.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for k in 0..a.len() {
            if a[k].shape() != (n, n) || b[k].shape() != (n, m) || g[k].len() != n {
                return Err(Error::DimensionMismatch(format!("stage {k} has inconsistent shapes")));
            }
        }
        Ok(Self { a, b, g, dt })
    }

    /// The same stage repeated `len` times.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        g: DVector<f64>,
        dt: f64,
        len: usize,
    ) -> Result<Self> {
        let len = len.max(1);
        Self::new(vec![a; len], vec![b; len], vec![g; len], dt)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    /// Stage `k`; a model shorter than the requested horizon holds its last stage.
    pub fn stage(&self, k: usize) -> (&DMatrix<f64>, &DMatrix<f64>, &DVector<f64>) {
        let k = k.min(self.a.len() - 1);
        (&self.a[k], &self.b[k], &self.g[k])
    }
}

/// Discrete linearization of the RK4 step map about an operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Drift of the operating point over one step, `step(x_op, u_op) - x_op`.
    pub g: DVector<f64>,
}

fn fd_step(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

/// Central-difference Jacobians of the discrete step map.
///
/// In perturbation coordinates about the (fixed) operating point,
/// `x[k+1] - x_op ~= A (x - x_op) + B (u - u_op) + g`, exact at the operating point.
pub fn linearize_discretize(
    x_op: &State,
    u_op: &ControlInput,
    p: &InertialParams,
    dt: f64,
) -> Result<Linearization> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    if !x_op.is_finite() || !u_op.is_finite() {
        return Err(Error::InvalidArgument("non-finite operating point".into()));
    }
    p.validate()?;
    let x0 = x_op.to_vector();
    let u0 = u_op.to_vector();

    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for i in 0..STATE_DIM {
        let h = fd_step(x0[i]);
        let mut xp = x0;
        let mut xm = x0;
        xp[i] += h;
        xm[i] -= h;
        let col = (rk4_vector(&xp, &u0, p, dt) - rk4_vector(&xm, &u0, p, dt)) / (2.0 * h);
        a.column_mut(i).copy_from(&col);
    }
    let mut b = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    for j in 0..INPUT_DIM {
        let h = fd_step(u0[j]);
        let mut up = u0;
        let mut um = u0;
        up[j] += h;
        um[j] -= h;
        let col = (rk4_vector(&x0, &up, p, dt) - rk4_vector(&x0, &um, p, dt)) / (2.0 * h);
        b.column_mut(j).copy_from(&col);
    }
    let drift = rk4_vector(&x0, &u0, p, dt) - x0;
    Ok(Linearization {
        a,
        b,
        g: DVector::from_column_slice(drift.as_slice()),
    })
}

/// Exact zero-order-hold discretization of the translational double integrator,
/// state `(r, v)` and input `f`.
pub fn translational_lti(mass: f64, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::identity(6, 6);
    let mut b = DMatrix::zeros(6, 3);
    for i in 0..3 {
        a[(i, i + 3)] = dt;
        b[(i, i)] = 0.5 * dt * dt / mass;
        b[(i + 3, i)] = dt / mass;
    }
    (a, b)
}

/// Componentwise state difference `x - x_ref`, with the quaternion of `x`
/// flipped into the hemisphere of `x_ref`.
pub fn state_error(x: &State, x_ref: &State) -> StateVector {
    let mut aligned = *x;
    if x.q.dot(&x_ref.q) < 0.0 {
        aligned.q = -x.q;
    }
    aligned.to_vector() - x_ref.to_vector()
}

fn to_na(q: &Vector4<f64>) -> Quaternion<f64> {
    Quaternion::new(q[3], q[0], q[1], q[2])
}

fn from_na(q: &Quaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.i, q.j, q.k, q.w)
}

/// Hamilton product of scalar-last quaternions.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    from_na(&(to_na(a) * to_na(b)))
}

pub fn quat_conj(q: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(-q[0], -q[1], -q[2], q[3])
}

/// Unit quaternion of the rotation vector `phi`.
pub fn quat_exp(phi: &Vector3<f64>) -> Vector4<f64> {
    let angle = phi.norm();
    if angle < 1e-8 {
        let v = 0.5 * phi;
        let q = Vector4::new(v.x, v.y, v.z, 1.0);
        return q / q.norm();
    }
    let axis = phi / angle;
    let (s, c) = (0.5 * angle).sin_cos();
    Vector4::new(axis.x * s, axis.y * s, axis.z * s, c)
}

/// Rotation vector of a unit quaternion (shortest rotation).
pub fn quat_log(q: &Vector4<f64>) -> Vector3<f64> {
    let q = if q[3] < 0.0 { -q } else { *q };
    let v = Vector3::new(q[0], q[1], q[2]);
    let vn = v.norm();
    let angle = 2.0 * vn.atan2(q[3]);
    if angle < 1e-8 {
        return 2.0 * v;
    }
    v * (angle / vn)
}

/// `q [+] phi`: body-side rotation composition.
pub fn quat_boxplus(q: &Vector4<f64>, phi: &Vector3<f64>) -> Vector4<f64> {
    let out = quat_mul(q, &quat_exp(phi));
    out / out.norm()
}

/// `a [-] b`: rotation vector taking `b` to `a`.
pub fn quat_boxminus(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector3<f64> {
    quat_log(&quat_mul(&quat_conj(b), a))
}

/// State composition with a 12-dimensional tangent increment.
pub fn state_boxplus(x: &State, d: &TangentVector) -> State {
    State {
        r: x.r + d.fixed_rows::<3>(0),
        v: x.v + d.fixed_rows::<3>(3),
        q: quat_boxplus(&x.q, &d.fixed_rows::<3>(6).into()),
        w: x.w + d.fixed_rows::<3>(9),
    }
}

/// Tangent difference `a [-] b`.
pub fn state_boxminus(a: &State, b: &State) -> TangentVector {
    let mut d = TangentVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(a.r - b.r));
    d.fixed_rows_mut::<3>(3).copy_from(&(a.v - b.v));
    d.fixed_rows_mut::<3>(6).copy_from(&quat_boxminus(&a.q, &b.q));
    d.fixed_rows_mut::<3>(9).copy_from(&(a.w - b.w));
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_unit_quaternion(seed: [f64; 4]) -> Vector4<f64> {
        let q = Vector4::from(seed);
        q / q.norm()
    }

    #[test]
    fn rest_is_an_equilibrium() {
        let x = State::default();
        let dx = derivative(&x, &ControlInput::zero(), &InertialParams::ASTROBEE).unwrap();
        assert_eq!(dx, StateVector::zeros());
    }

    #[test]
    fn force_accelerates_by_inverse_mass() {
        let x = State::default();
        let u = ControlInput::force(Vector3::new(0.5, 0.0, 0.0));
        let dx = derivative(&x, &u, &InertialParams::ASTROBEE).unwrap();
        assert!(close(dx[3], 0.5 / 9.0877, 1e-15));
        assert!(close(dx[3], 0.055019, 1e-6));
        assert_eq!(dx[4], 0.0);
    }

    #[test]
    fn euler_equations_match_componentwise_oracle() {
        let p = InertialParams::new(1.0, Vector3::new(0.1454, 0.1366, 0.1594)).unwrap();
        let mut x = State::default();
        x.w = Vector3::new(0.1, 0.2, 0.3);
        let dx = derivative(&x, &ControlInput::zero(), &p).unwrap();
        let (ix, iy, iz) = (0.1454, 0.1366, 0.1594);
        let (wx, wy, wz) = (0.1, 0.2, 0.3);
        let expected = [
            (iy - iz) * wy * wz / ix,
            (iz - ix) * wz * wx / iy,
            (ix - iy) * wx * wy / iz,
        ];
        for k in 0..3 {
            assert!(close(dx[10 + k], expected[k], 1e-15), "{k}");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = State::default();
        let u = ControlInput::force(Vector3::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(
            derivative(&x, &u, &InertialParams::ASTROBEE),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn xi_identity_and_axis_cases() {
        let xi = xi_matrix(&identity_quaternion());
        let expected = Matrix4x3::new(1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0.);
        assert_eq!(xi, expected);
        let xi = xi_matrix(&Vector4::new(1.0, 0.0, 0.0, 0.0));
        let expected = Matrix4x3::new(0., 0., 0., 0., 0., -1., 0., 1., 0., -1., 0., 0.);
        assert_eq!(xi, expected);
    }

    #[test]
    fn rk4_rejects_bad_step() {
        let x = State::default();
        let p = InertialParams::ASTROBEE;
        assert!(step_rk4(&x, &ControlInput::zero(), &p, 0.0).is_err());
        assert!(step_rk4(&x, &ControlInput::zero(), &p, -0.1).is_err());
    }

    #[test]
    fn rk4_equilibrium_and_constant_force() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let x = State::default();
        assert_eq!(step_rk4(&x, &ControlInput::zero(), &p, 0.1).unwrap(), x);

        let u = ControlInput::force(Vector3::new(0.5, 0.0, 0.0));
        let next = step_rk4(&x, &u, &p, 1.0).unwrap();
        assert!(close(next.v.x, 0.5 / 15.0, 1e-14));
        assert!(close(next.r.x, 0.25 / 15.0, 1e-14));
        assert!(close(next.v.x, 0.03333, 1e-5));
        assert!(close(next.r.x, 0.01667, 1e-5));
    }

    #[test]
    fn torque_free_principal_spin_keeps_rate() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let mut x = State::default();
        x.w = Vector3::new(0.0, 0.0, 0.4);
        let w0 = x.w.norm();
        for _ in 0..100 {
            x = step_rk4(&x, &ControlInput::zero(), &p, 0.1).unwrap();
            assert!((x.w.norm() - w0).abs() <= 1e-9);
            assert!((x.q.norm() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn tumbling_conserves_energy_and_momentum() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let mut x = State::default();
        x.w = Vector3::new(0.3, -0.2, 0.25);
        let energy = |x: &State| 0.5 * x.w.dot(&p.inertia.component_mul(&x.w));
        let momentum = |x: &State| p.inertia.component_mul(&x.w).norm();
        let (e0, h0) = (energy(&x), momentum(&x));
        for _ in 0..100 {
            x = step_rk4(&x, &ControlInput::zero(), &p, 0.1).unwrap();
        }
        assert!(((energy(&x) - e0) / e0).abs() <= 1e-7);
        assert!(((momentum(&x) - h0) / h0).abs() <= 1e-7);
    }

    #[test]
    fn zero_input_translation_is_linear() {
        let p = InertialParams::ASTROBEE;
        let mut x = State::default();
        x.r = Vector3::new(0.3, -1.0, 2.0);
        x.v = Vector3::new(0.05, 0.02, -0.04);
        let (r0, v0) = (x.r, x.v);
        for k in 1..=50 {
            x = step_rk4(&x, &ControlInput::zero(), &p, 0.2).unwrap();
            let t = 0.2 * k as f64;
            assert!((x.r - (r0 + v0 * t)).norm() < 1e-12);
        }
    }

    #[test]
    fn translational_block_is_exact_double_integrator() {
        let p = InertialParams::ASTROBEE;
        let dt = 0.2;
        let mut x = State::default();
        x.v = Vector3::new(0.1, 0.0, -0.05);
        x.w = Vector3::new(0.05, 0.1, 0.0);
        x.q = random_unit_quaternion([0.2, -0.4, 0.1, 0.9]);
        let u = ControlInput {
            f: Vector3::new(0.1, -0.2, 0.3),
            tau: Vector3::new(0.01, 0.0, -0.02),
        };
        let lin = linearize_discretize(&x, &u, &p, dt).unwrap();
        let (at, bt) = translational_lti(p.mass, dt);
        for i in 0..6 {
            for j in 0..6 {
                assert!((lin.a[(i, j)] - at[(i, j)]).abs() < 1e-8, "A[{i},{j}]");
            }
            for j in 0..3 {
                assert!((lin.b[(i, j)] - bt[(i, j)]).abs() < 1e-8, "B[{i},{j}]");
            }
        }
    }

    #[test]
    fn affine_residual_reproduces_step_at_operating_point() {
        let p = InertialParams::ASTROBEE;
        let x = State::default();
        let u = ControlInput::zero();
        let lin = linearize_discretize(&x, &u, &p, 0.2).unwrap();
        let predicted = x.to_vector() + StateVector::from_column_slice(lin.g.as_slice());
        let actual = step_rk4(&x, &u, &p, 0.2).unwrap().to_vector();
        assert_eq!(predicted, actual);
    }

    fn linearization_error(x: &State, u: &ControlInput, lin: &Linearization, dx: &StateVector, du: &InputVector) -> f64 {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let dt = 0.2;
        let xp = State::from_vector(&(x.to_vector() + dx));
        let up = ControlInput::from_vector(&(u.to_vector() + du));
        let actual = rk4_vector(&xp.to_vector(), &up.to_vector(), &p, dt);
        let dxd = DVector::from_column_slice(dx.as_slice());
        let dud = DVector::from_column_slice(du.as_slice());
        let pred = DVector::from_column_slice(x.to_vector().as_slice()) + &lin.a * dxd + &lin.b * dud + &lin.g;
        (DVector::from_column_slice(actual.as_slice()) - pred).norm()
    }

    #[test]
    fn linearization_error_is_second_order() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let mut x = State::default();
        x.v = Vector3::new(0.1, 0.05, 0.0);
        x.w = Vector3::new(0.2, -0.3, 0.15);
        x.q = random_unit_quaternion([0.3, 0.1, -0.5, 0.8]);
        let u = ControlInput {
            f: Vector3::new(0.2, 0.1, -0.3),
            tau: Vector3::new(0.02, -0.01, 0.03),
        };
        let lin = linearize_discretize(&x, &u, &p, 0.2).unwrap();
        let dx = StateVector::from_fn(|i, _| 0.02 * ((i as f64 * 1.7).sin()));
        let du = InputVector::from_fn(|i, _| 0.05 * ((i as f64 * 0.9).cos()));
        let e1 = linearization_error(&x, &u, &lin, &dx, &du);
        let e2 = linearization_error(&x, &u, &lin, &(dx * 0.5), &(du * 0.5));
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn jacobian_matches_independent_forward_stencil() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let dt = 0.2;
        let mut x = State::default();
        x.w = Vector3::new(0.2, -0.1, 0.3);
        x.q = random_unit_quaternion([0.1, 0.7, -0.2, 0.6]);
        let u = ControlInput {
            f: Vector3::new(0.1, 0.0, 0.2),
            tau: Vector3::new(0.01, 0.03, 0.0),
        };
        let lin = linearize_discretize(&x, &u, &p, dt).unwrap();
        let x0 = x.to_vector();
        let u0 = u.to_vector();
        // Fourth-order five-point stencil with a different step.
        let h = 1e-3;
        for i in 0..STATE_DIM {
            let eval = |s: f64| {
                let mut xp = x0;
                xp[i] += s;
                rk4_vector(&xp, &u0, &p, dt)
            };
            let col = (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h);
            for r in 0..STATE_DIM {
                let a = lin.a[(r, i)];
                assert!((a - col[r]).abs() <= 1e-6 * a.abs().max(1.0), "A[{r},{i}] {a} vs {}", col[r]);
            }
        }
    }

    #[test]
    fn boxplus_boxminus_roundtrip() {
        let q = random_unit_quaternion([0.3, -0.2, 0.5, 0.7]);
        let phi = Vector3::new(0.1, -0.4, 0.25);
        let q2 = quat_boxplus(&q, &phi);
        assert!((quat_boxminus(&q2, &q) - phi).norm() < 1e-12);
        assert!((quat_log(&quat_exp(&Vector3::new(1e-10, 0.0, 0.0))).x - 1e-10).abs() < 1e-20);
    }

    #[test]
    fn triangle_inequality_enforced() {
        assert!(InertialParams::new(1.0, Vector3::new(0.1, 0.1, 0.3)).is_err());
        assert!(InertialParams::new(-1.0, Vector3::new(0.1, 0.1, 0.1)).is_err());
        assert!(InertialParams::ASTROBEE.validate().is_ok());
        assert!(InertialParams::ASTROBEE_WITH_OBJECT.validate().is_ok());
    }

    proptest! {
        #[test]
        fn xi_has_orthonormal_columns(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, d in -1.0..1.0f64) {
            let n = (a * a + b * b + c * c + d * d).sqrt();
            prop_assume!(n > 1e-3);
            let q = Vector4::new(a, b, c, d) / n;
            let xi = xi_matrix(&q);
            let gram = xi.transpose() * xi;
            prop_assert!((gram - nalgebra::Matrix3::identity()).abs().max() <= 1e-12);
        }

        #[test]
        fn quaternion_stays_unit(wx in -1.0..1.0f64, wy in -1.0..1.0f64, wz in -1.0..1.0f64, tz in -0.1..0.1f64) {
            let p = InertialParams::ASTROBEE;
            let mut x = State::default();
            x.w = Vector3::new(wx, wy, wz);
            let u = ControlInput { f: Vector3::zeros(), tau: Vector3::new(0.0, 0.0, tz) };
            for _ in 0..20 {
                x = step_rk4(&x, &u, &p, 0.1).unwrap();
                prop_assert!((x.q.norm() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
