//! Batch maximum-likelihood estimation of the inertial parameters and the
//! smoothed state history from pose measurements and known inputs.
//!
//! The unknowns are the tangent increments of every state plus the parameter
//! vector `(m, Ixx, Iyy, Izz)`. Residuals are whitened pose misfits and
//! whitened one-step dynamics defects. The normal matrix is block tridiagonal
//! in the states with a dense parameter border, and is solved by block
//! Cholesky plus a Schur complement on the parameters.

use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, SVector, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    quat_boxminus, quat_boxplus, state_boxminus, state_boxplus, step_fast, ControlInput,
    InertialParams, State, TANGENT_DIM,
};
use crate::error::{Error, Result};
use crate::excitation::PoseNoise;
use crate::trajectory::Trajectory;
use crate::tube_mpc::MassBelief;

pub const PARAMETER_NAMES: [&str; 4] = ["mass", "Ixx", "Iyy", "Izz"];

type Mat12 = SMatrix<f64, 12, 12>;
type Mat6x12 = SMatrix<f64, 6, 12>;
type Mat12x4 = SMatrix<f64, 12, 4>;
type Vec12 = SVector<f64, 12>;
type Vec6 = SVector<f64, 6>;

/// Pose measurements at every state of a trajectory plus the applied inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSequence {
    pub t0: f64,
    pub dt: f64,
    pub positions: Vec<Vector3<f64>>,
    pub attitudes: Vec<Vector4<f64>>,
    pub noise: PoseNoise,
    pub inputs: Vec<ControlInput>,
}

impl MeasurementSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        let n = self.positions.len();
        if n < 2 || self.attitudes.len() != n || self.inputs.len() + 1 != n {
            return Err(Error::DimensionMismatch(format!(
                "{} positions, {} attitudes and {} inputs",
                n,
                self.attitudes.len(),
                self.inputs.len()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("measurement spacing must be positive".into()));
        }
        if self.attitudes.iter().any(|q| (q.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidArgument("measured quaternions must be unit norm".into()));
        }
        Ok(())
    }
}

/// Noise-free measurements of every state of `traj`.
pub fn exact_measurements(traj: &Trajectory, noise: &PoseNoise) -> MeasurementSequence {
    MeasurementSequence {
        t0: traj.t0,
        dt: traj.dt,
        positions: traj.states.iter().map(|s| s.r).collect(),
        attitudes: traj.states.iter().map(|s| s.q).collect(),
        noise: *noise,
        inputs: traj.inputs.clone(),
    }
}

/// Measurements with Gaussian position noise and small random body-side
/// attitude perturbations.
pub fn simulate_measurements<R: Rng>(traj: &Trajectory, noise: &PoseNoise, rng: &mut R) -> MeasurementSequence {
    let mut data = exact_measurements(traj, noise);
    for (p, q) in data.positions.iter_mut().zip(data.attitudes.iter_mut()) {
        *p += Vector3::from_fn(|_, _| noise.position * rng.sample::<f64, _>(StandardNormal));
        let phi = Vector3::from_fn(|_, _| noise.attitude * rng.sample::<f64, _>(StandardNormal));
        *q = quat_boxplus(q, &phi);
    }
    data
}

/// Linearization point: one state per measurement and the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Nominal {
    pub states: Vec<State>,
    pub theta: InertialParams,
}

impl Nominal {
    /// Poses from the measurements, rates from finite differences.
    pub fn from_measurements(data: &MeasurementSequence, theta: InertialParams) -> Self {
        let n = data.len();
        let states = (0..n)
            .map(|k| {
                let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
                State {
                    r: data.positions[k],
                    v: (data.positions[b] - data.positions[a]) / data.dt,
                    q: data.attitudes[k],
                    w: quat_boxminus(&data.attitudes[b], &data.attitudes[a]) / data.dt,
                }
            })
            .collect();
        Self { states, theta }
    }

    fn apply(&self, dx: &DVector<f64>, scale: f64) -> Option<Nominal> {
        let n = self.states.len();
        let states = (0..n)
            .map(|k| {
                let d: Vec12 = Vec12::from_column_slice(&dx.as_slice()[12 * k..12 * k + 12]) * scale;
                state_boxplus(&self.states[k], &d)
            })
            .collect();
        let dtheta = Vector4::from_column_slice(&dx.as_slice()[12 * n..12 * n + 4]) * scale;
        let theta = InertialParams::from_vector(&(self.theta.to_vector() + dtheta));
        theta.validate().ok()?;
        Some(Nominal { states, theta })
    }
}

/// Whitened residuals and their Jacobian blocks at a linearization point.
///
/// Rows: `6 (N+1)` measurement rows (state `k` at rows `6k..6k+6`), then
/// `12 N` dynamics rows. Columns: 12 per state, then 4 for the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSystem {
    pub residual: DVector<f64>,
    /// d(measurement k)/d(state k).
    pub meas: Vec<Mat6x12>,
    /// d(dynamics k)/d(state k).
    pub dyn_prev: Vec<Mat12>,
    /// d(dynamics k)/d(state k+1).
    pub dyn_next: Vec<Mat12>,
    /// d(dynamics k)/d(theta).
    pub dyn_theta: Vec<Mat12x4>,
}

pub const DEFAULT_PROCESS_SIGMA: f64 = 1e-6;

const FD_STATE: f64 = 1e-6;
const FD_THETA_REL: f64 = 1e-6;

fn meas_residual(x: &State, data: &MeasurementSequence, k: usize) -> Vec6 {
    let mut r = Vec6::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&((x.r - data.positions[k]) / data.noise.position));
    r.fixed_rows_mut::<3>(3)
        .copy_from(&(quat_boxminus(&x.q, &data.attitudes[k]) / data.noise.attitude));
    r
}

fn dyn_residual(x: &State, next: &State, u: &ControlInput, theta: &InertialParams, dt: f64, sigma: f64) -> Vec12 {
    state_boxminus(next, &step_fast(x, u, theta, dt)) / sigma
}

fn unit(i: usize) -> Vec12 {
    let mut e = Vec12::zeros();
    e[i] = 1.0;
    e
}

impl NormalSystem {
    pub fn num_states(&self) -> usize {
        self.meas.len()
    }

    pub fn num_unknowns(&self) -> usize {
        TANGENT_DIM * self.num_states() + 4
    }

    pub fn cost(&self) -> f64 {
        self.residual.norm()
    }

    /// Dense Jacobian `A` and residual `b`, so that `b + A d` is the
    /// linearized residual.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.num_states();
        let rows = self.residual.len();
        let mut a = DMatrix::zeros(rows, self.num_unknowns());
        for k in 0..n {
            a.fixed_view_mut::<6, 12>(6 * k, 12 * k).copy_from(&self.meas[k]);
        }
        let base = 6 * n;
        for k in 0..n - 1 {
            let r = base + 12 * k;
            a.fixed_view_mut::<12, 12>(r, 12 * k).copy_from(&self.dyn_prev[k]);
            a.fixed_view_mut::<12, 12>(r, 12 * (k + 1)).copy_from(&self.dyn_next[k]);
            a.fixed_view_mut::<12, 4>(r, 12 * n).copy_from(&self.dyn_theta[k]);
        }
        (a, self.residual.clone())
    }
}

/// Residuals and finite-difference Jacobians about `nominal`.
pub fn build_normal_system(nominal: &Nominal, data: &MeasurementSequence, process_sigma: f64) -> Result<NormalSystem> {
    data.validate()?;
    nominal.theta.validate()?;
    let n = data.len();
    if nominal.states.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} nominal states for {} measurements",
            nominal.states.len(),
            n
        )));
    }
    if !(process_sigma > 0.0) {
        return Err(Error::InvalidArgument("process noise must be positive".into()));
    }
    let mut residual = DVector::zeros(6 * n + 12 * (n - 1));
    let mut meas = Vec::with_capacity(n);
    for (k, x) in nominal.states.iter().enumerate() {
        residual.fixed_rows_mut::<6>(6 * k).copy_from(&meas_residual(x, data, k));
        let mut j = Mat6x12::zeros();
        for i in 0..12 {
            let p = meas_residual(&state_boxplus(x, &(unit(i) * FD_STATE)), data, k);
            let m = meas_residual(&state_boxplus(x, &(unit(i) * -FD_STATE)), data, k);
            j.set_column(i, &((p - m) / (2.0 * FD_STATE)));
        }
        meas.push(j);
    }

    let theta = nominal.theta;
    let tv = theta.to_vector();
    let (dt, s) = (data.dt, process_sigma);
    let mut dyn_prev = Vec::with_capacity(n - 1);
    let mut dyn_next = Vec::with_capacity(n - 1);
    let mut dyn_theta = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let (x, next, u) = (&nominal.states[k], &nominal.states[k + 1], &data.inputs[k]);
        residual
            .fixed_rows_mut::<12>(6 * n + 12 * k)
            .copy_from(&dyn_residual(x, next, u, &theta, dt, s));
        let mut jp = Mat12::zeros();
        let mut jn = Mat12::zeros();
        for i in 0..12 {
            let e = unit(i) * FD_STATE;
            let xp = state_boxplus(x, &e);
            let xm = state_boxplus(x, &-e);
            jp.set_column(
                i,
                &((dyn_residual(&xp, next, u, &theta, dt, s) - dyn_residual(&xm, next, u, &theta, dt, s)) / (2.0 * FD_STATE)),
            );
            let np = state_boxplus(next, &e);
            let nm = state_boxplus(next, &-e);
            jn.set_column(
                i,
                &((dyn_residual(x, &np, u, &theta, dt, s) - dyn_residual(x, &nm, u, &theta, dt, s)) / (2.0 * FD_STATE)),
            );
        }
        let mut jt = Mat12x4::zeros();
        for i in 0..4 {
            let h = FD_THETA_REL * tv[i];
            let mut tp = tv;
            let mut tm = tv;
            tp[i] += h;
            tm[i] -= h;
            let rp = dyn_residual(x, next, u, &InertialParams::from_vector(&tp), dt, s);
            let rm = dyn_residual(x, next, u, &InertialParams::from_vector(&tm), dt, s);
            jt.set_column(i, &((rp - rm) / (2.0 * h)));
        }
        dyn_prev.push(jp);
        dyn_next.push(jn);
        dyn_theta.push(jt);
    }
    Ok(NormalSystem {
        residual,
        meas,
        dyn_prev,
        dyn_next,
        dyn_theta,
    })
}

/// Gauss-Newton step `-(A'A)^-1 A'b` and the parameter block of `(A'A)^-1`.
struct Solved {
    step: DVector<f64>,
    theta_cov: Matrix4<f64>,
}

fn solve_normal(sys: &NormalSystem) -> Result<Solved> {
    let n = sys.num_states();
    // Normal blocks: diagonal D_k, sub-diagonal E_k = M[k+1][k], border B_k, corner T.
    let mut d: Vec<Mat12> = sys.meas.iter().map(|j| j.transpose() * j).collect();
    let mut e: Vec<Mat12> = Vec::with_capacity(n - 1);
    let mut b: Vec<Mat12x4> = vec![Mat12x4::zeros(); n];
    let mut t = Matrix4::zeros();
    let mut gx: Vec<Vec12> = (0..n)
        .map(|k| sys.meas[k].transpose() * sys.residual.fixed_rows::<6>(6 * k))
        .collect();
    let mut gt = Vector4::zeros();
    for k in 0..n - 1 {
        let r = sys.residual.fixed_rows::<12>(6 * n + 12 * k);
        let (p, q, th) = (&sys.dyn_prev[k], &sys.dyn_next[k], &sys.dyn_theta[k]);
        d[k] += p.transpose() * p;
        d[k + 1] += q.transpose() * q;
        e.push(q.transpose() * p);
        b[k] += p.transpose() * th;
        b[k + 1] += q.transpose() * th;
        t += th.transpose() * th;
        gx[k] += p.transpose() * r;
        gx[k + 1] += q.transpose() * r;
        gt += th.transpose() * r;
    }

    // Block Cholesky of the state part: L_kk L_kk' = D_k - L_k,k-1 L_k,k-1'.
    let mut diag: Vec<nalgebra::Cholesky<f64, nalgebra::Const<12>>> = Vec::with_capacity(n);
    let mut sub: Vec<Mat12> = Vec::with_capacity(n - 1);
    for k in 0..n {
        let mut dk = d[k];
        if k > 0 {
            let l: &Mat12 = &sub[k - 1];
            dk -= l * l.transpose();
        }
        let dk = 0.5 * (dk + dk.transpose());
        let chol = dk.cholesky().ok_or_else(|| {
            Error::Unidentifiable(vec![format!("state {k}")])
        })?;
        if k + 1 < n {
            // L_{k+1,k} = E_k L_kk^-T
            let lt = chol.l().transpose();
            let l_next = lt
                .transpose()
                .solve_lower_triangular(&e[k].transpose())
                .expect("triangular factor is nonsingular")
                .transpose();
            sub.push(l_next);
        }
        diag.push(chol);
    }

    // Solve M X = R for a block column of right-hand sides.
    let solve_m = |rhs: &[SMatrix<f64, 12, 5>]| -> Vec<SMatrix<f64, 12, 5>> {
        let mut y: Vec<SMatrix<f64, 12, 5>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut r = rhs[k];
            if k > 0 {
                r -= sub[k - 1] * y[k - 1];
            }
            y.push(diag[k].l().solve_lower_triangular(&r).expect("nonsingular"));
        }
        let mut z = vec![SMatrix::<f64, 12, 5>::zeros(); n];
        for k in (0..n).rev() {
            let mut r = y[k];
            if k + 1 < n {
                r -= sub[k].transpose() * z[k + 1];
            }
            z[k] = diag[k].l().transpose().solve_upper_triangular(&r).expect("nonsingular");
        }
        z
    };
    let rhs: Vec<SMatrix<f64, 12, 5>> = (0..n)
        .map(|k| {
            let mut m = SMatrix::<f64, 12, 5>::zeros();
            m.fixed_columns_mut::<4>(0).copy_from(&b[k]);
            m.set_column(4, &gx[k]);
            m
        })
        .collect();
    let z = solve_m(&rhs);

    // Schur complement S = T - B' M^-1 B and reduced gradient.
    let mut schur = t;
    let mut g_red = gt;
    for k in 0..n {
        let minv_b = z[k].fixed_columns::<4>(0);
        let minv_g = z[k].column(4);
        schur -= b[k].transpose() * minv_b;
        g_red -= b[k].transpose() * minv_g;
    }
    let schur = 0.5 * (schur + schur.transpose());
    check_rank(&schur)?;
    let schur_chol = schur.cholesky().ok_or_else(|| Error::Unidentifiable(PARAMETER_NAMES.iter().map(|s| s.to_string()).collect()))?;
    let dtheta = -schur_chol.solve(&g_red);

    let mut step = DVector::zeros(12 * n + 4);
    for k in 0..n {
        // dx = -M^-1 (g_x + B dtheta)
        let dx = -(z[k].column(4) + z[k].fixed_columns::<4>(0) * dtheta);
        step.fixed_rows_mut::<12>(12 * k).copy_from(&dx);
    }
    step.fixed_rows_mut::<4>(12 * n).copy_from(&dtheta);
    let cov = schur_chol.inverse();
    Ok(Solved {
        step,
        theta_cov: 0.5 * (cov + cov.transpose()),
    })
}

/// Flags parameters with no information, or spanning a null direction of the
/// diagonally scaled parameter information.
fn check_rank(schur: &Matrix4<f64>) -> Result<()> {
    let scale_ref = schur.diagonal().amax();
    let mut flagged = Vec::new();
    let mut scale = Vector4::zeros();
    for i in 0..4 {
        let di = schur[(i, i)];
        if !(di > 1e-12 * scale_ref) {
            flagged.push(i);
        } else {
            scale[i] = 1.0 / di.sqrt();
        }
    }
    if flagged.is_empty() {
        let corr = Matrix4::from_fn(|r, c| schur[(r, c)] * scale[r] * scale[c]);
        let eig = corr.symmetric_eigen();
        for (j, &l) in eig.eigenvalues.iter().enumerate() {
            if l < 1e-10 {
                let v = eig.eigenvectors.column(j);
                for i in 0..4 {
                    if v[i].abs() > 0.1 && !flagged.contains(&i) {
                        flagged.push(i);
                    }
                }
            }
        }
    }
    if flagged.is_empty() {
        return Ok(());
    }
    flagged.sort_unstable();
    Err(Error::Unidentifiable(
        flagged.into_iter().map(|i| PARAMETER_NAMES[i].to_string()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: InertialParams,
    pub theta_cov: Matrix4<f64>,
    pub state_hat: Trajectory,
    /// Whitened residual norm before the first and after every accepted step.
    pub iteration_costs: Vec<f64>,
    /// Parameter iterates aligned with `iteration_costs`.
    pub theta_history: Vec<InertialParams>,
    /// Parameter variances at each iterate.
    pub variance_history: Vec<Vector4<f64>>,
}

impl EstimationResult {
    pub fn mass_sigma(&self) -> f64 {
        self.theta_cov[(0, 0)].sqrt()
    }

    pub fn mass_belief(&self) -> Result<MassBelief> {
        MassBelief::new(self.theta_hat.mass, self.mass_sigma())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub max_iterations: usize,
    pub process_sigma: f64,
    /// Stop once the relative change of the residual norm falls below this.
    pub rel_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            process_sigma: DEFAULT_PROCESS_SIGMA,
            rel_tol: 1e-8,
        }
    }
}

/// Damped Gauss-Newton from measurement-initialized states and `theta0`.
pub fn batch_estimate(
    data: &MeasurementSequence,
    theta0: &InertialParams,
    cfg: &EstimatorConfig,
) -> Result<EstimationResult> {
    data.validate()?;
    theta0.validate()?;
    let mut nominal = Nominal::from_measurements(data, *theta0);
    let mut sys = build_normal_system(&nominal, data, cfg.process_sigma)?;
    let mut costs = vec![sys.cost()];
    let mut solved = solve_normal(&sys)?;
    let mut thetas = vec![nominal.theta];
    let mut variances = vec![solved.theta_cov.diagonal()];
    for _ in 0..cfg.max_iterations {
        let current = sys.cost();
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..30 {
            if let Some(candidate) = nominal.apply(&solved.step, scale) {
                let cand_sys = build_normal_system(&candidate, data, cfg.process_sigma)?;
                if cand_sys.cost() < current {
                    accepted = Some((candidate, cand_sys));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((next, next_sys)) = accepted else {
            break;
        };
        nominal = next;
        sys = next_sys;
        costs.push(sys.cost());
        solved = solve_normal(&sys)?;
        thetas.push(nominal.theta);
        variances.push(solved.theta_cov.diagonal());
        if (current - sys.cost()) <= cfg.rel_tol * current {
            break;
        }
    }
    let state_hat = Trajectory {
        t0: data.t0,
        dt: data.dt,
        states: nominal.states,
        inputs: data.inputs.clone(),
    };
    Ok(EstimationResult {
        theta_hat: nominal.theta,
        theta_cov: solved.theta_cov,
        state_hat,
        iteration_costs: costs,
        theta_history: thetas,
        variance_history: variances,
    })
}
