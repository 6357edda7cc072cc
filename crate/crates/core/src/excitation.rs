//! Fisher information of inertial parameters along a trajectory and A-optimal
//! excitation design between two rest states.

use nalgebra::{DMatrix, DVector, Matrix4, Matrix6x4, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::Aabb;
use crate::dynamics::{
    quat_boxminus, step_fast, ControlInput, InertialParams, State, INPUT_DIM,
};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use crate::tube_mpc::qp::{solve_qp, QpProblem};

/// Independent Gaussian noise on position (m) and attitude (rad) measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise {
    pub position: f64,
    pub attitude: f64,
}

impl Default for PoseNoise {
    fn default() -> Self {
        Self {
            position: 0.005,
            attitude: 0.5_f64.to_radians(),
        }
    }
}

impl PoseNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.position > 0.0 && self.attitude > 0.0 && self.position.is_finite() && self.attitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "measurement noise must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    fn weights(&self) -> SVector<f64, 6> {
        let p = self.position.powi(-2);
        let a = self.attitude.powi(-2);
        SVector::<f64, 6>::from_column_slice(&[p, p, p, a, a, a])
    }
}

/// Information about `(m, Ixx, Iyy, Izz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherInfo {
    pub matrix: Matrix4<f64>,
}

impl FisherInfo {
    pub fn zeros() -> Self {
        Self {
            matrix: Matrix4::zeros(),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.symmetric_eigenvalues().min()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.matrix - self.matrix.transpose()).amax() <= tol
    }
}

impl std::ops::Add for FisherInfo {
    type Output = FisherInfo;
    fn add(self, rhs: FisherInfo) -> FisherInfo {
        FisherInfo {
            matrix: self.matrix + rhs.matrix,
        }
    }
}

impl std::ops::AddAssign for FisherInfo {
    fn add_assign(&mut self, rhs: FisherInfo) {
        self.matrix += rhs.matrix;
    }
}

impl std::iter::Sum for FisherInfo {
    fn sum<I: Iterator<Item = FisherInfo>>(iter: I) -> FisherInfo {
        iter.fold(FisherInfo::zeros(), |a, b| a + b)
    }
}

pub const DEFAULT_SENSITIVITY_STEP: f64 = 1e-5;

/// Sensitivity of the one-step pose prediction to each parameter, by central
/// differences with the given relative step. Rows are position then the
/// attitude rotation vector relative to the nominal prediction.
pub fn pose_sensitivity(
    x: &State,
    u: &ControlInput,
    theta: &InertialParams,
    dt: f64,
    rel_step: f64,
) -> Result<Matrix6x4<f64>> {
    theta.validate()?;
    if !(rel_step > 0.0 && rel_step < 0.1) {
        return Err(Error::InvalidArgument(format!("relative step {rel_step} out of range")));
    }
    let nominal = crate::dynamics::step_rk4(x, u, theta, dt)?;
    let base = theta.to_vector();
    let mut j = Matrix6x4::zeros();
    for i in 0..4 {
        let h = rel_step * base[i];
        let mut tp = base;
        let mut tm = base;
        tp[i] += h;
        tm[i] -= h;
        let xp = step_fast(x, u, &InertialParams::from_vector(&tp), dt);
        let xm = step_fast(x, u, &InertialParams::from_vector(&tm), dt);
        let dr = (xp.r - xm.r) / (2.0 * h);
        let da = (quat_boxminus(&xp.q, &nominal.q) - quat_boxminus(&xm.q, &nominal.q)) / (2.0 * h);
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&dr);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&da);
    }
    Ok(j)
}

/// Information contributed by one measured step, `J' Sigma^-1 J`.
pub fn fim_step(
    x: &State,
    u: &ControlInput,
    theta: &InertialParams,
    noise: &PoseNoise,
    dt: f64,
) -> Result<FisherInfo> {
    noise.validate()?;
    let j = pose_sensitivity(x, u, theta, dt, DEFAULT_SENSITIVITY_STEP)?;
    let wj = Matrix6x4::from_fn(|r, c| noise.weights()[r] * j[(r, c)]);
    let m = j.transpose() * wj;
    let matrix = 0.5 * (m + m.transpose());
    if !matrix.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite information increment".into()));
    }
    Ok(FisherInfo { matrix })
}

/// Sum of per-step information over every input of the trajectory.
pub fn total_fim(traj: &Trajectory, theta: &InertialParams, noise: &PoseNoise) -> Result<FisherInfo> {
    if traj.steps() == 0 {
        return Err(Error::InvalidArgument("trajectory has no steps".into()));
    }
    let mut total = FisherInfo::zeros();
    for (x, u) in traj.states.iter().zip(&traj.inputs) {
        total += fim_step(x, u, theta, noise, traj.dt)?;
    }
    Ok(total)
}

pub const DEFAULT_RIDGE: f64 = 1e-9;

/// `tr((F + ridge I)^-1)`.
pub fn a_optimality_cost(f: &FisherInfo, ridge: f64) -> Result<f64> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument("ridge must be non-negative".into()));
    }
    let reg = f.matrix + Matrix4::identity() * ridge;
    let chol = reg.cholesky().ok_or(Error::SingularInformation)?;
    let inv = chol.inverse();
    let tr = inv.trace();
    if !(tr.is_finite() && tr > 0.0) {
        return Err(Error::SingularInformation);
    }
    Ok(tr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub horizon: usize,
    pub dt: f64,
    pub force_max: f64,
    pub torque_max: f64,
    pub noise: PoseNoise,
    pub start: State,
    pub goal: State,
    /// Obstacle-free box the excitation must stay in.
    pub region: Aabb,
    pub ridge: f64,
    /// Weight on boundary residuals and region violations.
    pub penalty: f64,
    /// Endpoint tolerance on every state component.
    pub boundary_tol: f64,
    pub max_iterations: usize,
    /// Stop once the relative cost improvement falls below this.
    pub rel_tol: f64,
    /// Seed dither amplitude as a fraction of the input limits.
    pub dither: f64,
    pub rng_seed: u64,
}

impl ExcitationConfig {
    pub fn new(start: State, goal: State, region: Aabb) -> Self {
        Self {
            horizon: 40,
            dt: 0.5,
            force_max: 0.4,
            torque_max: 0.05,
            noise: PoseNoise::default(),
            start,
            goal,
            region,
            ridge: DEFAULT_RIDGE,
            penalty: 1e4,
            boundary_tol: 1e-6,
            max_iterations: 60,
            rel_tol: 1e-6,
            dither: 0.05,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.horizon < 2 {
            return Err(Error::InvalidArgument("excitation horizon must be at least 2".into()));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("force_max", self.force_max),
            ("torque_max", self.torque_max),
            ("penalty", self.penalty),
            ("boundary_tol", self.boundary_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dither) {
            return Err(Error::InvalidArgument("dither must lie in [0, 1)".into()));
        }
        for (name, s) in [("start", &self.start), ("goal", &self.goal)] {
            if !s.is_finite() || !self.region.contains(&s.r) {
                return Err(Error::Precondition(format!("excitation {name} is outside the safe region")));
            }
        }
        Ok(())
    }

    fn limit(&self, i: usize) -> f64 {
        if i % INPUT_DIM < 3 {
            self.force_max
        } else {
            self.torque_max
        }
    }

    fn n_vars(&self) -> usize {
        self.horizon * INPUT_DIM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationResult {
    pub trajectory: Trajectory,
    pub seed: Trajectory,
    pub cost: f64,
    pub seed_cost: f64,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
}

fn unpack(u: &[f64]) -> Vec<ControlInput> {
    u.chunks(INPUT_DIM)
        .map(|c| ControlInput {
            f: Vector3::new(c[0], c[1], c[2]),
            tau: Vector3::new(c[3], c[4], c[5]),
        })
        .collect()
}

fn pack(inputs: &[ControlInput]) -> Vec<f64> {
    inputs
        .iter()
        .flat_map(|u| u.to_vector().iter().copied().collect::<Vec<_>>())
        .collect()
}

fn rollout(cfg: &ExcitationConfig, theta: &InertialParams, u: &[f64]) -> Trajectory {
    Trajectory::rollout(cfg.start, unpack(u), theta, cfg.dt)
}

/// Endpoint residual `(r, v, attitude, rate)` against the goal.
pub fn boundary_residual(end: &State, goal: &State) -> SVector<f64, 12> {
    let mut res = SVector::<f64, 12>::zeros();
    res.fixed_rows_mut::<3>(0).copy_from(&(end.r - goal.r));
    res.fixed_rows_mut::<3>(3).copy_from(&(end.v - goal.v));
    res.fixed_rows_mut::<3>(6).copy_from(&quat_boxminus(&end.q, &goal.q));
    res.fixed_rows_mut::<3>(9).copy_from(&(end.w - goal.w));
    res
}

fn region_violation(traj: &Trajectory, region: &Aabb) -> f64 {
    traj.states
        .iter()
        .map(|s| {
            let below = (region.min - s.r).map(|d| d.max(0.0));
            let above = (s.r - region.max).map(|d| d.max(0.0));
            below.norm_squared() + above.norm_squared()
        })
        .sum()
}

fn objective(cfg: &ExcitationConfig, theta: &InertialParams, u: &[f64]) -> Result<f64> {
    let traj = rollout(cfg, theta, u);
    let f = total_fim(&traj, theta, &cfg.noise)?;
    let bc = boundary_residual(traj.final_state(), &cfg.goal).norm_squared();
    Ok(a_optimality_cost(&f, cfg.ridge)? + cfg.penalty * (bc + region_violation(&traj, &cfg.region)))
}

const FD_STEP: f64 = 1e-6;

/// Minimum weighted-norm correction of `u` that satisfies the boundary
/// conditions within the input box, by Newton steps on the endpoint residual.
fn repair(cfg: &ExcitationConfig, theta: &InertialParams, u: &[f64]) -> Result<Vec<f64>> {
    let n = cfg.n_vars();
    let mut u = u.to_vec();
    for i in 0..n {
        u[i] = u[i].clamp(-cfg.limit(i), cfg.limit(i));
    }
    let h = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| cfg.limit(i).powi(-2)));
    for _ in 0..30 {
        let res = boundary_residual(rollout(cfg, theta, &u).final_state(), &cfg.goal);
        if res.amax() <= 0.1 * cfg.boundary_tol {
            return Ok(u);
        }
        let cols: Vec<SVector<f64, 12>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += FD_STEP;
                um[i] -= FD_STEP;
                let rp = boundary_residual(rollout(cfg, theta, &up).final_state(), &cfg.goal);
                let rm = boundary_residual(rollout(cfg, theta, &um).final_state(), &cfg.goal);
                (rp - rm) / (2.0 * FD_STEP)
            })
            .collect();
        let jac = DMatrix::from_fn(12, n, |r, c| cols[c][r]);
        let mut c = DMatrix::zeros(2 * n, n);
        let mut d = DVector::zeros(2 * n);
        for i in 0..n {
            c[(2 * i, i)] = 1.0;
            d[2 * i] = cfg.limit(i) - u[i];
            c[(2 * i + 1, i)] = -1.0;
            d[2 * i + 1] = cfg.limit(i) + u[i];
        }
        let qp = QpProblem::new(h.clone(), DVector::zeros(n))
            .with_equalities(jac, DVector::from_column_slice((-res).as_slice()))
            .with_inequalities(c, d);
        let step = match solve_qp(&qp) {
            Ok(sol) => sol.x,
            Err(Error::InfeasibleQp { .. }) => {
                return Err(Error::ExcitationFailed {
                    reason: "boundary conditions unreachable within the input limits".into(),
                    best: Box::new(rollout(cfg, theta, &u)),
                })
            }
            Err(e) => return Err(e),
        };
        for i in 0..n {
            u[i] = (u[i] + step[i]).clamp(-cfg.limit(i), cfg.limit(i));
        }
    }
    let res = boundary_residual(rollout(cfg, theta, &u).final_state(), &cfg.goal);
    if res.amax() <= cfg.boundary_tol {
        return Ok(u);
    }
    Err(Error::ExcitationFailed {
        reason: format!("boundary residual {:.3e} after repair", res.amax()),
        best: Box::new(rollout(cfg, theta, &u)),
    })
}

/// Minimum-energy transfer from a dithered zero input, projected onto the
/// boundary conditions. A zero dither gives the plain minimum-energy inputs.
pub fn min_energy_seed<R: Rng>(cfg: &ExcitationConfig, theta: &InertialParams, rng: &mut R) -> Result<Trajectory> {
    cfg.validate()?;
    theta.validate()?;
    let u0: Vec<f64> = (0..cfg.n_vars())
        .map(|i| {
            let a = cfg.dither * cfg.limit(i);
            if a > 0.0 {
                rng.random_range(-a..=a)
            } else {
                0.0
            }
        })
        .collect();
    let u = repair(cfg, theta, &u0)?;
    Ok(rollout(cfg, theta, &u))
}

fn gradient(cfg: &ExcitationConfig, theta: &InertialParams, u: &[f64]) -> Result<Vec<f64>> {
    (0..cfg.n_vars())
        .into_par_iter()
        .map(|i| {
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[i] += FD_STEP;
            um[i] -= FD_STEP;
            Ok((objective(cfg, theta, &up)? - objective(cfg, theta, &um)?) / (2.0 * FD_STEP))
        })
        .collect()
}

/// A-optimal excitation by projected descent over the clamped inputs, with
/// finite-difference gradients and a boundary repair after every step. Only
/// strict improvements over the seed are accepted.
pub fn optimize_excitation(cfg: &ExcitationConfig, theta_prior: &InertialParams) -> Result<ExcitationResult> {
    cfg.validate()?;
    theta_prior.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let seed = min_energy_seed(cfg, theta_prior, &mut rng)?;
    if region_violation(&seed, &cfg.region) > 0.0 {
        return Err(Error::ExcitationFailed {
            reason: "the seed leaves the safe region".into(),
            best: Box::new(seed),
        });
    }
    let mut u = pack(&seed.inputs);
    let seed_cost = objective(cfg, theta_prior, &u)?;
    let mut cost = seed_cost;
    let mut history = vec![cost];
    let mut alpha: f64 = 1.0;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let g = gradient(cfg, theta_prior, &u)?;
        // Descent direction in limit-normalized coordinates.
        let scaled: Vec<f64> = g.iter().enumerate().map(|(i, gi)| -gi * cfg.limit(i)).collect();
        let norm = scaled.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !(norm > 0.0 && norm.is_finite()) {
            break;
        }
        let dir: Vec<f64> = scaled.iter().enumerate().map(|(i, s)| s / norm * cfg.limit(i)).collect();

        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..12 {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(ui, di)| ui + a * di).collect();
            if let Ok(fixed) = repair(cfg, theta_prior, &trial) {
                let c = objective(cfg, theta_prior, &fixed)?;
                if c < cost && region_violation(&rollout(cfg, theta_prior, &fixed), &cfg.region) == 0.0 {
                    accepted = Some((fixed, c));
                    break;
                }
            }
            a *= 0.5;
        }
        let Some((next, c)) = accepted else {
            break;
        };
        let improvement = (cost - c) / cost.abs().max(f64::MIN_POSITIVE);
        u = next;
        cost = c;
        history.push(cost);
        alpha = (2.0 * a).min(1.0);
        if improvement < cfg.rel_tol {
            break;
        }
    }

    let trajectory = rollout(cfg, theta_prior, &u);
    let res = boundary_residual(trajectory.final_state(), &cfg.goal);
    if res.amax() > cfg.boundary_tol {
        return Err(Error::ExcitationFailed {
            reason: format!("endpoint residual {:.3e}", res.amax()),
            best: Box::new(trajectory),
        });
    }
    Ok(ExcitationResult {
        trajectory,
        seed,
        cost,
        seed_cost,
        iterations,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::identity_quaternion;
    use proptest::prelude::*;
    use rand::Rng;

    fn rest(x: f64, y: f64, z: f64) -> State {
        State::at_rest(Vector3::new(x, y, z), identity_quaternion())
    }

    fn region() -> Aabb {
        Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn no_thrust_means_no_mass_information() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let f = fim_step(&rest(0.0, 0.0, 0.0), &ControlInput::zero(), &p, &PoseNoise::default(), 0.5).unwrap();
        assert!(f.matrix.row(0).amax() < 1e-12);
        assert!(f.matrix.column(0).amax() < 1e-12);
    }

    #[test]
    fn pure_thrust_carries_no_inertia_information() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let u = ControlInput::force(Vector3::new(0.3, 0.0, 0.0));
        let f = fim_step(&rest(0.0, 0.0, 0.0), &u, &p, &PoseNoise::default(), 0.5).unwrap();
        assert!(f.matrix[(0, 0)] > 0.0);
        for i in 1..4 {
            assert!(f.matrix.row(i).amax() < 1e-9 * f.matrix[(0, 0)]);
        }
        // Position moves by dt^2 f / (2 m).
        let dt = 0.5;
        let sens = 0.5 * dt * dt * 0.3 / (p.mass * p.mass);
        let expected = sens * sens / 0.005_f64.powi(2);
        assert!((f.matrix[(0, 0)] - expected).abs() <= 1e-6 * expected);
    }

    #[test]
    fn spin_up_matches_single_axis_sensitivity() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let noise = PoseNoise::default();
        let (dt, tau) = (0.5, 0.05);
        let u = ControlInput {
            f: Vector3::zeros(),
            tau: Vector3::new(0.0, 0.0, tau),
        };
        let f = fim_step(&rest(0.0, 0.0, 0.0), &u, &p, &noise, dt).unwrap();
        // From w_dot_z = tau / Izz: angle = dt^2 tau / (2 Izz), so
        // d angle / d Izz = -dt^2 tau / (2 Izz^2).
        let izz = p.inertia.z;
        let sens = -0.5 * dt * dt * tau / (izz * izz);
        let expected = sens * sens / noise.attitude.powi(2);
        assert!(f.matrix[(3, 3)] > 0.0);
        assert!((f.matrix[(3, 3)] - expected).abs() <= 1e-6 * expected);
    }

    #[test]
    fn sensitivity_is_step_size_consistent() {
        let p = InertialParams::ASTROBEE;
        let x = State {
            w: Vector3::new(0.1, -0.2, 0.05),
            v: Vector3::new(0.01, 0.0, 0.0),
            ..rest(0.1, 0.2, 0.3)
        };
        let u = ControlInput {
            f: Vector3::new(0.2, -0.1, 0.3),
            tau: Vector3::new(0.02, 0.01, -0.03),
        };
        let a = pose_sensitivity(&x, &u, &p, 0.5, 1e-5).unwrap();
        let b = pose_sensitivity(&x, &u, &p, 0.5, 5e-6).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-4 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn a_optimality_examples() {
        assert!((a_optimality_cost(&FisherInfo { matrix: Matrix4::identity() }, 0.0).unwrap() - 4.0).abs() < 1e-15);
        let two = FisherInfo {
            matrix: Matrix4::identity() * 2.0,
        };
        assert!((a_optimality_cost(&two, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            a_optimality_cost(&FisherInfo::zeros(), 0.0),
            Err(Error::SingularInformation)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = FisherInfo {
                matrix: m * m.transpose() + Matrix4::identity() * 0.1,
            };
            let oracle: f64 = f.matrix.symmetric_eigenvalues().iter().map(|l| 1.0 / l).sum();
            assert!((a_optimality_cost(&f, 0.0).unwrap() - oracle).abs() <= 1e-10 * oracle);
        }
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<ControlInput> {
        (0..n)
            .map(|_| ControlInput {
                f: Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4)),
                tau: Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
            })
            .collect()
    }

    #[test]
    fn information_is_additive_and_monotone() {
        let p = InertialParams::ASTROBEE;
        let noise = PoseNoise::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let traj = Trajectory::rollout(rest(0.0, 0.0, 0.0), random_inputs(&mut rng, 12), &p, 0.5);
        let one = traj.slice(0, 1);
        let f1 = total_fim(&one, &p, &noise).unwrap();
        let direct = fim_step(&traj.states[0], &traj.inputs[0], &p, &noise, 0.5).unwrap();
        assert_eq!(f1, direct);

        let total = total_fim(&traj, &p, &noise).unwrap();
        let split = total_fim(&traj.slice(0, 5), &p, &noise).unwrap() + total_fim(&traj.slice(5, 12), &p, &noise).unwrap();
        assert!((total.matrix - split.matrix).amax() <= 1e-9 * total.matrix.amax());
        assert!(total.is_symmetric(1e-10));
        assert!(total.min_eigenvalue() >= -1e-10 * total.matrix.amax());

        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let f = total_fim(&traj.slice(0, k), &p, &noise).unwrap();
            let c = a_optimality_cost(&f, DEFAULT_RIDGE).unwrap();
            assert!(c <= prev * (1.0 + 1e-12));
            prev = c;
            let diff = total.matrix - f.matrix;
            assert!(diff.symmetric_eigenvalues().min() >= -1e-8 * total.matrix.amax());
        }
        assert!(total_fim(&Trajectory::single(rest(0.0, 0.0, 0.0), 0.5), &p, &noise).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn increments_are_symmetric_psd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = InertialParams::ASTROBEE;
            let x = State {
                w: Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                ..rest(0.0, 0.0, 0.0)
            };
            let u = random_inputs(&mut rng, 1)[0];
            let f = fim_step(&x, &u, &p, &PoseNoise::default(), 0.5).unwrap();
            prop_assert!(f.is_symmetric(1e-10));
            prop_assert!(f.min_eigenvalue() >= -1e-8 * f.matrix.amax().max(1.0));
        }
    }

    fn small_cfg(goal: State) -> ExcitationConfig {
        ExcitationConfig {
            horizon: 12,
            max_iterations: 15,
            ..ExcitationConfig::new(rest(0.0, 0.0, 0.0), goal, region())
        }
    }

    #[test]
    fn seed_meets_boundary_conditions() {
        let p = InertialParams::ASTROBEE;
        let cfg = ExcitationConfig {
            dither: 0.0,
            ..small_cfg(rest(0.3, -0.2, 0.1))
        };
        let seed = min_energy_seed(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(boundary_residual(seed.final_state(), &cfg.goal).amax() <= cfg.boundary_tol);
        // Without dither and without rotation the seed applies no torque.
        assert!(seed.inputs.iter().all(|u| u.tau.amax() < 1e-12));
    }

    #[test]
    fn optimization_improves_and_respects_limits() {
        let p = InertialParams::ASTROBEE;
        let cfg = small_cfg(rest(0.2, 0.0, 0.0));
        let res = optimize_excitation(&cfg, &p).unwrap();
        assert!(res.cost < res.seed_cost);
        assert!(res.cost_history.windows(2).all(|w| w[1] < w[0]));
        assert!(res.trajectory.inputs.iter().all(|u| u.f.amax() <= cfg.force_max && u.tau.amax() <= cfg.torque_max));
        let res_end = boundary_residual(res.trajectory.final_state(), &cfg.goal);
        assert!(res_end.amax() <= cfg.boundary_tol);
        assert!(res.trajectory.states.iter().all(|s| cfg.region.contains(&s.r)));
        assert!(res.trajectory.replay_error(&p) <= 1e-9);
    }

    #[test]
    fn hover_in_place_beats_zero_input() {
        let p = InertialParams::ASTROBEE;
        let cfg = ExcitationConfig {
            horizon: 4,
            ..small_cfg(rest(0.0, 0.0, 0.0))
        };
        let res = optimize_excitation(&cfg, &p).unwrap();
        let idle = Trajectory::rollout(cfg.start, vec![ControlInput::zero(); cfg.horizon], &p, cfg.dt);
        let idle_cost = a_optimality_cost(&total_fim(&idle, &p, &cfg.noise).unwrap(), cfg.ridge).unwrap();
        assert!(res.cost <= idle_cost);
        assert!(res.trajectory.inputs.iter().any(|u| u.f.amax() > 0.0));
        assert!((res.trajectory.final_state().r - cfg.start.r).amax() <= cfg.boundary_tol);
    }

    #[test]
    fn mass_information_drives_thrust_to_the_limit() {
        // Mass information grows with |f|, so the optimizer should push the
        // thrust magnitudes well above the seed's.
        let p = InertialParams::ASTROBEE;
        let cfg = small_cfg(rest(0.0, 0.0, 0.0));
        let res = optimize_excitation(&cfg, &p).unwrap();
        let mean = |t: &Trajectory| t.inputs.iter().map(|u| u.f.norm()).sum::<f64>() / t.inputs.len() as f64;
        assert!(mean(&res.trajectory) > 2.0 * mean(&res.seed));
        let peak = res.trajectory.inputs.iter().map(|u| u.f.amax()).fold(0.0, f64::max);
        assert!(peak >= 0.9 * cfg.force_max);
    }
}
