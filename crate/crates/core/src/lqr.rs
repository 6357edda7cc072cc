//! Finite-horizon LQR: quadratic cost bookkeeping, the backward Riccati value
//! iteration, value-function queries and LQR steering through the nonlinear
//! model.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{
    linearize_discretize, state_error, step_fast, ControlInput, ControlLimits, InertialParams,
    InputVector, LtvModel, State, INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Stage cost `1/2 dx'Q dx + 1/2 du'R du + du'P dx + q'dx + r'du` with terminal
/// cost `1/2 dx'Q_N dx + q_N'dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Cross weight, `n_u x n_x`.
    pub p: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
    pub q_terminal: DMatrix<f64>,
    pub q_lin_terminal: DVector<f64>,
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigenvalues().min()
}

impl QuadraticCost {
    /// Pure quadratic regulator cost (no cross or linear terms).
    pub fn regulator(q: DMatrix<f64>, r: DMatrix<f64>, q_terminal: DMatrix<f64>) -> Result<Self> {
        let (n, m) = (q.nrows(), r.nrows());
        let cost = Self {
            q,
            r,
            p: DMatrix::zeros(m, n),
            q_lin: DVector::zeros(n),
            r_lin: DVector::zeros(m),
            q_terminal,
            q_lin_terminal: DVector::zeros(n),
        };
        cost.validate()?;
        Ok(cost)
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.state_dim(), self.input_dim());
        if self.q.shape() != (n, n)
            || self.r.shape() != (m, m)
            || self.p.shape() != (m, n)
            || self.q_lin.len() != n
            || self.r_lin.len() != m
            || self.q_terminal.shape() != (n, n)
            || self.q_lin_terminal.len() != n
        {
            return Err(Error::DimensionMismatch("quadratic cost blocks".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("input weight R must be positive definite".into()));
        }
        if min_eigenvalue(&self.q) < -1e-10 || min_eigenvalue(&self.q_terminal) < -1e-10 {
            return Err(Error::InvalidArgument("state weights must be positive semidefinite".into()));
        }
        let mut block = DMatrix::zeros(n + m, n + m);
        block.view_mut((0, 0), (n, n)).copy_from(&self.q);
        block.view_mut((0, n), (n, m)).copy_from(&self.p.transpose());
        block.view_mut((n, 0), (m, n)).copy_from(&self.p);
        block.view_mut((n, n), (m, m)).copy_from(&self.r);
        if min_eigenvalue(&block) < -1e-10 {
            return Err(Error::InvalidArgument("joint state/input weight is indefinite".into()));
        }
        Ok(())
    }

    pub fn stage(&self, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        0.5 * dx.dot(&(&self.q * dx))
            + 0.5 * du.dot(&(&self.r * du))
            + du.dot(&(&self.p * dx))
            + self.q_lin.dot(dx)
            + self.r_lin.dot(du)
    }

    pub fn terminal(&self, dx: &DVector<f64>) -> f64 {
        0.5 * dx.dot(&(&self.q_terminal * dx)) + self.q_lin_terminal.dot(dx)
    }
}

/// Quadratic cost-to-go `V_k(dx) = 1/2 dx'S_k dx + dx's_k + c_k`, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub s: Vec<DMatrix<f64>>,
    pub s_lin: Vec<DVector<f64>>,
    pub c: Vec<f64>,
}

impl ValueFunction {
    pub fn horizon(&self) -> usize {
        self.s.len() - 1
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.horizon() {
            return Err(Error::IndexOutOfRange {
                index: k,
                max: self.horizon(),
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, k: usize, dx: &DVector<f64>) -> Result<f64> {
        self.check(k)?;
        Ok(0.5 * dx.dot(&(&self.s[k] * dx)) + dx.dot(&self.s_lin[k]) + self.c[k])
    }

    /// Planner pseudo-distance `dx'S_k dx + dx's_k + c_k`.
    pub fn metric(&self, k: usize, dx: &DVector<f64>) -> Result<f64> {
        self.check(k)?;
        Ok(dx.dot(&(&self.s[k] * dx)) + dx.dot(&self.s_lin[k]) + self.c[k])
    }
}

/// Value of the cost-to-go at `x_query` relative to the reference `x_ref`.
pub fn evaluate_value(
    vf: &ValueFunction,
    k: usize,
    x_query: &DVector<f64>,
    x_ref: &DVector<f64>,
) -> Result<f64> {
    if x_query.len() != x_ref.len() || x_query.len() != vf.s[0].nrows() {
        return Err(Error::DimensionMismatch("value query".into()));
    }
    vf.evaluate(k, &(x_query - x_ref))
}

/// Affine feedback `du_k = K_k dx_k + k_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrPolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
}

impl LqrPolicy {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn control(&self, k: usize, dx: &DVector<f64>) -> DVector<f64> {
        &self.gains[k] * dx + &self.feedforward[k]
    }
}

/// Backward Riccati recursion over `horizon` stages.
pub fn riccati_backward(
    model: &LtvModel,
    cost: &QuadraticCost,
    horizon: usize,
) -> Result<(ValueFunction, LqrPolicy)> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least one step".into()));
    }
    if model.state_dim() != cost.state_dim() || model.input_dim() != cost.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model is {}x{}, cost is {}x{}",
            model.state_dim(),
            model.input_dim(),
            cost.state_dim(),
            cost.input_dim()
        )));
    }
    let n = horizon;
    let mut s = vec![DMatrix::zeros(0, 0); n + 1];
    let mut s_lin = vec![DVector::zeros(0); n + 1];
    let mut c = vec![0.0; n + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    let mut feedforward = vec![DVector::zeros(0); n];
    s[n] = cost.q_terminal.clone();
    s_lin[n] = cost.q_lin_terminal.clone();

    for k in (0..n).rev() {
        let (a, b, g) = model.stage(k);
        let s_next = s[k + 1].clone();
        let sl_next = s_lin[k + 1].clone();
        let (s_next, sl_next) = (&s_next, &sl_next);
        let bt_s = b.transpose() * s_next;
        let h = &cost.r + &bt_s * b;
        let gm = &bt_s * a + &cost.p;
        let hv = &bt_s * g + b.transpose() * sl_next + &cost.r_lin;
        let chol = h.cholesky().ok_or(Error::SingularRiccati { step: k })?;
        let h_inv_g = chol.solve(&gm);
        let h_inv_h = chol.solve(&hv);

        let s_k = a.transpose() * s_next * a + &cost.q - gm.transpose() * &h_inv_g;
        s[k] = 0.5 * (&s_k + s_k.transpose());
        s_lin[k] = &cost.q_lin + a.transpose() * sl_next + a.transpose() * (s_next * g)
            - gm.transpose() * &h_inv_h;
        // Constant term in the same (unhalved) form as the quadratic recursion it
        // accompanies; it shifts every query at step k equally.
        c[k] = g.dot(&(s_next * g)) + 2.0 * sl_next.dot(g) + c[k + 1] - hv.dot(&h_inv_h);
        gains[k] = -h_inv_g;
        feedforward[k] = -h_inv_h;
    }
    Ok((ValueFunction { s, s_lin, c }, LqrPolicy { gains, feedforward }))
}

/// Stabilizing solution of the discrete algebraic Riccati equation by running
/// the recursion to a fixed point.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut s = q.clone();
    for iter in 0..200_000 {
        let bt_s = b.transpose() * &s;
        let h = r + &bt_s * b;
        let chol = h.cholesky().ok_or(Error::SingularRiccati { step: iter })?;
        let gain = chol.solve(&(&bt_s * a));
        let next = a.transpose() * &s * a + q - (&bt_s * a).transpose() * &gain;
        let next = 0.5 * (&next + next.transpose());
        let delta = (&next - &s).amax();
        s = next;
        if delta <= 1e-13 * s.amax().max(1.0) {
            let bt_s = b.transpose() * &s;
            let h = r + &bt_s * b;
            let chol = h.cholesky().ok_or(Error::SingularRiccati { step: iter })?;
            let k = -chol.solve(&(&bt_s * a));
            return Ok((s, k));
        }
    }
    Err(Error::InvalidArgument(format!(
        "Riccati iteration did not converge for a {n}-state system; check stabilizability"
    )))
}

/// Everything needed to steer the full 13-state model with LQR.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringConfig {
    pub cost: QuadraticCost,
    pub horizon: usize,
    pub dt: f64,
    pub limits: ControlLimits,
}

impl SteeringConfig {
    pub fn default_cost() -> QuadraticCost {
        let diag = [
            10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1,
        ];
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&diag));
        let r = DMatrix::identity(INPUT_DIM, INPUT_DIM) * 100.0;
        let qn = &q * 20.0;
        QuadraticCost::regulator(q, r, qn).expect("default weights are valid")
    }
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            cost: Self::default_cost(),
            horizon: 20,
            dt: 0.2,
            limits: ControlLimits::default(),
        }
    }
}

/// Riccati pass linearized about `target` at rest input.
pub fn steering_solution(
    target: &State,
    params: &InertialParams,
    cfg: &SteeringConfig,
) -> Result<(ValueFunction, LqrPolicy)> {
    steering_solution_horizon(target, params, cfg, cfg.horizon)
}

pub(crate) fn steering_solution_horizon(
    target: &State,
    params: &InertialParams,
    cfg: &SteeringConfig,
    horizon: usize,
) -> Result<(ValueFunction, LqrPolicy)> {
    let lin = linearize_discretize(target, &ControlInput::zero(), params, cfg.dt)?;
    let model = LtvModel::time_invariant(lin.a, lin.b, lin.g, cfg.dt, 1)?;
    riccati_backward(&model, &cfg.cost, horizon)
}

/// Roll an LQR policy about `target` forward through the nonlinear model with
/// clamped inputs.
pub fn rollout_policy(
    from: &State,
    target: &State,
    policy: &LqrPolicy,
    params: &InertialParams,
    cfg: &SteeringConfig,
) -> Trajectory {
    let mut states = Vec::with_capacity(policy.horizon() + 1);
    let mut inputs = Vec::with_capacity(policy.horizon());
    let mut x = *from;
    states.push(x);
    for k in 0..policy.horizon() {
        let dx = state_error(&x, target);
        let du = policy.control(k, &DVector::from_column_slice(dx.as_slice()));
        let u = cfg
            .limits
            .clamp(&ControlInput::from_vector(&InputVector::from_column_slice(du.as_slice())));
        x = step_fast(&x, &u, params, cfg.dt);
        states.push(x);
        inputs.push(u);
    }
    Trajectory {
        t0: 0.0,
        dt: cfg.dt,
        states,
        inputs,
    }
}

/// LQR trajectory from `from` toward `to`, linearized about `to`.
pub fn lqr_steer(
    from: &State,
    to: &State,
    params: &InertialParams,
    cfg: &SteeringConfig,
) -> Result<Trajectory> {
    if !from.is_finite() || !to.is_finite() {
        return Err(Error::InvalidArgument("non-finite steering endpoint".into()));
    }
    let (_, policy) = steering_solution(to, params, cfg)?;
    Ok(rollout_policy(from, to, &policy, params, cfg))
}

/// Sum of LQR stage costs of `traj` measured against `target`.
pub fn trajectory_cost(traj: &Trajectory, target: &State, cost: &QuadraticCost) -> f64 {
    debug_assert_eq!(cost.state_dim(), STATE_DIM);
    traj.inputs
        .iter()
        .zip(&traj.states)
        .map(|(u, x)| {
            let dx = state_error(x, target);
            let uv = u.to_vector();
            cost.stage(
                &DVector::from_column_slice(dx.as_slice()),
                &DVector::from_column_slice(uv.as_slice()),
            )
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::translational_lti;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_recursion_converges_to_golden_ratio() {
        let model = LtvModel::time_invariant(scalar(1.0), scalar(1.0), DVector::zeros(1), 1.0, 1).unwrap();
        let cost = QuadraticCost::regulator(scalar(1.0), scalar(1.0), scalar(1.0)).unwrap();
        let (vf, _) = riccati_backward(&model, &cost, 200).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((vf.s[0][(0, 0)] - golden).abs() < 1e-12);
    }

    #[test]
    fn one_step_terminal_only_matches_direct_minimization() {
        // V(x) = min_u 1/2 u'Ru + 1/2 (Ax + Bu)'Qn(Ax + Bu)
        //      = 1/2 x'[A'QnA - A'QnB (R + B'QnB)^-1 B'QnA] x
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.1, 0.5]);
        let qn = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let r = scalar(0.7);
        let model = LtvModel::time_invariant(a.clone(), b.clone(), DVector::zeros(2), 0.1, 1).unwrap();
        let cost = QuadraticCost::regulator(DMatrix::zeros(2, 2), r.clone(), qn.clone()).unwrap();
        let (vf, policy) = riccati_backward(&model, &cost, 1).unwrap();
        // Brute-force minimization over u on a fine grid around the optimum.
        for x in [DVector::from_row_slice(&[1.0, 0.0]), DVector::from_row_slice(&[-0.3, 2.0])] {
            let cost_of = |u: f64| {
                let next = &a * &x + &b * u;
                0.5 * 0.7 * u * u + 0.5 * next.dot(&(&qn * &next))
            };
            // Golden-section search for the scalar minimum.
            let (mut lo, mut hi) = (-50.0f64, 50.0f64);
            for _ in 0..200 {
                let m1 = lo + 0.382 * (hi - lo);
                let m2 = lo + 0.618 * (hi - lo);
                if cost_of(m1) < cost_of(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let u_star = 0.5 * (lo + hi);
            assert!((vf.evaluate(0, &x).unwrap() - cost_of(u_star)).abs() < 1e-9);
            assert!((policy.control(0, &x)[0] - u_star).abs() < 1e-6);
        }
    }

    #[test]
    fn policy_beats_random_sequences() {
        let (a, b) = translational_lti(InertialParams::ASTROBEE_WITH_OBJECT.mass, 0.2);
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[10., 10., 10., 1., 1., 1.]));
        let r = DMatrix::identity(3, 3) * 100.0;
        let cost = QuadraticCost::regulator(q.clone(), r, q * 5.0).unwrap();
        let model = LtvModel::time_invariant(a.clone(), b.clone(), DVector::zeros(6), 0.2, 1).unwrap();
        let n = 15;
        let (_, policy) = riccati_backward(&model, &cost, n).unwrap();
        let x0 = DVector::from_row_slice(&[1.0, -0.5, 0.2, 0.0, 0.05, 0.0]);
        let total = |inputs: &dyn Fn(usize, &DVector<f64>) -> DVector<f64>| {
            let mut x = x0.clone();
            let mut j = 0.0;
            for k in 0..n {
                let u = inputs(k, &x);
                j += cost.stage(&x, &u);
                x = &a * &x + &b * &u;
            }
            j + cost.terminal(&x)
        };
        let optimal = total(&|k, x| policy.control(k, x));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let seq: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(3, |_, _| 0.2 * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            assert!(optimal <= total(&|k, _| seq[k].clone()) + 1e-12);
        }
    }

    #[test]
    fn value_queries() {
        let vf = ValueFunction {
            s: vec![DMatrix::identity(3, 3) * 2.0],
            s_lin: vec![DVector::zeros(3)],
            c: vec![0.0],
        };
        let x = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        assert_eq!(evaluate_value(&vf, 0, &x, &DVector::zeros(3)).unwrap(), 1.0);
        assert!(matches!(vf.evaluate(1, &x), Err(Error::IndexOutOfRange { .. })));

        let vf = ValueFunction {
            s: vec![DMatrix::identity(2, 2)],
            s_lin: vec![DVector::from_row_slice(&[0.3, -0.1])],
            c: vec![4.5],
        };
        assert_eq!(vf.evaluate(0, &DVector::zeros(2)).unwrap(), 4.5);
    }

    #[test]
    fn bellman_consistency_along_rollout() {
        let (a, b) = translational_lti(9.0877, 0.2);
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[10., 10., 10., 1., 1., 1.]));
        let cost = QuadraticCost::regulator(q.clone(), DMatrix::identity(3, 3) * 100.0, q).unwrap();
        let model = LtvModel::time_invariant(a.clone(), b.clone(), DVector::zeros(6), 0.2, 1).unwrap();
        let (vf, policy) = riccati_backward(&model, &cost, 25).unwrap();
        let mut x = DVector::from_row_slice(&[0.5, -1.0, 0.3, 0.1, 0.0, -0.05]);
        for k in 0..25 {
            let u = policy.control(k, &x);
            let next = &a * &x + &b * &u;
            let lhs = vf.evaluate(k, &x).unwrap();
            let rhs = vf.evaluate(k + 1, &next).unwrap() + cost.stage(&x, &u);
            assert!(lhs >= rhs - 1e-8);
            assert!((lhs - rhs).abs() < 1e-8);
            assert!(vf.s[k].symmetric_eigenvalues().min() >= -1e-8);
            x = next;
        }
    }

    #[test]
    fn rejects_singular_inner_matrix() {
        let model = LtvModel::time_invariant(scalar(1.0), scalar(1.0), DVector::zeros(1), 1.0, 1).unwrap();
        let cost = QuadraticCost {
            q: scalar(1.0),
            r: scalar(0.0),
            p: scalar(0.0),
            q_lin: DVector::zeros(1),
            r_lin: DVector::zeros(1),
            q_terminal: scalar(0.0),
            q_lin_terminal: DVector::zeros(1),
        };
        assert!(matches!(
            riccati_backward(&model, &cost, 3),
            Err(Error::SingularRiccati { step: 2 })
        ));
        assert!(cost.validate().is_err());
    }

    #[test]
    fn steering_fixed_point() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let cfg = SteeringConfig::default();
        let x = State::at_rest(Vector3::new(0.4, -0.2, 0.1), crate::dynamics::identity_quaternion());
        let traj = lqr_steer(&x, &x, &p, &cfg).unwrap();
        assert_eq!(traj.steps(), cfg.horizon);
        for s in &traj.states {
            assert!((s.to_vector() - x.to_vector()).amax() < 1e-12);
        }
        for u in &traj.inputs {
            assert!(u.to_vector().amax() < 1e-9);
        }
    }

    #[test]
    fn steering_contracts_and_beats_zero_input() {
        let p = InertialParams::ASTROBEE_WITH_OBJECT;
        let cfg = SteeringConfig::default();
        let from = State::default();
        let to = State::at_rest(Vector3::new(1.0, 0.0, 0.0), crate::dynamics::identity_quaternion());
        let traj = lqr_steer(&from, &to, &p, &cfg).unwrap();
        let e0 = (from.r - to.r).norm();
        let e1 = (traj.final_state().r - to.r).norm();
        assert!(e1 < e0, "{e1} !< {e0}");
        assert!(traj.inputs.iter().all(|u| cfg.limits.contains(u, 0.0)));

        let idle = Trajectory::rollout(from, vec![ControlInput::zero(); cfg.horizon], &p, cfg.dt);
        let steer_cost = trajectory_cost(&traj, &to, &cfg.cost)
            + cfg.cost.terminal(&DVector::from_column_slice(state_error(traj.final_state(), &to).as_slice()));
        let idle_cost = trajectory_cost(&idle, &to, &cfg.cost)
            + cfg.cost.terminal(&DVector::from_column_slice(state_error(idle.final_state(), &to).as_slice()));
        assert!(steer_cost <= idle_cost);
    }
}
