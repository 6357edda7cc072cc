use nalgebra::{DMatrix, DVector};

use super::polytope::{LinearImage, Polytope, SupportFunction};
use super::qp::{solve_qp, QpProblem, QpSolution};
use super::rpi::{compute_rpi, RpiSet};
use crate::collision::Aabb;
use crate::dynamics::{translational_lti, LtvModel};
use crate::error::{Error, Result};
use crate::lqr::{riccati_backward, solve_dare, QuadraticCost};

/// Gaussian belief over the total mass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MassBelief {
    pub mu: f64,
    pub sigma: f64,
}

impl MassBelief {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        let b = Self { mu, sigma };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.mu.is_finite() && self.mu > 2.0 * self.sigma && self.mu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mass belief needs mu > 2 sigma >= 0, got mu={} sigma={}",
                self.mu, self.sigma
            )));
        }
        Ok(())
    }
}

/// Per-axis additive disturbance box on `(r, v)` from mass uncertainty.
///
/// For each translational component the one-step response to the largest
/// input at the mean mass is compared with the larger response at the
/// `mu +- 2 sigma` masses.
pub fn disturbance_bound_from_mass(belief: &MassBelief, u_max: f64, dt: f64) -> Result<Polytope> {
    belief.validate()?;
    if !(u_max > 0.0 && dt > 0.0) {
        return Err(Error::InvalidArgument("u_max and dt must be positive".into()));
    }
    let pos = |m: f64| 0.5 * dt * dt * u_max / m;
    let vel = |m: f64| dt * u_max / m;
    let (m_hi, m_lo) = (belief.mu + 2.0 * belief.sigma, belief.mu - 2.0 * belief.sigma);
    let wr = (pos(belief.mu) - pos(m_hi).max(pos(m_lo))).abs();
    let wv = (vel(belief.mu) - vel(m_hi).max(vel(m_lo))).abs();
    Polytope::symmetric_box(&DVector::from_row_slice(&[wr, wr, wr, wv, wv, wv]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of the state weight on `(r, v)`.
    pub q_diag: [f64; 6],
    pub r_diag: [f64; 3],
    pub u_max: f64,
    pub velocity_max: f64,
    pub epsilon: f64,
    pub s_max: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            q_diag: [100.0; 6],
            r_diag: [1.0; 3],
            u_max: 0.5,
            velocity_max: 0.3,
            epsilon: 1e-3,
            s_max: 2000,
        }
    }
}

/// Quadratic tracking weights with terminal weight `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl MpcCost {
    /// Terminal weight from the discrete algebraic Riccati equation.
    pub fn with_dare_terminal(a: &DMatrix<f64>, b: &DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (h, _) = solve_dare(a, b, &q, &r)?;
        Ok(Self { q, r, h })
    }

    /// Finite-horizon LQR gain at the start of the horizon.
    pub fn lqr_gain(&self, model: &LtvModel, horizon: usize) -> Result<DMatrix<f64>> {
        let cost = QuadraticCost::regulator(self.q.clone(), self.r.clone(), self.h.clone())?;
        let (_, policy) = riccati_backward(model, &cost, horizon)?;
        Ok(policy.gains[0].clone())
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) || !(self.u_max > 0.0) || !(self.velocity_max > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("MPC horizon, dt, bounds and epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self, mass: f64) -> Result<LtvModel> {
        let (a, b) = translational_lti(mass, self.dt);
        LtvModel::time_invariant(a, b, DVector::zeros(6), self.dt, 1)
    }

    pub fn cost(&self, model: &LtvModel) -> Result<MpcCost> {
        let (a, b, _) = model.stage(0);
        MpcCost::with_dare_terminal(
            a,
            b,
            DMatrix::from_diagonal(&DVector::from_row_slice(&self.q_diag)),
            DMatrix::from_diagonal(&DVector::from_row_slice(&self.r_diag)),
        )
    }

    /// State box: workspace positions and symmetric velocity bounds.
    pub fn state_set(&self, workspace: &Aabb) -> Result<Polytope> {
        let v = self.velocity_max;
        let lo = DVector::from_row_slice(&[workspace.min.x, workspace.min.y, workspace.min.z, -v, -v, -v]);
        let hi = DVector::from_row_slice(&[workspace.max.x, workspace.max.y, workspace.max.z, v, v, v]);
        Polytope::from_box(&lo, &hi)
    }

    pub fn input_set(&self) -> Result<Polytope> {
        Polytope::symmetric_box(&DVector::from_element(3, self.u_max))
    }
}

/// `X - Z` and `U - K Z`.
pub fn tighten_constraints(
    x: &Polytope,
    u: &Polytope,
    z: &RpiSet,
    k: &DMatrix<f64>,
) -> Result<(Polytope, Polytope)> {
    let x_bar = x.pontryagin_difference(z)?;
    let kz = LinearImage { map: k, set: z };
    let u_bar = u.pontryagin_difference(&kz)?;
    Ok((x_bar, u_bar))
}

/// Disturbance-rejection gain, invariant tube and tightened constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeController {
    pub k: DMatrix<f64>,
    pub z: RpiSet,
    pub x: Polytope,
    pub u: Polytope,
    pub x_bar: Polytope,
    pub u_bar: Polytope,
}

impl TubeController {
    pub fn new(
        model: &LtvModel,
        cost: &MpcCost,
        w: &Polytope,
        x: Polytope,
        u: Polytope,
        horizon: usize,
        epsilon: f64,
        s_max: usize,
    ) -> Result<Self> {
        let k = cost.lqr_gain(model, horizon)?;
        let (a, b, _) = model.stage(0);
        let a_cl = a + b * &k;
        let z = compute_rpi(&a_cl, w, epsilon, s_max)?;
        let (x_bar, u_bar) = tighten_constraints(&x, &u, &z, &k)?;
        Ok(Self {
            k,
            z,
            x,
            u,
            x_bar,
            u_bar,
        })
    }

    /// Largest per-axis nominal input left after tightening.
    pub fn input_authority(&self) -> DVector<f64> {
        let m = self.u_bar.dim();
        DVector::from_fn(m, |i, _| {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            self.u_bar.support(&e).min(self.u_bar.support(&(-e)))
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MpcMode<'a> {
    /// Nominal state pinned to the measured state; plain constraint sets.
    Standard { x: &'a Polytope, u: &'a Polytope },
    /// Free initial nominal state within the tube around the measurement;
    /// tightened constraint sets.
    Robust(&'a TubeController),
}

/// Reference states `r_0..r_N` and feedforward inputs `u_0..u_{N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl ReferenceWindow {
    /// Window starting at step `k` of a longer reference, holding the final
    /// state with zero input past its end.
    pub fn from_sequence(states: &[DVector<f64>], inputs: &[DVector<f64>], k: usize, horizon: usize) -> Self {
        let last = states.last().expect("non-empty reference").clone();
        let m = inputs.first().map_or(3, |u| u.len());
        let mut hold = last.clone();
        let n = hold.len();
        for i in n / 2..n {
            hold[i] = 0.0;
        }
        let state_at = |i: usize| if i < states.len() { states[i].clone() } else { hold.clone() };
        let input_at = |i: usize| if i < inputs.len() { inputs[i].clone() } else { DVector::zeros(m) };
        Self {
            states: (k..=k + horizon).map(state_at).collect(),
            inputs: (k..k + horizon).map(input_at).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub qp: QpSolution,
}

/// Finite-horizon tracking MPC as a condensed QP over the nominal inputs (and,
/// in robust mode, the initial nominal state).
pub fn solve_nominal_mpc(
    x_now: &DVector<f64>,
    reference: &ReferenceWindow,
    model: &LtvModel,
    cost: &MpcCost,
    mode: MpcMode<'_>,
) -> Result<MpcSolution> {
    let n = model.state_dim();
    let m = model.input_dim();
    let horizon = reference.inputs.len();
    if horizon == 0 || reference.states.len() != horizon + 1 {
        return Err(Error::InvalidArgument("reference window needs N >= 1 inputs and N + 1 states".into()));
    }
    if x_now.len() != n || cost.q.nrows() != n || cost.r.nrows() != m {
        return Err(Error::DimensionMismatch("MPC state or weight dimensions".into()));
    }
    let robust = matches!(mode, MpcMode::Robust(_));
    let nv = m * horizon;
    let nvar = nv + if robust { n } else { 0 };

    // z_k = M_k y + c_k
    let mut maps: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
    let mut consts: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
    let mut m0 = DMatrix::zeros(n, nvar);
    let mut c0 = DVector::zeros(n);
    if robust {
        m0.view_mut((0, nv), (n, n)).copy_from(&DMatrix::identity(n, n));
    } else {
        c0.copy_from(x_now);
    }
    maps.push(m0);
    consts.push(c0);
    for k in 0..horizon {
        let (a, b, g) = model.stage(k);
        let mut next = a * &maps[k];
        let mut bv = next.view_mut((0, k * m), (n, m));
        bv += b;
        maps.push(next);
        consts.push(a * &consts[k] + g);
    }

    let mut h = DMatrix::zeros(nvar, nvar);
    let mut f = DVector::zeros(nvar);
    for k in 0..=horizon {
        let w = if k == horizon { &cost.h } else { &cost.q };
        let mw = maps[k].transpose() * w;
        h += &mw * &maps[k];
        f += &mw * (&consts[k] - &reference.states[k]);
    }
    for k in 0..horizon {
        let mut blk = h.view_mut((k * m, k * m), (m, m));
        blk += &cost.r;
        let mut fr = f.rows_mut(k * m, m);
        fr -= &cost.r * &reference.inputs[k];
    }
    let h = 0.5 * (&h + h.transpose());

    let (xset, uset) = match mode {
        MpcMode::Standard { x, u } => (x, u),
        MpcMode::Robust(tube) => (&tube.x_bar, &tube.u_bar),
    };
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for k in 0..horizon {
        for i in 0..uset.num_halfspaces() {
            let mut row = DVector::zeros(nvar);
            for j in 0..m {
                row[k * m + j] = uset.a[(i, j)];
            }
            rows.push(row);
            rhs.push(uset.b[i]);
        }
    }
    let first_state = if robust { 0 } else { 1 };
    for k in first_state..=horizon {
        let am = &xset.a * &maps[k];
        let ac = &xset.a * &consts[k];
        for i in 0..xset.num_halfspaces() {
            rows.push(am.row(i).transpose());
            rhs.push(xset.b[i] - ac[i]);
        }
    }
    if let MpcMode::Robust(tube) = mode {
        // x_now - z_0 in Z  <=>  -G z_0 <= h - G x_now
        let g = &tube.z.polytope.a;
        let gx = g * x_now;
        for i in 0..g.nrows() {
            let mut row = DVector::zeros(nvar);
            for j in 0..n {
                row[nv + j] = -g[(i, j)];
            }
            rows.push(row);
            rhs.push(tube.z.polytope.b[i] - gx[i]);
        }
    }
    let c = DMatrix::from_fn(rows.len(), nvar, |r, col| rows[r][col]);
    let d = DVector::from_vec(rhs);
    let qp = solve_qp(&QpProblem::new(h, f).with_inequalities(c, d))?;

    let z = (0..=horizon).map(|k| &maps[k] * &qp.x + &consts[k]).collect();
    let v = (0..horizon).map(|k| qp.x.rows(k * m, m).into_owned()).collect();
    Ok(MpcSolution { z, v, qp })
}

/// Applied input `v + K (x - z)`, refusing errors outside the tube.
pub fn control_step(
    x: &DVector<f64>,
    z: &DVector<f64>,
    v: &DVector<f64>,
    k: &DMatrix<f64>,
    tube: Option<&RpiSet>,
) -> Result<DVector<f64>> {
    let e = x - z;
    if let Some(set) = tube {
        let p = &set.polytope;
        let excess = (&p.a * &e - &p.b).max();
        if excess > 1e-9 {
            return Err(Error::TubeViolation { excess });
        }
    }
    Ok(v + k * e)
}

/// Closed-loop record of a receding-horizon run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedLoopLog {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub nominal: Vec<DVector<f64>>,
    pub max_kkt: f64,
}

/// Receding-horizon loop over `steps` steps. `plant(k, x, u)` returns the next
/// measured state.
pub fn run_closed_loop<F>(
    x0: &DVector<f64>,
    ref_states: &[DVector<f64>],
    ref_inputs: &[DVector<f64>],
    steps: usize,
    model: &LtvModel,
    cost: &MpcCost,
    mode: MpcMode<'_>,
    horizon: usize,
    mut plant: F,
) -> Result<ClosedLoopLog>
where
    F: FnMut(usize, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut log = ClosedLoopLog {
        states: vec![x0.clone()],
        ..Default::default()
    };
    let mut x = x0.clone();
    for k in 0..steps {
        let window = ReferenceWindow::from_sequence(ref_states, ref_inputs, k, horizon);
        let sol = solve_nominal_mpc(&x, &window, model, cost, mode)?;
        log.max_kkt = log.max_kkt.max(sol.qp.kkt.max());
        let u = match mode {
            MpcMode::Standard { .. } => sol.v[0].clone(),
            MpcMode::Robust(tube) => control_step(&x, &sol.z[0], &sol.v[0], &tube.k, Some(&tube.z))?,
        };
        x = plant(k, &x, &u)?;
        log.nominal.push(sol.z[0].clone());
        log.inputs.push(u);
        log.states.push(x.clone());
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn workspace() -> Aabb {
        Aabb::new(Vector3::new(-2.0, -2.0, -2.0), Vector3::new(2.0, 2.0, 2.0)).unwrap()
    }

    #[test]
    fn disturbance_examples() {
        let zero = disturbance_bound_from_mass(&MassBelief::new(15.0, 0.0).unwrap(), 0.5, 0.1).unwrap();
        assert_eq!(zero.support(&dv(&[1., 1., 1., 1., 1., 1.])), 0.0);
        let w = disturbance_bound_from_mass(&MassBelief::new(15.0, 1.25).unwrap(), 0.5, 0.1).unwrap();
        let wv = w.support(&dv(&[0., 0., 0., 1., 0., 0.]));
        assert!((wv - (0.5 * 0.1 / 12.5 - 0.5 * 0.1 / 15.0)).abs() < 1e-18);
        assert!((wv - 6.667e-4).abs() < 1e-7);
        let w2 = disturbance_bound_from_mass(&MassBelief::new(15.0, 2.5).unwrap(), 0.5, 0.1).unwrap();
        assert!(w2.support(&dv(&[0., 0., 0., 1., 0., 0.])) > wv);
        assert!(MassBelief::new(4.0, 2.0).is_err());
    }

    #[test]
    fn one_step_matches_least_squares() {
        let cfg = MpcConfig::default();
        let model = cfg.model(15.0).unwrap();
        let cost = cfg.cost(&model).unwrap();
        let big = Polytope::symmetric_box(&DVector::from_element(6, 1e6)).unwrap();
        let bigu = Polytope::symmetric_box(&DVector::from_element(3, 1e6)).unwrap();
        let x0 = dv(&[0.1, -0.2, 0.05, 0.01, 0.0, -0.02]);
        let window = ReferenceWindow {
            states: vec![DVector::zeros(6), dv(&[0.05, 0.0, 0.0, 0.0, 0.0, 0.0])],
            inputs: vec![dv(&[0.01, 0.0, 0.02])],
        };
        let sol = solve_nominal_mpc(&x0, &window, &model, &cost, MpcMode::Standard { x: &big, u: &bigu }).unwrap();
        let (a, b, _) = model.stage(0);
        let lhs = &cost.r + b.transpose() * &cost.h * b;
        let rhs = &cost.r * &window.inputs[0] + b.transpose() * &cost.h * (&window.states[1] - a * &x0);
        let v = lhs.lu().solve(&rhs).unwrap();
        assert!((&sol.v[0] - v).amax() < 1e-10);
        assert!(sol.qp.kkt.max() < 1e-8);
    }

    #[test]
    fn on_reference_tracks_feedforward() {
        let cfg = MpcConfig::default();
        let model = cfg.model(15.0).unwrap();
        let cost = cfg.cost(&model).unwrap();
        let (a, b, _) = model.stage(0);
        let u = dv(&[0.1, -0.05, 0.0]);
        let mut states = vec![dv(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0])];
        for _ in 0..40 {
            let next = a * states.last().unwrap() + b * &u;
            states.push(next);
        }
        let inputs = vec![u.clone(); 40];
        let x = cfg.state_set(&workspace()).unwrap();
        let uset = cfg.input_set().unwrap();
        let log = run_closed_loop(&states[0], &states, &inputs, 20, &model, &cost, MpcMode::Standard { x: &x, u: &uset }, 20, |_, x, u| Ok(a * x + b * u)).unwrap();
        for (k, s) in log.states.iter().enumerate() {
            assert!((s - &states[k]).amax() <= 1e-6);
        }
        assert!((&log.inputs[0] - &u).amax() < 1e-6);
        assert!(log.max_kkt <= 1e-8);
    }

    #[test]
    fn terminal_cost_is_a_lyapunov_function() {
        let cfg = MpcConfig::default();
        let model = cfg.model(15.0).unwrap();
        let cost = cfg.cost(&model).unwrap();
        let k = cost.lqr_gain(&model, cfg.horizon).unwrap();
        let (a, b, _) = model.stage(0);
        let mut z = dv(&[0.3, -0.2, 0.1, 0.05, 0.0, -0.01]);
        let vf = |z: &DVector<f64>| z.dot(&(&cost.h * z));
        for _ in 0..50 {
            let v = &k * &z;
            let next = a * &z + b * &v;
            let stage = z.dot(&(&cost.q * &z)) + v.dot(&(&cost.r * &v));
            assert!(vf(&next) + stage <= vf(&z) + 1e-6);
            z = next;
        }
    }

    #[test]
    fn robust_step_keeps_inputs_in_bounds() {
        let cfg = MpcConfig::default();
        let model = cfg.model(12.0).unwrap();
        let cost = cfg.cost(&model).unwrap();
        let w = disturbance_bound_from_mass(&MassBelief::new(12.0, 2.0).unwrap(), cfg.u_max, cfg.dt).unwrap();
        let tube = TubeController::new(&model, &cost, &w, cfg.state_set(&workspace()).unwrap(), cfg.input_set().unwrap(), cfg.horizon, cfg.epsilon, cfg.s_max).unwrap();
        // Every tube vertex combined with every tightened input vertex stays in U.
        let counts = tube.z.block_vertex_counts();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ubar = tube.u_bar.vertices().unwrap();
        for _ in 0..2000 {
            let choice: Vec<usize> = counts.iter().map(|&c| rng.random_range(0..c)).collect();
            let e = tube.z.vertex(&choice);
            for v in &ubar {
                let u = control_step(&e, &DVector::zeros(6), v, &tube.k, Some(&tube.z)).unwrap();
                assert!(tube.u.contains(&u, 1e-12));
            }
        }
        assert_eq!(control_step(&dv(&[0.1; 6]), &dv(&[0.1; 6]), &dv(&[0.2, 0.0, 0.0]), &tube.k, None).unwrap(), dv(&[0.2, 0.0, 0.0]));
        let outside = DVector::from_element(6, 10.0);
        assert!(matches!(
            control_step(&outside, &DVector::zeros(6), &DVector::zeros(3), &tube.k, Some(&tube.z)),
            Err(Error::TubeViolation { .. })
        ));

        let x_now = dv(&[0.2, 0.1, -0.1, 0.0, 0.01, 0.0]);
        let window = ReferenceWindow::from_sequence(&[DVector::zeros(6)], &[], 0, cfg.horizon);
        let sol = solve_nominal_mpc(&x_now, &window, &model, &cost, MpcMode::Robust(&tube)).unwrap();
        assert!(tube.z.contains(&(&x_now - &sol.z[0]), 1e-9));
        assert!(sol.qp.kkt.max() <= 1e-8);
    }
}
