//! The three-segment assembly scenario: transit to the printer with known
//! parameters, an exciting transfer to a safe area followed by batch
//! estimation, and a robust transit to the assembly site with the estimate.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{default_resolution, trajectory_free, Aabb, EllipsoidObstacle, World};
use crate::dynamics::{step_rk4, ControlInput, InertialParams, State};
use crate::error::{Error, PlannerStats, Result};
use crate::estimator::{batch_estimate, simulate_measurements, EstimationResult, EstimatorConfig};
use crate::excitation::{optimize_excitation, ExcitationConfig, PoseNoise};
use crate::lqr::ValueFunction;
use crate::planner::{path_cost, plan, shortcut_smooth, PlannerConfig};
use crate::trajectory::Trajectory;
use crate::tube_mpc::{
    disturbance_bound_from_mass, run_closed_loop, MassBelief, MpcConfig, MpcCost, MpcMode,
    Polytope, TubeController,
};

/// Excitation design settings that do not depend on the segment endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationSettings {
    pub horizon: usize,
    pub dt: f64,
    pub torque_max: f64,
    pub noise: PoseNoise,
    /// Obstacle-free box between the printer and the safe area.
    pub region: Aabb,
    pub max_iterations: usize,
    pub dither: f64,
    pub penalty: f64,
    pub boundary_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub assembly_pose: State,
    pub printer_pose: State,
    pub safe_area_pose: State,
    /// Obstacles at the free-flying safety factor.
    pub world: World,
    pub safety_factor: f64,
    /// Safety factor once the printed part is grasped.
    pub carrying_safety_factor: f64,
    pub astrobee_params: InertialParams,
    /// Simulation truth after the grasp, hidden from the controllers.
    pub astrobee_with_object_params: InertialParams,
    pub mass_prior: MassBelief,
    pub planner: PlannerConfig,
    pub smoothing_attempts: usize,
    pub mpc: MpcConfig,
    /// Steps spent holding the goal after a reference ends.
    pub settle_steps: usize,
    pub excitation: ExcitationSettings,
    pub estimator: EstimatorConfig,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        crate::config::ScenarioFile::default()
            .to_scenario()
            .expect("default scenario is valid")
    }
}

fn refine_factor(coarse: f64, fine: f64) -> Result<usize> {
    let r = coarse / fine;
    let k = r.round();
    if !(k >= 1.0 && (r - k).abs() <= 1e-9 * r) {
        return Err(Error::Config(format!(
            "reference step {coarse} is not an integer multiple of the control step {fine}"
        )));
    }
    Ok(k as usize)
}

impl ScenarioConfig {
    /// Add a placed part to the world; it is avoided in every later run.
    pub fn add_assembled_part(&mut self, part: EllipsoidObstacle) -> Result<()> {
        part.validate()?;
        self.world.obstacles.push(part.with_safety_factor(self.safety_factor));
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.mpc.validate()?;
        self.mass_prior.validate()?;
        self.astrobee_params.validate()?;
        self.astrobee_with_object_params.validate()?;
        if !(self.safety_factor >= 1.0) || self.world.obstacles.iter().any(|o| o.safety_factor != self.safety_factor) {
            return Err(Error::Config("world obstacles must all use the configured safety factor (at least 1)".into()));
        }
        if !(self.carrying_safety_factor >= 1.0) {
            return Err(Error::Config("carrying safety factor must be at least 1".into()));
        }
        refine_factor(self.planner.steering.dt, self.mpc.dt)?;
        refine_factor(self.excitation.dt, self.mpc.dt)?;
        let carrying = self.world.with_safety_factor(self.carrying_safety_factor);
        for (name, pose, world) in [
            ("assembly", &self.assembly_pose, &self.world),
            ("printer", &self.printer_pose, &self.world),
            ("printer", &self.printer_pose, &carrying),
            ("safe area", &self.safe_area_pose, &carrying),
            ("assembly", &self.assembly_pose, &carrying),
        ] {
            if !world.position_free(&pose.r) {
                return Err(Error::Config(format!("{name} pose is not collision-free")));
            }
        }
        for (name, pose) in [("printer", &self.printer_pose), ("safe area", &self.safe_area_pose)] {
            if !self.excitation.region.contains(&pose.r) {
                return Err(Error::Config(format!("{name} pose is outside the excitation region")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Violations {
    pub collision: usize,
    pub input: usize,
    pub state: usize,
}

impl Violations {
    pub fn total(&self) -> usize {
        self.collision + self.input + self.state
    }
}

/// A closed-loop run of one MPC configuration against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRun {
    pub executed: Trajectory,
    /// Nominal translational state chosen at each step.
    pub nominal: Vec<[f64; 6]>,
    /// Largest position error against the reference while it lasts.
    pub peak_tracking_error: f64,
    pub terminal_error: f64,
    pub peak_input: f64,
    pub max_kkt: f64,
    pub violations: Violations,
}

/// MPC model, weights and constraint sets for one controller variant.
pub struct Tracker {
    pub model_mass: f64,
    model: crate::dynamics::LtvModel,
    cost: MpcCost,
    x: Polytope,
    u: Polytope,
    pub tube: Option<TubeController>,
}

impl Tracker {
    pub fn standard(mpc: &MpcConfig, model_mass: f64, bounds: &Aabb) -> Result<Self> {
        let model = mpc.model(model_mass)?;
        let cost = mpc.cost(&model)?;
        Ok(Self {
            model_mass,
            model,
            cost,
            x: mpc.state_set(bounds)?,
            u: mpc.input_set()?,
            tube: None,
        })
    }

    pub fn robust(mpc: &MpcConfig, belief: &MassBelief, bounds: &Aabb) -> Result<Self> {
        let mut t = Self::standard(mpc, belief.mu, bounds)?;
        let w = disturbance_bound_from_mass(belief, mpc.u_max, mpc.dt)?;
        t.tube = Some(TubeController::new(
            &t.model,
            &t.cost,
            &w,
            t.x.clone(),
            t.u.clone(),
            mpc.horizon,
            mpc.epsilon,
            mpc.s_max,
        )?);
        Ok(t)
    }

    /// Per-axis nominal force authority; the full limit without a tube.
    pub fn input_authority(&self, mpc: &MpcConfig) -> Vector3<f64> {
        match &self.tube {
            Some(t) => {
                let a = t.input_authority();
                Vector3::new(a[0], a[1], a[2])
            }
            None => Vector3::repeat(mpc.u_max),
        }
    }

    fn mode(&self) -> MpcMode<'_> {
        match &self.tube {
            Some(t) => MpcMode::Robust(t),
            None => MpcMode::Standard { x: &self.x, u: &self.u },
        }
    }

    /// Track `reference` (at the control step) and then hold `goal`, with the
    /// truth model as plant and reference torques applied open loop.
    pub fn track(
        &self,
        mpc: &MpcConfig,
        reference: &Trajectory,
        goal: &State,
        start: &State,
        truth: &InertialParams,
        world: &World,
        settle_steps: usize,
    ) -> Result<TrackingRun> {
        let dt = mpc.dt;
        if (reference.dt - dt).abs() > 1e-12 {
            return Err(Error::InvalidArgument("reference must use the control step".into()));
        }
        let n_ref = reference.steps();
        // The end of the reference is held for one horizon before the goal so
        // the lookahead never pulls the vehicle off the reference early.
        let pause = mpc.horizon;
        let steps = n_ref + pause + settle_steps;
        let t6 = |s: &State| DVector::from_column_slice(s.translational().as_slice());
        let at_rest = |s: &State| {
            let mut v = t6(s);
            v.rows_mut(3, 3).fill(0.0);
            v
        };
        let mut ref_states: Vec<DVector<f64>> = reference.states.iter().map(t6).collect();
        ref_states.extend(std::iter::repeat_n(at_rest(reference.final_state()), pause));
        ref_states.extend(std::iter::repeat_n(at_rest(goal), settle_steps));
        let ref_inputs: Vec<DVector<f64>> = reference
            .inputs
            .iter()
            .map(|u| DVector::from_column_slice(u.f.as_slice()))
            .chain(std::iter::repeat_n(DVector::zeros(3), pause + settle_steps))
            .collect();

        let mut full = *start;
        let mut states = vec![full];
        let mut inputs = Vec::with_capacity(steps);
        let log = run_closed_loop(
            &t6(start),
            &ref_states,
            &ref_inputs,
            steps,
            &self.model,
            &self.cost,
            self.mode(),
            mpc.horizon,
            |k, _, u| {
                let tau = if k < n_ref { reference.inputs[k].tau } else { Vector3::zeros() };
                let applied = ControlInput {
                    f: Vector3::new(u[0], u[1], u[2]),
                    tau,
                };
                full = step_rk4(&full, &applied, truth, dt)?;
                states.push(full);
                inputs.push(applied);
                Ok(t6(&full))
            },
        )?;
        let executed = Trajectory {
            t0: 0.0,
            dt,
            states,
            inputs,
        };
        let peak_tracking_error = (0..=n_ref)
            .map(|k| (executed.states[k].r - reference.states[k].r).norm())
            .fold(0.0, f64::max);
        let terminal_error = (executed.final_state().r - goal.r).norm();
        let peak_input = executed.inputs.iter().map(|u| u.f.amax()).fold(0.0, f64::max);
        let violations = count_violations(&executed, world, mpc);
        Ok(TrackingRun {
            nominal: log
                .nominal
                .iter()
                .map(|z| std::array::from_fn(|i| z[i]))
                .collect(),
            executed,
            peak_tracking_error,
            terminal_error,
            peak_input,
            max_kkt: log.max_kkt,
            violations,
        })
    }
}

/// Collision (per interpolated step), input-bound and state-bound violations.
pub fn count_violations(executed: &Trajectory, world: &World, mpc: &MpcConfig) -> Violations {
    let res = default_resolution(world);
    let tol = 1e-9;
    let collision = if executed.steps() == 0 {
        usize::from(!world.position_free(&executed.states[0].r))
    } else {
        (0..executed.steps())
            .filter(|&k| !trajectory_free(&executed.slice(k, k + 1), world, res))
            .count()
    };
    let input = executed
        .inputs
        .iter()
        .filter(|u| u.f.amax() > mpc.u_max + tol)
        .count();
    let state = executed
        .states
        .iter()
        .filter(|s| {
            let b = &world.bounds;
            let inside = (0..3).all(|i| s.r[i] >= b.min[i] - tol && s.r[i] <= b.max[i] + tol);
            !inside || s.v.amax() > mpc.velocity_max + tol
        })
        .count();
    Violations {
        collision,
        input,
        state,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub stats: PlannerStats,
    pub raw_cost: f64,
    pub smoothed_cost: f64,
    pub raw: Trajectory,
}

/// One comparison controller run in segment 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub model_mass: f64,
    pub input_authority: [f64; 3],
    pub run: Option<TrackingRun>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub segment: u8,
    /// Reference at its design step (plan or excitation).
    pub planned: Trajectory,
    pub tracking: TrackingRun,
    pub plan: Option<PlanSummary>,
    pub estimation: Option<EstimationResult>,
    pub posterior: Option<MassBelief>,
    pub input_authority: [f64; 3],
    pub ablations: Vec<AblationReport>,
    pub wall_clock: f64,
}

impl SegmentReport {
    pub fn violations(&self) -> usize {
        self.tracking.violations.total()
    }

    pub fn executed(&self) -> &Trajectory {
        &self.tracking.executed
    }

    /// The report with its wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> SegmentReport {
        SegmentReport {
            wall_clock: 0.0,
            ..self.clone()
        }
    }
}

/// Sub-seeds drawn in a fixed order from the master seed.
#[derive(Debug, Clone, Copy)]
struct Seeds {
    plan1: u64,
    smooth1: u64,
    excitation: u64,
    measurement: u64,
    plan3: u64,
    smooth3: u64,
}

impl Seeds {
    fn new(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            plan1: rng.random(),
            smooth1: rng.random(),
            excitation: rng.random(),
            measurement: rng.random(),
            plan3: rng.random(),
            smooth3: rng.random(),
        }
    }
}

fn plan_and_smooth(
    start: &State,
    goal: &State,
    world: &World,
    params: &InertialParams,
    planner: &PlannerConfig,
    attempts: usize,
    smooth_seed: u64,
) -> Result<(Trajectory, PlanSummary)> {
    let res = plan(start, goal, world, params, planner)?;
    let mut rng = ChaCha8Rng::seed_from_u64(smooth_seed);
    let smoothed = shortcut_smooth(&res.trajectory, world, params, planner, attempts, &mut rng)?;
    let cost = &planner.steering.cost;
    let goal_ref = *res.trajectory.final_state();
    let summary = PlanSummary {
        stats: res.stats,
        raw_cost: path_cost(&res.trajectory, cost),
        smoothed_cost: crate::lqr::trajectory_cost(&smoothed, &goal_ref, cost),
        raw: res.trajectory,
    };
    Ok((smoothed, summary))
}

fn authority_array(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// `planned` resampled at the control step, followed by a braking tail that
/// brings it to rest with per-axis forces of at most `force_max`.
pub fn tracking_reference(
    planned: &Trajectory,
    control_dt: f64,
    params: &InertialParams,
    force_max: f64,
) -> Result<Trajectory> {
    if !(force_max > 0.0) {
        return Err(Error::InvalidArgument("braking force must be positive".into()));
    }
    let mut reference = planned.refine(refine_factor(planned.dt, control_dt)?, params);
    reference.dt = control_dt;
    let mut x = *reference.final_state();
    while x.v.amax() > 1e-12 {
        let f = (-params.mass / control_dt * x.v).map(|c| c.clamp(-force_max, force_max));
        let u = ControlInput { f, tau: Vector3::zeros() };
        x = step_rk4(&x, &u, params, control_dt)?;
        // forces act in the world frame, so the last step stops exactly up to rounding
        if x.v.amax() <= 1e-12 {
            x.v = Vector3::zeros();
        }
        reference.states.push(x);
        reference.inputs.push(u);
    }
    Ok(reference)
}

/// Transit from the assembly area to the printer with known parameters and
/// standard MPC.
pub fn run_segment1(cfg: &ScenarioConfig) -> Result<SegmentReport> {
    let clock = Instant::now();
    cfg.validate()?;
    let seeds = Seeds::new(cfg.rng_seed);
    let params = cfg.astrobee_params;
    let planner = PlannerConfig {
        rng_seed: seeds.plan1,
        ..cfg.planner.clone()
    };
    let (planned, summary) = plan_and_smooth(
        &cfg.assembly_pose,
        &cfg.printer_pose,
        &cfg.world,
        &params,
        &planner,
        cfg.smoothing_attempts,
        seeds.smooth1,
    )?;
    let reference = tracking_reference(&planned, cfg.mpc.dt, &params, cfg.mpc.u_max)?;
    let tracker = Tracker::standard(&cfg.mpc, params.mass, &cfg.world.bounds)?;
    let tracking = tracker.track(
        &cfg.mpc,
        &reference,
        &cfg.printer_pose,
        &cfg.assembly_pose,
        &params,
        &cfg.world,
        cfg.settle_steps,
    )?;
    Ok(SegmentReport {
        segment: 1,
        planned,
        tracking,
        plan: Some(summary),
        estimation: None,
        posterior: None,
        input_authority: authority_array(&tracker.input_authority(&cfg.mpc)),
        ablations: Vec::new(),
        wall_clock: clock.elapsed().as_secs_f64(),
    })
}

/// Parameters the controller believes in before estimation.
pub fn prior_params(cfg: &ScenarioConfig) -> InertialParams {
    InertialParams {
        mass: cfg.mass_prior.mu,
        inertia: cfg.astrobee_params.inertia,
    }
}

/// Exciting transfer from the printer to the safe area under robust MPC with
/// the prior, followed by batch estimation from noisy pose measurements.
pub fn run_segment2(cfg: &ScenarioConfig, start: &State) -> Result<SegmentReport> {
    let clock = Instant::now();
    cfg.validate()?;
    let seeds = Seeds::new(cfg.rng_seed);
    let world = cfg.world.with_safety_factor(cfg.carrying_safety_factor);
    let belief_params = prior_params(cfg);
    let tracker = Tracker::robust(&cfg.mpc, &cfg.mass_prior, &world.bounds)?;
    let authority = tracker.input_authority(&cfg.mpc);
    let ex = &cfg.excitation;
    let exc_cfg = ExcitationConfig {
        horizon: ex.horizon,
        dt: ex.dt,
        force_max: authority.min(),
        torque_max: ex.torque_max,
        noise: ex.noise,
        start: *start,
        goal: cfg.safe_area_pose,
        region: ex.region,
        ridge: crate::excitation::DEFAULT_RIDGE,
        penalty: ex.penalty,
        boundary_tol: ex.boundary_tol,
        max_iterations: ex.max_iterations,
        rel_tol: 1e-6,
        dither: ex.dither,
        rng_seed: seeds.excitation,
    };
    let design = optimize_excitation(&exc_cfg, &belief_params)?;
    let planned = design.trajectory;
    let reference = tracking_reference(&planned, cfg.mpc.dt, &belief_params, authority.min())?;
    let tracking = tracker.track(
        &cfg.mpc,
        &reference,
        &cfg.safe_area_pose,
        start,
        &cfg.astrobee_with_object_params,
        &world,
        cfg.settle_steps,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.measurement);
    let data = simulate_measurements(&tracking.executed, &ex.noise, &mut rng);
    let estimation = batch_estimate(&data, &belief_params, &cfg.estimator)?;
    let posterior = estimation.mass_belief()?;
    Ok(SegmentReport {
        segment: 2,
        planned,
        tracking,
        plan: None,
        estimation: Some(estimation),
        posterior: Some(posterior),
        input_authority: authority_array(&authority),
        ablations: Vec::new(),
        wall_clock: clock.elapsed().as_secs_f64(),
    })
}

/// What segment 3 inherits from the estimation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub belief: MassBelief,
    pub params: InertialParams,
}

impl Posterior {
    pub fn from_estimate(est: &EstimationResult) -> Result<Self> {
        Ok(Self {
            belief: est.mass_belief()?,
            params: est.theta_hat,
        })
    }
}

fn ablation(
    name: &str,
    model_mass: f64,
    tracker: Result<Tracker>,
    cfg: &ScenarioConfig,
    reference: &Trajectory,
    start: &State,
    world: &World,
) -> AblationReport {
    let tracker = match tracker {
        Ok(t) => t,
        Err(e) => {
            return AblationReport {
                name: name.into(),
                model_mass,
                input_authority: [0.0; 3],
                run: None,
                failure: Some(e.to_string()),
            }
        }
    };
    let run = tracker.track(
        &cfg.mpc,
        reference,
        &cfg.assembly_pose,
        start,
        &cfg.astrobee_with_object_params,
        world,
        cfg.settle_steps,
    );
    let (run, failure) = match run {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    AblationReport {
        name: name.into(),
        model_mass: tracker.model_mass,
        input_authority: authority_array(&tracker.input_authority(&cfg.mpc)),
        run,
        failure,
    }
}

/// Replanned transit to the assembly site with the estimate and robust MPC
/// using the posterior tube, plus the two comparison controllers that ignore
/// the estimate.
pub fn run_segment3(cfg: &ScenarioConfig, start: &State, posterior: &Posterior) -> Result<SegmentReport> {
    let clock = Instant::now();
    cfg.validate()?;
    posterior.belief.validate()?;
    let params = if posterior.params.validate().is_ok() {
        posterior.params
    } else {
        InertialParams {
            mass: posterior.belief.mu,
            inertia: cfg.astrobee_params.inertia,
        }
    };
    let seeds = Seeds::new(cfg.rng_seed);
    let world = cfg.world.with_safety_factor(cfg.carrying_safety_factor);
    let tracker = Tracker::robust(&cfg.mpc, &posterior.belief, &world.bounds)?;
    let authority = tracker.input_authority(&cfg.mpc);
    let mut planner = PlannerConfig {
        rng_seed: seeds.plan3,
        ..cfg.planner.clone()
    };
    planner.steering.limits.force = planner.steering.limits.force.min(authority.min());
    let (planned, summary) = plan_and_smooth(
        start,
        &cfg.assembly_pose,
        &world,
        &params,
        &planner,
        cfg.smoothing_attempts,
        seeds.smooth3,
    )?;
    let reference = tracking_reference(&planned, cfg.mpc.dt, &params, authority.min())?;
    let tracking = tracker.track(
        &cfg.mpc,
        &reference,
        &cfg.assembly_pose,
        start,
        &cfg.astrobee_with_object_params,
        &world,
        cfg.settle_steps,
    )?;
    let ablations = vec![
        ablation(
            "standard MPC, pre-grasp model",
            cfg.astrobee_params.mass,
            Tracker::standard(&cfg.mpc, cfg.astrobee_params.mass, &world.bounds),
            cfg,
            &reference,
            start,
            &world,
        ),
        ablation(
            "robust MPC, prior disturbance bound",
            cfg.mass_prior.mu,
            Tracker::robust(&cfg.mpc, &cfg.mass_prior, &world.bounds),
            cfg,
            &reference,
            start,
            &world,
        ),
    ];
    Ok(SegmentReport {
        segment: 3,
        planned,
        tracking,
        plan: Some(summary),
        estimation: None,
        posterior: Some(posterior.belief),
        input_authority: authority_array(&authority),
        ablations,
        wall_clock: clock.elapsed().as_secs_f64(),
    })
}

/// A pipeline run that stopped early, with the segments that completed.
#[derive(Debug)]
pub struct PipelineFailure {
    pub completed: Vec<SegmentReport>,
    pub error: Error,
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed segments)", self.error, self.completed.len())
    }
}

impl std::error::Error for PipelineFailure {}

/// Segments 1 to 3 in order, threading end states and the mass belief.
pub fn run_full(cfg: &ScenarioConfig) -> std::result::Result<Vec<SegmentReport>, PipelineFailure> {
    let mut reports = Vec::with_capacity(3);
    let fail = |reports: Vec<SegmentReport>, segment: u8, e: Error| PipelineFailure {
        completed: reports,
        error: e.in_segment(segment),
    };
    let s1 = match run_segment1(cfg) {
        Ok(r) => r,
        Err(e) => return Err(fail(reports, 1, e)),
    };
    let end1 = *s1.executed().final_state();
    reports.push(s1);
    let s2 = match run_segment2(cfg, &end1) {
        Ok(r) => r,
        Err(e) => return Err(fail(reports, 2, e)),
    };
    let end2 = *s2.executed().final_state();
    let posterior = match s2.estimation.as_ref().map(Posterior::from_estimate) {
        Some(Ok(p)) => p,
        Some(Err(e)) => return Err(fail(reports, 2, e)),
        None => unreachable!("segment 2 always estimates"),
    };
    reports.push(s2);
    match run_segment3(cfg, &end2, &posterior) {
        Ok(r) => reports.push(r),
        Err(e) => return Err(fail(reports, 3, e)),
    }
    Ok(reports)
}

/// Value-metric distance helper used by reports: `metric` of `x` relative to
/// `target` under `vf` at the first stage.
pub fn goal_metric(vf: &ValueFunction, x: &State, target: &State) -> Result<f64> {
    let e = crate::dynamics::state_error(x, target);
    vf.metric(0, &DVector::from_column_slice(e.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::identity_quaternion;

    #[test]
    fn refine_factor_requires_integer_ratio() {
        assert_eq!(refine_factor(0.2, 0.1).unwrap(), 2);
        assert_eq!(refine_factor(0.5, 0.1).unwrap(), 5);
        assert!(refine_factor(0.25, 0.1).is_err());
        assert!(refine_factor(0.05, 0.1).is_err());
    }

    #[test]
    fn braking_tail_is_consistent_and_bounded() {
        let p = InertialParams::ASTROBEE;
        let mut x0 = State::at_rest(Vector3::new(1.0, 1.0, 1.0), identity_quaternion());
        x0.v = Vector3::new(0.08, -0.03, 0.0);
        let coarse = Trajectory::rollout(x0, vec![ControlInput::zero(); 3], &p, 0.2);
        let r = tracking_reference(&coarse, 0.1, &p, 0.2).unwrap();
        assert_eq!(r.dt, 0.1);
        assert_eq!(r.final_state().v, Vector3::zeros());
        assert!(r.inputs[6..].iter().all(|u| u.f.amax() <= 0.2 && u.tau == Vector3::zeros()));
        assert!(r.replay_error(&p) < 1e-12);
        let refined = coarse.refine(2, &p);
        assert_eq!(&r.states[..=6], &refined.states[..]);
    }

    #[test]
    fn violations_count_each_kind() {
        let mut cfg = ScenarioConfig::default();
        cfg.mpc.velocity_max = 0.3;
        let p = InertialParams::ASTROBEE;
        let start = State::at_rest(Vector3::new(1.5, 1.2, 1.0), identity_quaternion());
        let mut t = Trajectory::rollout(start, vec![ControlInput::zero(); 2], &p, 0.1);
        t.inputs[0].f.x = 0.6;
        t.states[2].v.y = 0.5;
        let v = count_violations(&t, &cfg.world, &cfg.mpc);
        assert_eq!(v.input, 1);
        assert_eq!(v.state, 1);
        // (1.5, 1.2) is inside the inflated middle obstacle
        assert_eq!(v.collision, 2);
        assert_eq!(v.total(), 4);
    }

    #[test]
    fn starting_at_the_printer_is_trivial() {
        let mut cfg = ScenarioConfig::default();
        cfg.assembly_pose = cfg.printer_pose;
        cfg.settle_steps = 5;
        let rep = run_segment1(&cfg).unwrap();
        assert_eq!(rep.planned.steps(), 0);
        assert_eq!(rep.violations(), 0);
        assert!(rep.tracking.terminal_error < 1e-12);
    }

    #[test]
    fn obstacle_free_world_segment1() {
        let mut cfg = ScenarioConfig::default();
        cfg.world.obstacles.clear();
        cfg.settle_steps = 40;
        let rep = run_segment1(&cfg).unwrap();
        assert_eq!(rep.violations(), 0);
        assert!(rep.tracking.terminal_error <= 0.05);
        assert!(rep.tracking.peak_input <= cfg.mpc.u_max + 1e-9);
    }

    #[test]
    fn assembled_parts_use_the_world_safety_factor() {
        let mut cfg = ScenarioConfig::default();
        let part = EllipsoidObstacle::from_semi_axes(
            Vector3::new(0.5, 1.5, 1.0),
            Vector3::new(0.1, 0.1, 0.1),
            identity_quaternion(),
            1.0,
        )
        .unwrap();
        cfg.add_assembled_part(part).unwrap();
        assert_eq!(cfg.world.obstacles.len(), 4);
        assert_eq!(cfg.world.obstacles[3].safety_factor, cfg.safety_factor);
        cfg.validate().unwrap();
    }

    #[test]
    fn seeds_depend_on_master() {
        let a = Seeds::new(1);
        let b = Seeds::new(1);
        let c = Seeds::new(2);
        assert_eq!(a.plan1, b.plan1);
        assert_eq!(a.measurement, b.measurement);
        assert_ne!(a.plan1, c.plan1);
        assert_ne!(a.plan1, a.plan3);
    }
}
