//! TOML scenario files. Every field has a default, so an empty file is the
//! default scenario; unknown keys are rejected.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::collision::{Aabb, EllipsoidObstacle, World};
use crate::dynamics::{ControlLimits, InertialParams, State, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::excitation::PoseNoise;
use crate::lqr::{QuadraticCost, SteeringConfig};
use crate::pipeline::{ExcitationSettings, ScenarioConfig};
use crate::planner::PlannerConfig;
use crate::tube_mpc::{MassBelief, MpcConfig};

const IDENTITY: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub seed: u64,
    pub poses: PosesSection,
    pub world: WorldSection,
    pub inertia: InertiaSection,
    pub prior: PriorSection,
    pub planner: PlannerSection,
    pub steering: SteeringSection,
    pub mpc: MpcSection,
    pub excitation: ExcitationSection,
    pub estimator: EstimatorSection,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Self {
            seed: 2024,
            poses: PosesSection::default(),
            world: WorldSection::default(),
            inertia: InertiaSection::default(),
            prior: PriorSection::default(),
            planner: PlannerSection::default(),
            steering: SteeringSection::default(),
            mpc: MpcSection::default(),
            excitation: ExcitationSection::default(),
            estimator: EstimatorSection::default(),
        }
    }
}

/// A rest pose; `attitude` is a scalar-last unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub position: [f64; 3],
    #[serde(default = "identity")]
    pub attitude: [f64; 4],
}

fn identity() -> [f64; 4] {
    IDENTITY
}

impl PoseSpec {
    fn at(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: [x, y, z],
            attitude: IDENTITY,
        }
    }

    fn to_state(self, field: &str) -> Result<State> {
        finite(field, &self.position)?;
        let q = Vector4::from(self.attitude);
        if !((q.norm() - 1.0).abs() < 1e-6) {
            return Err(field_err(field, "attitude must be a unit quaternion"));
        }
        Ok(State::at_rest(Vector3::from(self.position), q.normalize()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosesSection {
    pub assembly: PoseSpec,
    pub printer: PoseSpec,
    pub safe_area: PoseSpec,
}

impl Default for PosesSection {
    fn default() -> Self {
        Self {
            assembly: PoseSpec::at(0.5, 0.5, 1.0),
            printer: PoseSpec::at(2.5, 2.5, 1.0),
            safe_area: PoseSpec::at(2.5, 1.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    #[serde(default = "identity")]
    pub orientation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub safety_factor: f64,
    pub carrying_safety_factor: f64,
    pub obstacles: Vec<ObstacleSpec>,
}

impl Default for WorldSection {
    fn default() -> Self {
        let obs = |center: [f64; 3], semi_axes: [f64; 3]| ObstacleSpec {
            center,
            semi_axes,
            orientation: IDENTITY,
        };
        Self {
            bounds_min: [0.0, 0.0, 0.0],
            bounds_max: [3.0, 3.0, 2.0],
            safety_factor: 1.5,
            carrying_safety_factor: 2.0,
            obstacles: vec![
                obs([1.5, 1.5, 1.0], [0.25, 0.25, 0.25]),
                obs([0.8, 2.2, 1.0], [0.25, 0.25, 0.4]),
                obs([1.5, 0.4, 1.0], [0.15, 0.15, 0.15]),
            ],
        }
    }
}

impl WorldSection {
    pub fn to_world(&self) -> Result<World> {
        let bounds = Aabb::new(Vector3::from(self.bounds_min), Vector3::from(self.bounds_max))
            .map_err(|e| field_err("world.bounds", &e.to_string()))?;
        let obstacles = self
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| {
                EllipsoidObstacle::from_semi_axes(
                    Vector3::from(o.center),
                    Vector3::from(o.semi_axes),
                    Vector4::from(o.orientation),
                    self.safety_factor,
                )
                .map_err(|e| field_err(&format!("world.obstacles[{i}]"), &e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        World::new(obstacles, bounds).map_err(|e| field_err("world", &e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub mass: f64,
    pub inertia: [f64; 3],
}

impl BodySpec {
    fn to_params(self, field: &str) -> Result<InertialParams> {
        let p = InertialParams {
            mass: self.mass,
            inertia: Vector3::from(self.inertia),
        };
        p.validate().map_err(|e| field_err(field, &e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InertiaSection {
    pub astrobee: BodySpec,
    /// Simulation truth after the grasp.
    pub with_object: BodySpec,
}

impl Default for InertiaSection {
    fn default() -> Self {
        let spec = |p: InertialParams| BodySpec {
            mass: p.mass,
            inertia: p.inertia.into(),
        };
        Self {
            astrobee: spec(InertialParams::ASTROBEE),
            with_object: spec(InertialParams::ASTROBEE_WITH_OBJECT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub mass_mean: f64,
    pub mass_sigma: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            mass_mean: 12.0,
            mass_sigma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub gamma: f64,
    pub max_iterations: usize,
    pub goal_tolerance: f64,
    pub goal_bias: f64,
    pub velocity_bound: f64,
    pub rate_bound: f64,
    pub connect_tolerance: f64,
    pub resolution: Option<f64>,
    pub shortcut_terminal_scale: f64,
    pub goal_horizon_factor: usize,
    pub smoothing_attempts: usize,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let p = PlannerConfig::default();
        Self {
            gamma: p.gamma,
            max_iterations: p.max_iterations,
            goal_tolerance: p.goal_tolerance,
            goal_bias: p.goal_bias,
            velocity_bound: p.velocity_bound,
            rate_bound: p.rate_bound,
            connect_tolerance: p.connect_tolerance,
            resolution: p.resolution,
            shortcut_terminal_scale: p.shortcut_terminal_scale,
            goal_horizon_factor: p.goal_horizon_factor,
            smoothing_attempts: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of Q over the 13 state coordinates `(r, v, q, w)`.
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; INPUT_DIM],
    /// Q_N = terminal_scale * Q.
    pub terminal_scale: f64,
    pub force_max: f64,
    pub torque_max: f64,
}

impl Default for SteeringSection {
    fn default() -> Self {
        let limits = ControlLimits::default();
        Self {
            horizon: 20,
            dt: 0.2,
            q_diag: [
                10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1,
            ],
            r_diag: [100.0; INPUT_DIM],
            terminal_scale: 20.0,
            force_max: limits.force,
            torque_max: limits.torque,
        }
    }
}

impl SteeringSection {
    fn to_config(&self) -> Result<SteeringConfig> {
        finite("steering.q_diag", &self.q_diag)?;
        finite("steering.r_diag", &self.r_diag)?;
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&self.q_diag));
        let r = DMatrix::from_diagonal(&DVector::from_row_slice(&self.r_diag));
        let qn = &q * self.terminal_scale;
        let cost = QuadraticCost::regulator(q, r, qn).map_err(|e| field_err("steering", &e.to_string()))?;
        Ok(SteeringConfig {
            cost,
            horizon: self.horizon,
            dt: self.dt,
            limits: ControlLimits {
                force: self.force_max,
                torque: self.torque_max,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub dt: f64,
    pub q_diag: [f64; 6],
    pub r_diag: [f64; 3],
    pub u_max: f64,
    pub velocity_max: f64,
    pub epsilon: f64,
    pub s_max: usize,
    pub settle_steps: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        let m = MpcConfig::default();
        Self {
            horizon: m.horizon,
            dt: m.dt,
            q_diag: m.q_diag,
            r_diag: m.r_diag,
            u_max: m.u_max,
            velocity_max: m.velocity_max,
            epsilon: m.epsilon,
            s_max: m.s_max,
            settle_steps: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSection {
    pub horizon: usize,
    pub dt: f64,
    pub torque_max: f64,
    pub position_noise: f64,
    pub attitude_noise_deg: f64,
    pub region_min: [f64; 3],
    pub region_max: [f64; 3],
    pub max_iterations: usize,
    pub dither: f64,
    pub penalty: f64,
    pub boundary_tol: f64,
}

impl Default for ExcitationSection {
    fn default() -> Self {
        Self {
            horizon: 40,
            dt: 0.5,
            torque_max: 0.05,
            position_noise: 0.005,
            attitude_noise_deg: 0.5,
            region_min: [2.2, 1.2, 0.6],
            region_max: [2.9, 2.8, 1.4],
            max_iterations: 60,
            dither: 0.05,
            penalty: 1e4,
            boundary_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub max_iterations: usize,
    pub process_sigma: f64,
    pub rel_tol: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let e = EstimatorConfig::default();
        Self {
            max_iterations: e.max_iterations,
            process_sigma: e.process_sigma,
            rel_tol: e.rel_tol,
        }
    }
}

fn field_err(field: &str, msg: &str) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn finite(field: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(field_err(field, "values must be finite"))
    }
}

impl ScenarioFile {
    /// Parse TOML; syntax and type errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_scenario(&self) -> Result<ScenarioConfig> {
        let w = &self.world;
        let p = &self.planner;
        let m = &self.mpc;
        let e = &self.excitation;
        let mass_prior = MassBelief {
            mu: self.prior.mass_mean,
            sigma: self.prior.mass_sigma,
        };
        mass_prior.validate().map_err(|err| field_err("prior", &err.to_string()))?;
        finite("excitation.region_min", &e.region_min)?;
        finite("excitation.region_max", &e.region_max)?;
        let region = Aabb::new(Vector3::from(e.region_min), Vector3::from(e.region_max))
            .map_err(|err| field_err("excitation.region", &err.to_string()))?;
        let noise = PoseNoise {
            position: e.position_noise,
            attitude: e.attitude_noise_deg.to_radians(),
        };
        noise.validate().map_err(|err| field_err("excitation noise", &err.to_string()))?;
        let cfg = ScenarioConfig {
            assembly_pose: self.poses.assembly.to_state("poses.assembly")?,
            printer_pose: self.poses.printer.to_state("poses.printer")?,
            safe_area_pose: self.poses.safe_area.to_state("poses.safe_area")?,
            world: w.to_world()?,
            safety_factor: w.safety_factor,
            carrying_safety_factor: w.carrying_safety_factor,
            astrobee_params: self.inertia.astrobee.to_params("inertia.astrobee")?,
            astrobee_with_object_params: self.inertia.with_object.to_params("inertia.with_object")?,
            mass_prior,
            planner: PlannerConfig {
                gamma: p.gamma,
                max_iterations: p.max_iterations,
                steering: self.steering.to_config()?,
                goal_tolerance: p.goal_tolerance,
                rng_seed: 0,
                goal_bias: p.goal_bias,
                velocity_bound: p.velocity_bound,
                rate_bound: p.rate_bound,
                connect_tolerance: p.connect_tolerance,
                resolution: p.resolution,
                shortcut_terminal_scale: p.shortcut_terminal_scale,
                goal_horizon_factor: p.goal_horizon_factor,
            },
            smoothing_attempts: p.smoothing_attempts,
            mpc: MpcConfig {
                horizon: m.horizon,
                dt: m.dt,
                q_diag: m.q_diag,
                r_diag: m.r_diag,
                u_max: m.u_max,
                velocity_max: m.velocity_max,
                epsilon: m.epsilon,
                s_max: m.s_max,
            },
            settle_steps: m.settle_steps,
            excitation: ExcitationSettings {
                horizon: e.horizon,
                dt: e.dt,
                torque_max: e.torque_max,
                noise,
                region,
                max_iterations: e.max_iterations,
                dither: e.dither,
                penalty: e.penalty,
                boundary_tol: e.boundary_tol,
            },
            estimator: EstimatorConfig {
                max_iterations: self.estimator.max_iterations,
                process_sigma: self.estimator.process_sigma,
                rel_tol: self.estimator.rel_tol,
            },
            rng_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
