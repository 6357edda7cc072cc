//! Standard and robust tube model predictive control on the translational
//! double integrator. Attitude is assumed to be tracked separately.

pub mod mpc;
pub mod polytope;
pub mod qp;
pub mod rpi;

pub use mpc::{
    control_step, disturbance_bound_from_mass, run_closed_loop, solve_nominal_mpc,
    tighten_constraints, ClosedLoopLog, MassBelief, MpcConfig, MpcCost, MpcMode, MpcSolution,
    ReferenceWindow, TubeController,
};
pub use polytope::{LinearImage, Polytope, SupportFunction};
pub use qp::{solve_qp, KktResiduals, QpProblem, QpSolution};
pub use rpi::{compute_rpi, RpiSet};
