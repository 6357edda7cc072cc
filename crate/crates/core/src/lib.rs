//! Motion planning, robust tube MPC, and inertial parameter estimation for
//! free-flying rigid-body robots, plus a deterministic simulator of a
//! three-segment assembly scenario (transit, excite and estimate, robust
//! transit).

pub mod collision;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod excitation;
pub mod io;
pub mod lqr;
pub mod pipeline;
pub mod planner;
pub mod trajectory;
pub mod tube_mpc;

pub use dynamics::{ControlInput, ControlLimits, InertialParams, LtvModel, State};
pub use error::{Error, Result};
pub use trajectory::Trajectory;
