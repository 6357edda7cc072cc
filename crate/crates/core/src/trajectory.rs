use serde::{Deserialize, Serialize};

use crate::dynamics::{step_fast, ControlInput, InertialParams, State};
use crate::error::{Error, Result};

/// Fixed-step sequence of states with the inputs held between them.
///
/// `inputs[k]` drives `states[k]` to `states[k + 1]`, so there is always one
/// more state than input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, states: Vec<State>, inputs: Vec<ControlInput>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("trajectory has no states".into()));
        }
        if inputs.len() + 1 != states.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states need {} inputs, got {}",
                states.len(),
                states.len() - 1,
                inputs.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            t0,
            dt,
            states,
            inputs,
        })
    }

    pub fn single(state: State, dt: f64) -> Self {
        Self {
            t0: 0.0,
            dt,
            states: vec![state],
            inputs: Vec::new(),
        }
    }

    /// Number of steps (inputs).
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn first_state(&self) -> &State {
        &self.states[0]
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    /// Append `other`, whose first state must be this trajectory's last.
    pub fn append(&mut self, other: &Trajectory) {
        debug_assert_eq!(self.dt, other.dt);
        self.states.extend_from_slice(&other.states[1..]);
        self.inputs.extend_from_slice(&other.inputs);
    }

    /// Sub-trajectory covering states `from..=to`.
    pub fn slice(&self, from: usize, to: usize) -> Trajectory {
        Trajectory {
            t0: self.time(from),
            dt: self.dt,
            states: self.states[from..=to].to_vec(),
            inputs: self.inputs[from..to].to_vec(),
        }
    }

    /// Largest per-step mismatch between stored states and replaying the stored
    /// inputs from each stored state.
    pub fn replay_error(&self, params: &InertialParams) -> f64 {
        self.inputs
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let next = step_fast(&self.states[k], u, params, self.dt);
                (next.to_vector() - self.states[k + 1].to_vector()).amax()
            })
            .fold(0.0, f64::max)
    }

    /// Re-simulate from the first state with every input held for `factor`
    /// sub-steps of `dt / factor`.
    pub fn refine(&self, factor: usize, params: &InertialParams) -> Trajectory {
        let factor = factor.max(1);
        let dt = self.dt / factor as f64;
        let mut states = Vec::with_capacity(self.steps() * factor + 1);
        let mut inputs = Vec::with_capacity(self.steps() * factor);
        let mut x = self.states[0];
        states.push(x);
        for u in &self.inputs {
            for _ in 0..factor {
                x = step_fast(&x, u, params, dt);
                states.push(x);
                inputs.push(*u);
            }
        }
        Trajectory {
            t0: self.t0,
            dt,
            states,
            inputs,
        }
    }

    /// Rollout of `inputs` through the nonlinear model from `x0`.
    pub fn rollout(x0: State, inputs: Vec<ControlInput>, params: &InertialParams, dt: f64) -> Trajectory {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        let mut x = x0;
        states.push(x);
        for u in &inputs {
            x = step_fast(&x, u, params, dt);
            states.push(x);
        }
        Trajectory {
            t0: 0.0,
            dt,
            states,
            inputs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn rejects_inconsistent_lengths() {
        let s = State::default();
        assert!(Trajectory::new(0.0, 0.1, vec![s, s], vec![]).is_err());
        assert!(Trajectory::new(0.0, 0.1, vec![], vec![]).is_err());
        assert!(Trajectory::new(0.0, 0.1, vec![s, s], vec![ControlInput::zero()]).is_ok());
    }

    #[test]
    fn refine_matches_translation_exactly() {
        let p = InertialParams::ASTROBEE;
        let u = ControlInput::force(Vector3::new(0.3, -0.2, 0.1));
        let coarse = Trajectory::rollout(State::default(), vec![u; 10], &p, 0.2);
        let fine = coarse.refine(2, &p);
        assert_eq!(fine.steps(), 20);
        for k in 0..=10 {
            let d = (fine.states[2 * k].r - coarse.states[k].r).norm();
            assert!(d < 1e-14);
        }
        assert!(fine.replay_error(&p) < 1e-15);
    }
}
