use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dynamics, State, Transition};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `x' = x + dt·v`, `v' = v + dt·a`. Exactly linear, used as a ground
/// truth for channel learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleIntegrator {
    pub dt: f64,
    pub max_force: f64,
    pub max_steps: usize,
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self {
            dt: 1.0,
            max_force: 1.0,
            max_steps: 50,
        }
    }
}

impl DoubleIntegrator {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.max_force > 0.0) || self.max_steps == 0 {
            return Err(Error::Config("double_integrator: dt, max_force and max_steps must be positive".into()));
        }
        Ok(())
    }
}

impl Dynamics for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn action_bounds(&self) -> Vec<f64> {
        vec![self.max_force]
    }
    fn max_steps(&self) -> usize {
        self.max_steps
    }
    fn initial_state(&self, rng: &mut Rng) -> State {
        vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
    }
    fn advance(&self, state: &[f64], action: &[f64]) -> Transition {
        Transition {
            next_state: vec![state[0] + self.dt * state[1], state[1] + self.dt * action[0]],
            terminal: false,
            goal_hit: None,
        }
    }
    fn squared_deviation(&self, state: &[f64]) -> f64 {
        state[0] * state[0] + state[1] * state[1]
    }
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0] / 10.0, state[1] / 3.0]
    }
}
