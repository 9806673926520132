use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dynamics, State, Transition};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A point mass under pure displacement control in `[0, size]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallInBox {
    pub size: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for BallInBox {
    fn default() -> Self {
        Self {
            size: 10.0,
            max_step: 0.5,
            max_steps: 200,
        }
    }
}

impl BallInBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.max_step > 0.0) || self.max_steps == 0 {
            return Err(Error::Config("ball_in_box: size, max_step and max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 2] {
        [self.size / 2.0, self.size / 2.0]
    }
}

impl Dynamics for BallInBox {
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn action_bounds(&self) -> Vec<f64> {
        vec![self.max_step; 2]
    }
    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn initial_state(&self, rng: &mut Rng) -> State {
        vec![rng.random_range(0.0..=self.size), rng.random_range(0.0..=self.size)]
    }

    fn advance(&self, state: &[f64], action: &[f64]) -> Transition {
        let next = state
            .iter()
            .zip(action)
            .map(|(s, a)| (s + a).clamp(0.0, self.size))
            .collect();
        Transition {
            next_state: next,
            terminal: false,
            goal_hit: None,
        }
    }

    fn squared_deviation(&self, state: &[f64]) -> f64 {
        let c = self.center();
        (state[0] - c[0]).powi(2) + (state[1] - c[1]).powi(2)
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let h = self.size / 2.0;
        state.iter().map(|s| (s - h) / h).collect()
    }

    fn on_discontinuity(&self, state: &[f64]) -> bool {
        state.iter().any(|&s| s <= 0.0 || s >= self.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_with_outward_action_stays() {
        let b = BallInBox::default();
        let t = b.advance(&[10.0, 0.0], &[0.5, -0.5]);
        assert_eq!(t.next_state, vec![10.0, 0.0]);
    }

    #[test]
    fn interior_moves_by_action() {
        let b = BallInBox::default();
        let t = b.advance(&[3.0, 4.0], &[0.25, -0.5]);
        assert_eq!(t.next_state, vec![3.25, 3.5]);
    }
}
