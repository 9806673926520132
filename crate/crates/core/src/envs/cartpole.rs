use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{wrap_angle, Dynamics, PendulumInit, State, Transition};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Frictionless cart-pole, state `[x, ẋ, θ, θ̇]` with θ measured from
/// upright, integrated by explicit Euler. No track-edge termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPole {
    pub g: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub max_force: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub init: PendulumInit,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            g: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            max_force: 10.0,
            dt: 0.02,
            max_steps: 500,
            init: PendulumInit::Downward,
        }
    }
}

impl CartPole {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("g", self.g),
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("half_length", self.half_length),
            ("max_force", self.max_force),
            ("dt", self.dt),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("cart_pole.{name} must be positive")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("cart_pole.max_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Accelerations `(ẍ, θ̈)` under horizontal force `force`.
    pub fn accelerations(&self, state: &[f64], force: f64) -> (f64, f64) {
        let (theta, omega) = (state[2], state[3]);
        let total = self.cart_mass + self.pole_mass;
        let pml = self.pole_mass * self.half_length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pml * omega * omega * sin) / total;
        let theta_acc = (self.g * sin - cos * temp)
            / (self.half_length * (4.0 / 3.0 - self.pole_mass * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        (x_acc, theta_acc)
    }
}

/// Dense comparison reward `−θ²`.
pub fn dense_reward(state: &[f64]) -> f64 {
    let t = wrap_angle(state[2]);
    -t * t
}

/// Sparse comparison reward `1{|θ| < π/10}`.
pub fn sparse_reward(state: &[f64]) -> f64 {
    if wrap_angle(state[2]).abs() < PI / 10.0 {
        1.0
    } else {
        0.0
    }
}

impl Dynamics for CartPole {
    fn state_dim(&self) -> usize {
        4
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
        let mut jitter = || rng.random_range(-0.05..=0.05);
        match self.init {
            PendulumInit::Downward => vec![jitter(), jitter(), wrap_angle(PI + jitter()), jitter()],
            PendulumInit::Uniform => vec![jitter(), jitter(), rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)],
        }
    }

    fn advance(&self, state: &[f64], action: &[f64]) -> Transition {
        let (x_acc, theta_acc) = self.accelerations(state, action[0]);
        let dt = self.dt;
        Transition {
            next_state: vec![
                state[0] + dt * state[1],
                state[1] + dt * x_acc,
                wrap_angle(state[2] + dt * state[3]),
                state[3] + dt * theta_acc,
            ],
            terminal: false,
            goal_hit: None,
        }
    }

    fn squared_deviation(&self, state: &[f64]) -> f64 {
        let t = wrap_angle(state[2]);
        t * t
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0] / 2.4, state[1] / 3.0, state[2].cos(), state[2].sin(), state[3] / 8.0]
    }

    fn unwrap_relative(&self, reference: &[f64], state: &mut [f64]) {
        state[2] = reference[2] + wrap_angle(state[2] - reference[2]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_rest_is_equilibrium() {
        let c = CartPole::default();
        let t = c.advance(&[0.0, 0.0, 0.0, 0.0], &[0.0]);
        assert_eq!(t.next_state, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn push_accelerates_cart_and_tips_pole_back() {
        let c = CartPole::default();
        let (xa, ta) = c.accelerations(&[0.0, 0.0, 0.0, 0.0], 10.0);
        assert!(xa > 0.0);
        assert!(ta < 0.0);
        // Rigid body check at θ = 0: ẍ = F/(M + m) − m·l·θ̈/(M + m).
        assert_close!(xa, (10.0 - 0.05 * ta) / 1.1, 1e-12);
    }

    #[test]
    fn comparison_rewards() {
        assert_eq!(dense_reward(&[0.0, 0.0, 0.5, 0.0]), -0.25);
        assert_eq!(sparse_reward(&[0.0, 0.0, 0.2, 0.0]), 1.0);
        assert_eq!(sparse_reward(&[0.0, 0.0, 0.4, 0.0]), 0.0);
        assert_eq!(sparse_reward(&[0.0, 0.0, -0.2, 0.0]), 1.0);
    }
}
