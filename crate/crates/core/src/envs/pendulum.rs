use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dynamics, State, Transition};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Maps an angle into `[-π, π]`, leaving values already inside untouched
/// (so `π` stays `π`).
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..=PI).contains(&theta) {
        theta
    } else {
        let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
        if w == -PI && theta > 0.0 {
            PI
        } else {
            w
        }
    }
}

/// `sin θ`, exactly zero at `θ = ±π` so that the hanging position is a fixed
/// point in floating point (`f64::sin(π)` is about 1.2e-16).
fn sin_wrapped(theta: f64) -> f64 {
    if theta.abs() == PI {
        0.0
    } else {
        theta.sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendulumInit {
    /// Hanging straight down at rest: `(π, 0)`.
    #[default]
    Downward,
    /// `θ ~ U[-π, π]`, `θ̇ ~ U[-w, w]` with `w = init_omega_max`.
    Uniform,
}

/// Torque-driven pendulum, angle measured from upright, explicit Euler:
///
/// ```text
/// θ̇' = θ̇ + dt·((g/l)·sin θ + a)
/// θ'  = wrap(θ + dt·θ̇)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pendulum {
    pub g: f64,
    pub l: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_steps: usize,
    pub init: PendulumInit,
    /// Half-width of the uniform initial angular velocity.
    pub init_omega_max: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            g: 10.0,
            l: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_steps: 200,
            init: PendulumInit::Downward,
            init_omega_max: 1.0,
        }
    }
}

impl Pendulum {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("g", self.g), ("l", self.l), ("dt", self.dt), ("max_torque", self.max_torque)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("pendulum.{name} must be positive")));
            }
        }
        if !(self.init_omega_max.is_finite() && self.init_omega_max >= 0.0) {
            return Err(Error::Config("pendulum.init_omega_max must be non-negative".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("pendulum.max_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Kinetic plus potential energy per unit inertia (unactuated invariant
    /// of the continuous-time system).
    pub fn energy(&self, state: &[f64]) -> f64 {
        0.5 * state[1] * state[1] + self.g / self.l * state[0].cos()
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn action_bounds(&self) -> Vec<f64> {
        vec![self.max_torque]
    }
    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn initial_state(&self, rng: &mut Rng) -> State {
        match self.init {
            PendulumInit::Downward => vec![PI, 0.0],
            PendulumInit::Uniform => {
                let w = self.init_omega_max;
                vec![rng.random_range(-PI..=PI), rng.random_range(-w..=w)]
            },
        }
    }

    fn advance(&self, state: &[f64], action: &[f64]) -> Transition {
        let (theta, omega) = (state[0], state[1]);
        let omega_next = omega + self.dt * (self.g / self.l * sin_wrapped(theta) + action[0]);
        let theta_next = wrap_angle(theta + self.dt * omega);
        Transition {
            next_state: vec![theta_next, omega_next],
            terminal: false,
            goal_hit: None,
        }
    }

    fn squared_deviation(&self, state: &[f64]) -> f64 {
        let t = wrap_angle(state[0]);
        t * t
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0].cos(), state[0].sin(), state[1] / 8.0]
    }

    fn unwrap_relative(&self, reference: &[f64], state: &mut [f64]) {
        state[0] = reference[0] + wrap_angle(state[0] - reference[0]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_close!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-12);
        assert_close!(wrap_angle(-7.0), -7.0 + 2.0 * PI, 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!((-PI..=PI).contains(&w));
        }
    }

    #[test]
    fn hanging_equilibrium_is_fixed() {
        let p = Pendulum::default();
        let t = p.advance(&[PI, 0.0], &[0.0]);
        assert_eq!(t.next_state, vec![PI, 0.0]);
    }

    #[test]
    fn euler_update_matches_formula() {
        let p = Pendulum::default();
        let t = p.advance(&[0.3, -0.7], &[1.5]);
        assert_close!(t.next_state[1], -0.7 + 0.05 * (10.0 * 0.3f64.sin() + 1.5), 1e-15);
        assert_close!(t.next_state[0], 0.3 + 0.05 * -0.7, 1e-15);
    }

    #[test]
    fn energy_drift_is_small_at_fine_step() {
        let p = Pendulum {
            dt: 1e-4,
            ..Pendulum::default()
        };
        let mut s = vec![1.0, 0.5];
        let e0 = p.energy(&s);
        for _ in 0..100 {
            s = p.advance(&s, &[0.0]).next_state;
        }
        assert!(((p.energy(&s) - e0) / e0).abs() < 1e-3);
    }

    #[test]
    fn unwrap_relative_removes_jump() {
        let p = Pendulum::default();
        let mut s = [-3.1, 0.0];
        p.unwrap_relative(&[3.1, 0.0], &mut s);
        assert_close!(s[0], 2.0 * PI - 3.1, 1e-12);
    }
}
