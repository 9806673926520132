use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dynamics, State, Transition};
use crate::error::{Error, Result};
use crate::rng::Rng;

const CONTACT_SLACK: f64 = 1e-9;

/// Disc of radius `radius` in a `size × size` box split by a horizontal wall
/// band `wall_y`, crossed by a narrow middle tunnel and a wider right one.
/// The goal disc sits below the wall; episodes start above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tunnel {
    pub size: f64,
    pub radius: f64,
    pub wall_y: [f64; 2],
    pub middle_x: [f64; 2],
    pub right_x: [f64; 2],
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub max_step: f64,
    pub max_steps: usize,
    pub init: TunnelInit,
}

/// Reset distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunnelInit {
    /// Uniform over the region above the wall band, at least one radius
    /// from every side.
    #[default]
    Top,
    /// Uniform over all feasible positions not already touching the goal.
    Anywhere,
}

impl Default for Tunnel {
    fn default() -> Self {
        Self {
            size: 20.0,
            radius: 1.0,
            wall_y: [5.0, 15.0],
            middle_x: [9.0, 11.5],
            right_x: [15.5, 19.5],
            goal: [10.0, 2.5],
            goal_radius: 1.0,
            max_step: 0.5,
            max_steps: 200,
            init: TunnelInit::Top,
        }
    }
}

/// Which passage a trajectory used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Middle,
    Right,
    Neither,
}

impl Tunnel {
    pub fn validate(&self) -> Result<()> {
        let [y0, y1] = self.wall_y;
        let [m0, m1] = self.middle_x;
        let [r0, r1] = self.right_x;
        let ok = self.size > 0.0
            && self.radius > 0.0
            && self.goal_radius > 0.0
            && self.max_step > 0.0
            && self.max_steps > 0
            && 0.0 < y0
            && y0 < y1
            && y1 < self.size
            && 0.0 <= m0
            && m0 < m1
            && m1 <= r0
            && r0 < r1
            && r1 <= self.size
            && m1 - m0 >= 2.0 * self.radius
            && r1 - r0 >= 2.0 * self.radius;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("tunnel geometry is inconsistent".into()))
        }
    }

    /// Wall rectangles `[x0, x1, y0, y1]`.
    pub fn walls(&self) -> Vec<[f64; 4]> {
        let [y0, y1] = self.wall_y;
        [
            [0.0, self.middle_x[0]],
            [self.middle_x[1], self.right_x[0]],
            [self.right_x[1], self.size],
        ]
        .into_iter()
        .filter(|[a, b]| b > a)
        .map(|[a, b]| [a, b, y0, y1])
        .collect()
    }

    fn closest_on_rect(p: [f64; 2], r: &[f64; 4]) -> [f64; 2] {
        [p[0].clamp(r[0], r[1]), p[1].clamp(r[2], r[3])]
    }

    /// Distance from the disc center to the nearest wall or box side.
    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        let mut d = p[0].min(self.size - p[0]).min(p[1]).min(self.size - p[1]);
        for w in self.walls() {
            let c = Self::closest_on_rect(p, &w);
            let inside = c == p;
            let dist = if inside { 0.0 } else { ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() };
            d = d.min(dist);
        }
        d
    }

    /// Moves the disc center to the nearest position where the disc overlaps
    /// neither a wall nor the outside of the box.
    pub fn project(&self, mut p: [f64; 2]) -> [f64; 2] {
        let r = self.radius;
        for _ in 0..64 {
            let mut moved = false;
            for v in p.iter_mut() {
                let c = v.clamp(r, self.size - r);
                if c != *v {
                    *v = c;
                    moved = true;
                }
            }
            for w in self.walls() {
                let c = Self::closest_on_rect(p, &w);
                let dx = p[0] - c[0];
                let dy = p[1] - c[1];
                let d = (dx * dx + dy * dy).sqrt();
                if d >= r - CONTACT_SLACK {
                    continue;
                }
                moved = true;
                if d > 1e-12 {
                    p = [c[0] + dx / d * r, c[1] + dy / d * r];
                } else {
                    // Center inside the rectangle: leave through the closest face.
                    let exits = [
                        (p[0] - w[0], [w[0] - r, p[1]]),
                        (w[1] - p[0], [w[1] + r, p[1]]),
                        (p[1] - w[2], [p[0], w[2] - r]),
                        (w[3] - p[1], [p[0], w[3] + r]),
                    ];
                    p = exits
                        .into_iter()
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|e| e.1)
                        .unwrap_or(p);
                }
            }
            if !moved {
                break;
            }
        }
        p
    }

    pub fn goal_reached(&self, p: [f64; 2]) -> bool {
        let d = ((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt();
        d <= self.radius + self.goal_radius
    }

    pub fn in_middle_tunnel(&self, p: &[f64]) -> bool {
        (self.wall_y[0]..=self.wall_y[1]).contains(&p[1])
            && (self.middle_x[0]..=self.middle_x[1]).contains(&p[0])
    }

    pub fn in_right_tunnel(&self, p: &[f64]) -> bool {
        (self.wall_y[0]..=self.wall_y[1]).contains(&p[1])
            && (self.right_x[0]..=self.right_x[1]).contains(&p[0])
    }

    /// First passage entered along `states`.
    pub fn route<'a>(&self, states: impl IntoIterator<Item = &'a State>) -> Route {
        for s in states {
            if self.in_middle_tunnel(s) {
                return Route::Middle;
            }
            if self.in_right_tunnel(s) {
                return Route::Right;
            }
        }
        Route::Neither
    }
}

impl Dynamics for Tunnel {
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
        let r = self.radius;
        match self.init {
            TunnelInit::Top => vec![
                rng.random_range(r..=self.size - r),
                rng.random_range(self.wall_y[1] + r..=self.size - r),
            ],
            TunnelInit::Anywhere => loop {
                // The feasible set covers well over half the box, so this
                // terminates after a few draws.
                let p = [rng.random_range(r..=self.size - r), rng.random_range(r..=self.size - r)];
                if self.clearance(p) >= r && !self.goal_reached(p) {
                    break p.to_vec();
                }
            },
        }
    }

    fn advance(&self, state: &[f64], action: &[f64]) -> Transition {
        let p = self.project([state[0] + action[0], state[1] + action[1]]);
        let hit = self.goal_reached(p);
        Transition {
            next_state: p.to_vec(),
            terminal: hit,
            goal_hit: Some(hit),
        }
    }

    fn squared_deviation(&self, state: &[f64]) -> f64 {
        (state[0] - self.goal[0]).powi(2) + (state[1] - self.goal[1]).powi(2)
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let h = self.size / 2.0;
        state.iter().map(|s| (s - h) / h).collect()
    }

    fn on_discontinuity(&self, state: &[f64]) -> bool {
        self.clearance([state[0], state[1]]) <= self.radius + CONTACT_SLACK
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Environment;

    #[test]
    fn action_is_clamped_to_half_unit() {
        let env = Environment::Tunnel(Tunnel::default());
        let t = env.step(&[5.0, 18.0], &[0.7, 0.0]).unwrap();
        assert_close!(t.next_state[0], 5.5, 1e-12);
        assert_close!(t.next_state[1], 18.0, 1e-12);
    }

    #[test]
    fn reset_lands_above_the_wall_with_clearance() {
        let env = Environment::Tunnel(Tunnel::default());
        let t = Tunnel::default();
        for seed in 0..200 {
            let s = env.reset(seed);
            assert!(s[1] >= t.wall_y[1] + t.radius);
            assert!(t.clearance([s[0], s[1]]) >= t.radius - 1e-12);
        }
    }

    #[test]
    fn anywhere_reset_is_feasible_and_spread() {
        let t = Tunnel {
            init: TunnelInit::Anywhere,
            ..Tunnel::default()
        };
        let env = Environment::Tunnel(t.clone());
        let mut below = 0;
        for seed in 0..300 {
            let s = env.reset(seed);
            assert!(t.clearance([s[0], s[1]]) >= t.radius);
            assert!(!t.goal_reached([s[0], s[1]]));
            below += usize::from(s[1] < t.wall_y[0]);
        }
        assert!(below > 30, "{below}");
    }

    #[test]
    fn wall_push_out_to_nearest_surface() {
        let t = Tunnel::default();
        // Disc center 0.5 above the wall top edge: pushed up to touching.
        let p = t.project([4.0, 15.5]);
        assert_close!(p[0], 4.0, 1e-12);
        assert_close!(p[1], 16.0, 1e-12);
        // Inside the middle tunnel, too close to its left side.
        let p = t.project([9.6, 10.0]);
        assert_close!(p[0], 10.0, 1e-12);
    }

    #[test]
    fn goal_contact_terminates() {
        let t = Tunnel::default();
        let out = t.advance(&[10.0, 4.6], &[0.0, -0.2]);
        assert!(out.terminal);
        assert_eq!(out.goal_hit, Some(true));
    }

    #[test]
    fn routes_are_classified() {
        let t = Tunnel::default();
        let mid = vec![vec![10.2, 16.0], vec![10.2, 14.0]];
        let right = vec![vec![17.0, 16.0], vec![17.0, 12.0]];
        assert_eq!(t.route(&mid), Route::Middle);
        assert_eq!(t.route(&right), Route::Right);
        assert_eq!(t.route(&vec![vec![3.0, 18.0]]), Route::Neither);
    }
}
