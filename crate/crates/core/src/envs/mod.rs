//! Deterministic, seedable simulators with a shared stepping interface.
//!
//! Each environment is a pure transition function plus an initial-state
//! distribution. [`EnvInstance`] wraps one with the mutable episode state
//! (current state, step counter, reset generator).

mod ball;
pub mod cartpole;
mod integrator;
mod pendulum;
mod tunnel;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::{self, Rng};

pub use ball::BallInBox;
pub use cartpole::CartPole;
pub use integrator::DoubleIntegrator;
pub use pendulum::{wrap_angle, Pendulum, PendulumInit};
pub use tunnel::{Route, Tunnel, TunnelInit};

pub type State = Vec<f64>;

/// Result of applying one action.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: State,
    /// Set when the transition ends the episode on its own (goal contact).
    pub terminal: bool,
    pub goal_hit: Option<bool>,
}

/// Outcome of [`EnvInstance::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    /// The reset criterion fired on this step.
    pub done: bool,
    /// `done` was caused by the step cap rather than a terminal state.
    pub truncated: bool,
    /// Goal contact; only reported by environments with a goal.
    pub goal_hit: Option<bool>,
}

/// Per-environment physics.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric bound per action component; actions are clamped to
    /// `[-bound, bound]` before the dynamics see them.
    fn action_bounds(&self) -> Vec<f64>;
    fn max_steps(&self) -> usize;
    fn initial_state(&self, rng: &mut Rng) -> State;
    /// One step from `state` with an already clamped `action`.
    fn advance(&self, state: &[f64], action: &[f64]) -> Transition;
    /// Squared distance of the state from the stable target.
    fn squared_deviation(&self, state: &[f64]) -> f64;
    /// Policy input features.
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }
    /// Rewrites `state` so that `state − reference` has no wrap-around jumps.
    fn unwrap_relative(&self, _reference: &[f64], _state: &mut [f64]) {}
    /// True where the transition map is not differentiable at zero action.
    fn on_discontinuity(&self, _state: &[f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Environment {
    Pendulum(Pendulum),
    BallInBox(BallInBox),
    CartPole(CartPole),
    Tunnel(Tunnel),
    DoubleIntegrator(DoubleIntegrator),
}

macro_rules! dispatch {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            Environment::Pendulum($env) => $body,
            Environment::BallInBox($env) => $body,
            Environment::CartPole($env) => $body,
            Environment::Tunnel($env) => $body,
            Environment::DoubleIntegrator($env) => $body,
        }
    };
}

impl Dynamics for Environment {
    fn state_dim(&self) -> usize {
        dispatch!(self, e => e.state_dim())
    }
    fn action_dim(&self) -> usize {
        dispatch!(self, e => e.action_dim())
    }
    fn action_bounds(&self) -> Vec<f64> {
        dispatch!(self, e => e.action_bounds())
    }
    fn max_steps(&self) -> usize {
        dispatch!(self, e => e.max_steps())
    }
    fn initial_state(&self, rng: &mut Rng) -> State {
        dispatch!(self, e => e.initial_state(rng))
    }
    fn advance(&self, state: &[f64], action: &[f64]) -> Transition {
        dispatch!(self, e => e.advance(state, action))
    }
    fn squared_deviation(&self, state: &[f64]) -> f64 {
        dispatch!(self, e => e.squared_deviation(state))
    }
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        dispatch!(self, e => e.observe(state))
    }
    fn unwrap_relative(&self, reference: &[f64], state: &mut [f64]) {
        dispatch!(self, e => e.unwrap_relative(reference, state))
    }
    fn on_discontinuity(&self, state: &[f64]) -> bool {
        dispatch!(self, e => e.on_discontinuity(state))
    }
}

impl Environment {
    pub fn name(&self) -> &'static str {
        match self {
            Environment::Pendulum(_) => "pendulum",
            Environment::BallInBox(_) => "ball_in_box",
            Environment::CartPole(_) => "cart_pole",
            Environment::Tunnel(_) => "tunnel",
            Environment::DoubleIntegrator(_) => "double_integrator",
        }
    }

    pub fn validate(&self) -> Result<()> {
        dispatch!(self, e => e.validate())
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_bounds())
            .map(|(&a, b)| a.clamp(-b, b))
            .collect()
    }

    /// Initial state drawn from a generator keyed only by `seed`.
    pub fn reset(&self, seed: u64) -> State {
        self.initial_state(&mut rng::rng_from(seed, &[rng::stream::RESET]))
    }

    /// Validated, clamped transition from an arbitrary state.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Transition> {
        if state.len() != self.state_dim() {
            return Err(Error::shape(self.state_dim(), state.len()));
        }
        if action.len() != self.action_dim() {
            return Err(Error::shape(self.action_dim(), action.len()));
        }
        ensure_finite(state, "state")?;
        ensure_finite(action, "action")?;
        Ok(self.advance(state, &self.clamp_action(action)))
    }

    /// Final state after applying `actions` (flat, `H · d_a`) from `state`,
    /// ignoring episode termination.
    pub fn propagate(&self, state: &[f64], actions: &[f64]) -> Result<State> {
        let da = self.action_dim();
        if !actions.len().is_multiple_of(da) {
            return Err(Error::shape(format!("multiple of {da}"), actions.len()));
        }
        let mut s = state.to_vec();
        for a in actions.chunks(da) {
            s = self.step(&s, a)?.next_state;
        }
        Ok(s)
    }
}

/// A single-owner episode: current state, step count and cap.
#[derive(Debug, Clone)]
pub struct EnvInstance {
    env: Environment,
    state: State,
    t: usize,
    max_steps: usize,
}

impl EnvInstance {
    pub fn new(env: Environment) -> Self {
        let state = vec![0.0; env.state_dim()];
        let max_steps = env.max_steps();
        Self {
            env,
            state,
            t: 0,
            max_steps,
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn reset(&mut self, seed: u64) -> &[f64] {
        self.state = self.env.reset(seed);
        self.t = 0;
        &self.state
    }

    pub fn reset_to(&mut self, state: State) -> Result<()> {
        if state.len() != self.env.state_dim() {
            return Err(Error::shape(self.env.state_dim(), state.len()));
        }
        ensure_finite(&state, "state")?;
        self.state = state;
        self.t = 0;
        Ok(())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let tr = self.env.step(&self.state, action)?;
        self.t += 1;
        self.state = tr.next_state.clone();
        let truncated = !tr.terminal && self.t >= self.max_steps;
        Ok(StepOutcome {
            next_state: tr.next_state,
            done: tr.terminal || truncated,
            truncated,
            goal_hit: tr.goal_hit,
        })
    }
}

/// Anything that picks actions from states.
pub trait Actor: Sync {
    fn act(&self, env: &Environment, state: &[f64], rng: &mut Rng) -> ActionSample;
}

/// An action together with the quantities a policy-gradient learner needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Action handed to the environment.
    pub action: Vec<f64>,
    /// Pre-squash sample; equals `action` for actors without squashing.
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

impl ActionSample {
    pub fn plain(action: Vec<f64>) -> Self {
        Self {
            raw: action.clone(),
            action,
            log_prob: 0.0,
        }
    }
}

/// Always applies the same action.
#[derive(Debug, Clone)]
pub struct ConstantActor(pub Vec<f64>);

impl Actor for ConstantActor {
    fn act(&self, _env: &Environment, _state: &[f64], _rng: &mut Rng) -> ActionSample {
        ActionSample::plain(self.0.clone())
    }
}

/// Uniform over the action box.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformActor;

impl Actor for UniformActor {
    fn act(&self, env: &Environment, _state: &[f64], rng: &mut Rng) -> ActionSample {
        use rand::Rng as _;
        let a = env
            .action_bounds()
            .iter()
            .map(|&b| rng.random_range(-b..=b))
            .collect();
        ActionSample::plain(a)
    }
}

/// One recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: State,
    pub action: Vec<f64>,
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub next_state: State,
    pub done: bool,
    pub truncated: bool,
    pub goal_hit: bool,
}

/// Runs `actor` for at most `horizon` steps from the seeded initial state.
/// The reset and action streams both derive from `seed`.
pub fn rollout(
    env: &Environment,
    actor: &dyn Actor,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Step>> {
    let start = env.reset(seed);
    rollout_from(env, actor, start, horizon, seed)
}

pub fn rollout_from(
    env: &Environment,
    actor: &dyn Actor,
    start: State,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Step>> {
    if horizon == 0 {
        return Err(Error::invalid("rollout horizon must be at least 1"));
    }
    let mut inst = EnvInstance::new(env.clone()).with_max_steps(horizon.min(env.max_steps()));
    inst.reset_to(start)?;
    let mut rng = rng::rng_from(seed, &[rng::stream::POLICY]);
    let mut steps = Vec::with_capacity(horizon);
    while steps.len() < horizon {
        let state = inst.state().to_vec();
        let sample = actor.act(env, &state, &mut rng);
        let out = inst.step(&sample.action)?;
        let done = out.done;
        steps.push(Step {
            state,
            action: env.clamp_action(&sample.action),
            raw_action: sample.raw,
            log_prob: sample.log_prob,
            next_state: out.next_state,
            done: out.done,
            truncated: out.truncated,
            goal_hit: out.goal_hit.unwrap_or(false),
        });
        if done {
            break;
        }
    }
    Ok(steps)
}

/// Writes `t,s_0..,a_0..,done` rows.
pub fn write_trajectory_csv<W: Write>(out: &mut W, steps: &[Step]) -> std::io::Result<()> {
    let (ds, da) = match steps.first() {
        Some(s) => (s.state.len(), s.action.len()),
        None => (0, 0),
    };
    let mut header = vec!["t".to_string()];
    header.extend((0..ds).map(|i| format!("s_{i}")));
    header.extend((0..da).map(|i| format!("a_{i}")));
    header.push("done".into());
    writeln!(out, "{}", header.join(","))?;
    for (t, s) in steps.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(s.state.iter().map(|v| v.to_string()));
        row.extend(s.action.iter().map(|v| v.to_string()));
        row.push(u8::from(s.done).to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
