//! The outer empowerment-maximization loop and stabilization evaluation.

use serde::{Deserialize, Serialize};

use super::ppo::{gae, policy_update, Learner, PpoConfig, Sample, UpdateStats};
use super::{safety_reward, GaussianPolicy};
use crate::analytic::{AnalyticPendulumConfig, AnalyticSource, EmpowermentSource, GVariant, NumericSource};
use crate::capacity::CapacitySettings;
use crate::channel::{train_channel, tuples_from_episode, ChannelConfig, ChannelModel, TransitionTuple};
use crate::envs::{cartpole, rollout, rollout_from, Actor, Dynamics, Environment, Route, Step};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::{par, stats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Analytic,
    Numeric,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardKind {
    /// `E(s_{t+1})`, standardized per iteration if configured.
    Empowerment,
    /// `1_goal + β·E(s_{t+1})`.
    Safety { beta: f64 },
    /// `−θ²` (cart-pole comparison).
    CartPoleDense,
    /// `1{|θ| < π/10}` (cart-pole comparison).
    CartPoleSparse,
}

impl RewardKind {
    fn needs_empowerment(&self) -> bool {
        match self {
            RewardKind::Empowerment => true,
            RewardKind::Safety { beta } => *beta > 0.0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Leading steps of each episode left out of the squared-deviation mean.
    pub warmup: usize,
    /// Act with the policy mean instead of sampling.
    pub deterministic: bool,
    /// Episode length; the environment's cap when absent.
    pub max_steps: Option<usize>,
    /// Fixed start state instead of the environment's reset distribution.
    pub start_state: Option<Vec<f64>>,
    /// Evaluate in this environment instead of the training one, e.g. the
    /// same dynamics with a different reset distribution.
    pub environment: Option<Environment>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            warmup: 0,
            deterministic: true,
            max_steps: None,
            start_state: None,
            environment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GceLoopConfig {
    /// Outer iterations N.
    pub iterations: usize,
    /// Episodes K collected per iteration.
    pub episodes: usize,
    pub gamma: f64,
    pub source: SourceKind,
    pub analytic_variant: GVariant,
    pub numeric_eps: f64,
    pub reward: RewardKind,
    pub standardize_empowerment: bool,
    /// The channel is fitted on the tuples of this many most recent
    /// iterations (1 = the current iteration only).
    pub replay_iterations: usize,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for GceLoopConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            episodes: 20,
            gamma: 0.99,
            source: SourceKind::Learned,
            analytic_variant: GVariant::DerivationConsistent,
            numeric_eps: 1e-6,
            reward: RewardKind::Empowerment,
            standardize_empowerment: true,
            replay_iterations: 1,
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl GceLoopConfig {
    pub fn validate(&self, env: &Environment) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("policy.{m}")));
        if self.episodes == 0 {
            return bad("episodes must be ≥ 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.numeric_eps > 0.0) {
            return bad("numeric_eps must be positive".into());
        }
        if self.replay_iterations == 0 {
            return bad("replay_iterations must be ≥ 1".into());
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be ≥ 1".into());
        }
        if let Some(e) = &self.eval.environment {
            if std::mem::discriminant(e) != std::mem::discriminant(env) {
                return bad(format!("eval.environment must be a {} environment", env.name()));
            }
            e.validate()?;
        }
        if let Some(s) = &self.eval.start_state {
            if s.len() != env.state_dim() || s.iter().any(|v| !v.is_finite()) {
                return bad(format!("eval.start_state needs {} finite components", env.state_dim()));
            }
        }
        if let RewardKind::Safety { beta } = self.reward {
            if !(beta >= 0.0 && beta.is_finite()) {
                return bad(format!("reward beta must be ≥ 0, got {beta}"));
            }
        }
        if matches!(self.reward, RewardKind::CartPoleDense | RewardKind::CartPoleSparse)
            && !matches!(env, Environment::CartPole(_))
        {
            return bad("cart-pole rewards need the cart_pole environment".into());
        }
        if self.source == SourceKind::Analytic && !matches!(env, Environment::Pendulum(_)) {
            return bad("the analytic source exists only for the pendulum".into());
        }
        self.ppo.validate()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Final channel loss; NaN when no channel is trained.
    pub channel_loss: f64,
    /// Mean raw empowerment over collected states; NaN when not computed.
    pub mean_emp: f64,
    pub eval_msd: f64,
    /// Cumulative environment steps.
    pub steps: usize,
    pub update: UpdateStats,
    pub goal_rate: f64,
    pub middle_fraction: f64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str = "iter,channel_loss,mean_emp,eval_msd,steps";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.channel_loss, self.mean_emp, self.eval_msd, self.steps
        )
    }
}

/// Everything needed to continue the loop after iteration `next_iter − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub next_iter: usize,
    pub learner: Learner,
    pub channel: Option<ChannelModel>,
    /// Channel tuples of the most recent iterations, oldest first.
    pub replay: Vec<Vec<TransitionTuple>>,
    pub records: Vec<IterationRecord>,
    pub steps: usize,
    /// Evaluation of the initial policy.
    pub initial_eval: EvalReport,
}

pub type LoopOutput = LoopState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean squared deviation from the target over all evaluated steps.
    pub mean_sq_dev: f64,
    pub episode_sq_dev: Vec<f64>,
    /// Mean distance of the final state from the target.
    pub final_distance: f64,
    pub goal_rate: f64,
    pub middle_fraction: f64,
    pub right_fraction: f64,
    /// Per-episode sums of empowerment, when computed.
    pub episode_returns: Vec<f64>,
    pub mean_empowerment: Option<f64>,
    #[serde(skip)]
    pub trajectories: Vec<Vec<Step>>,
}

impl EvalReport {
    /// Adds per-episode empowerment sums and the mean along trajectories.
    pub fn with_empowerment(mut self, source: &dyn EmpowermentSource, settings: &CapacitySettings) -> Result<Self> {
        let mut all = Vec::new();
        self.episode_returns.clear();
        for traj in &self.trajectories {
            let e = par::map_slice(traj, |s| source.empowerment(&s.next_state, settings))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            self.episode_returns.push(e.iter().sum());
            all.extend(e);
        }
        self.mean_empowerment = Some(stats::mean(&all));
        Ok(self)
    }
}

/// Runs `cfg.episodes` seeded evaluation episodes and averages the squared
/// deviation of the visited states (after the warm-up window) from the
/// environment's target.
pub fn evaluate_stabilization(env: &Environment, actor: &dyn Actor, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let horizon = cfg.max_steps.unwrap_or(env.max_steps());
    let trajectories = par::map_range(cfg.episodes, |k| {
        let s = derive_seed(seed, &[stream::EVAL, k as u64]);
        match &cfg.start_state {
            Some(start) => rollout_from(env, actor, start.clone(), horizon, s),
            None => rollout(env, actor, horizon, s),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut episode_sq_dev = Vec::with_capacity(trajectories.len());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut final_distance = 0.0;
    let (mut goals, mut middle, mut right) = (0usize, 0usize, 0usize);
    for traj in &trajectories {
        let devs: Vec<f64> = traj.iter().skip(cfg.warmup).map(|s| env.squared_deviation(&s.next_state)).collect();
        total += devs.iter().sum::<f64>();
        count += devs.len();
        episode_sq_dev.push(stats::mean(&devs));
        if let Some(last) = traj.last() {
            final_distance += env.squared_deviation(&last.next_state).sqrt();
            goals += usize::from(last.goal_hit);
        }
        if let Environment::Tunnel(t) = env {
            let states = traj.iter().map(|s| &s.next_state);
            match t.route(std::iter::once(&traj[0].state).chain(states)) {
                Route::Middle => middle += 1,
                Route::Right => right += 1,
                Route::Neither => {}
            }
        }
    }
    let n = trajectories.len() as f64;
    Ok(EvalReport {
        mean_sq_dev: if count == 0 { 0.0 } else { total / count as f64 },
        episode_sq_dev,
        final_distance: final_distance / n,
        goal_rate: goals as f64 / n,
        middle_fraction: middle as f64 / n,
        right_fraction: right as f64 / n,
        episode_returns: Vec::new(),
        mean_empowerment: None,
        trajectories,
    })
}

/// Evaluates a Gaussian policy in the mode selected by `cfg.deterministic`,
/// in `cfg.environment` when given. `evaluate_stabilization` takes any actor
/// and environment as-is and ignores both fields.
pub fn evaluate_policy(env: &Environment, policy: &GaussianPolicy, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let env = cfg.environment.as_ref().unwrap_or(env);
    let mut policy = policy.clone();
    policy.deterministic = cfg.deterministic;
    evaluate_stabilization(env, &policy, cfg, seed)
}

fn eval_policy(env: &Environment, learner: &Learner, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    evaluate_policy(env, &learner.policy, cfg, derive_seed(seed, &[stream::EVAL]))
}

fn empowerment_source<'a>(
    env: &Environment,
    cfg: &GceLoopConfig,
    channel_cfg: &ChannelConfig,
    model: Option<&'a ChannelModel>,
) -> Result<Box<dyn EmpowermentSource + 'a>> {
    Ok(match cfg.source {
        SourceKind::Analytic => match env {
            Environment::Pendulum(p) => Box::new(AnalyticSource {
                config: AnalyticPendulumConfig::from(p),
                variant: cfg.analytic_variant,
            }),
            _ => return Err(Error::Config("analytic source needs the pendulum".into())),
        },
        SourceKind::Numeric => Box::new(NumericSource {
            env: env.clone(),
            horizon: channel_cfg.horizon,
            eps: cfg.numeric_eps,
        }),
        SourceKind::Learned => match model {
            Some(m) => Box::new(m.clone()),
            None => return Err(Error::invalid("learned source without a channel model")),
        },
    })
}

/// Creates the initial loop state (iteration 0, untrained policy).
pub fn initial_state(env: &Environment, cfg: &GceLoopConfig, seed: u64) -> Result<LoopState> {
    cfg.validate(env)?;
    let learner = Learner::new(env, &cfg.ppo, seed)?;
    let initial_eval = eval_policy(env, &learner, &cfg.eval, seed)?;
    Ok(LoopState {
        next_iter: 0,
        learner,
        channel: None,
        replay: Vec::new(),
        records: Vec::new(),
        steps: 0,
        initial_eval,
    })
}

/// Collects episodes, fits the channel, scores states by empowerment and
/// reinforces the policy, for `cfg.iterations` iterations. Starts from
/// `resume` when given. `on_iteration` sees the state after every
/// iteration and may abort the loop by returning an error.
pub fn latent_gce_loop(
    env: &Environment,
    cfg: &GceLoopConfig,
    channel_cfg: &ChannelConfig,
    capacity: &CapacitySettings,
    seed: u64,
    resume: Option<LoopState>,
    on_iteration: &mut dyn FnMut(&LoopState) -> Result<()>,
) -> Result<LoopState> {
    env.validate()?;
    cfg.validate(env)?;
    channel_cfg.validate()?;
    capacity.validate()?;
    let mut state = match resume {
        Some(s) => s,
        None => initial_state(env, cfg, seed)?,
    };
    while state.next_iter < cfg.iterations {
        let it = state.next_iter;
        let at = |e| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        };
        iteration(env, cfg, channel_cfg, capacity, seed, &mut state).map_err(at)?;
        state.next_iter += 1;
        on_iteration(&state).map_err(at)?;
    }
    Ok(state)
}

fn iteration(
    env: &Environment,
    cfg: &GceLoopConfig,
    channel_cfg: &ChannelConfig,
    capacity: &CapacitySettings,
    seed: u64,
    state: &mut LoopState,
) -> Result<()> {
    let it = state.next_iter as u64;
    let policy = &state.learner.policy;
    let episodes = par::map_range(cfg.episodes, |k| {
        rollout(
            env,
            policy,
            env.max_steps(),
            derive_seed(seed, &[stream::ITERATION, it, stream::EPISODE, k as u64]),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n_steps: usize = episodes.iter().map(Vec::len).sum();

    let mut channel_loss = f64::NAN;
    if cfg.source == SourceKind::Learned && cfg.reward.needs_empowerment() {
        let mut tuples = Vec::new();
        for ep in &episodes {
            tuples.extend(tuples_from_episode(env, ep, channel_cfg.horizon)?);
        }
        if tuples.is_empty() {
            return Err(Error::invalid("no episode is longer than the channel horizon"));
        }
        state.replay.push(tuples);
        let excess = state.replay.len().saturating_sub(cfg.replay_iterations);
        state.replay.drain(..excess);
        let tuples: Vec<TransitionTuple> = state.replay.iter().flatten().cloned().collect();
        let init_seed = derive_seed(seed, &[stream::ITERATION, it, stream::CHANNEL_INIT]);
        let mut model = match state.channel.take() {
            Some(m) if channel_cfg.warm_start => m,
            _ => ChannelModel::new(channel_cfg, env, &tuples, init_seed)?,
        };
        let report = train_channel(
            &mut model,
            &tuples,
            channel_cfg.epochs,
            derive_seed(seed, &[stream::ITERATION, it, stream::CHANNEL_SHUFFLE]),
        )?;
        channel_loss = report.final_loss().unwrap_or(f64::NAN);
        state.channel = Some(model);
    }

    let flat: Vec<&Step> = episodes.iter().flatten().collect();
    let emp: Option<Vec<f64>> = if cfg.reward.needs_empowerment() {
        let source = empowerment_source(env, cfg, channel_cfg, state.channel.as_ref())?;
        let source = source.as_ref();
        Some(
            par::map_slice(&flat, |s| source.empowerment(&s.next_state, capacity))
                .into_iter()
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mean_emp = emp.as_deref().map_or(f64::NAN, stats::mean);

    // Raw values are logged above; the learner sees standardized ones.
    let emp_reward = emp.as_ref().map(|e| {
        if cfg.standardize_empowerment {
            stats::standardize(e)
        } else {
            e.clone()
        }
    });
    let rewards: Vec<f64> = match (cfg.reward, &emp_reward) {
        (RewardKind::Empowerment, Some(e)) => e.clone(),
        (RewardKind::Safety { beta }, e) => flat
            .iter()
            .enumerate()
            .map(|(k, s)| safety_reward(s.goal_hit, e.as_ref().map_or(0.0, |e| e[k]), beta))
            .collect(),
        (RewardKind::CartPoleDense, _) => flat.iter().map(|s| cartpole::dense_reward(&s.next_state)).collect(),
        (RewardKind::CartPoleSparse, _) => flat.iter().map(|s| cartpole::sparse_reward(&s.next_state)).collect(),
        (RewardKind::Empowerment, None) => unreachable!("empowerment reward always computes E"),
    };

    let learner = &state.learner;
    let mut batch = Vec::with_capacity(n_steps);
    let mut offset = 0;
    for ep in &episodes {
        let obs: Vec<Vec<f64>> = ep.iter().map(|s| env.observe(&s.state)).collect();
        let values: Vec<f64> = obs.iter().map(|o| learner.value_of(o)).collect();
        let last = ep.last().expect("rollouts are non-empty");
        let bootstrap = (!last.done || last.truncated).then(|| learner.value_of(&env.observe(&last.next_state)));
        let r = &rewards[offset..offset + ep.len()];
        let (adv, ret) = gae(r, &values, bootstrap, cfg.gamma, cfg.ppo.gae_lambda);
        for (t, s) in ep.iter().enumerate() {
            batch.push(Sample {
                obs: obs[t].clone(),
                raw: s.raw_action.clone(),
                log_prob: s.log_prob,
                advantage: adv[t],
                ret: ret[t],
            });
        }
        offset += ep.len();
    }
    let update = policy_update(
        &mut state.learner,
        &batch,
        &cfg.ppo,
        derive_seed(seed, &[stream::ITERATION, it, stream::PPO]),
    )?;
    let eval = eval_policy(env, &state.learner, &cfg.eval, seed)?;
    state.steps += n_steps;
    let rec = IterationRecord {
        iter: state.next_iter,
        channel_loss,
        mean_emp,
        eval_msd: eval.mean_sq_dev,
        steps: state.steps,
        update,
        goal_rate: eval.goal_rate,
        middle_fraction: eval.middle_fraction,
    };
    log::info!(
        "iter {} steps {} channel_loss {:.3e} mean_emp {:.4} eval_msd {:.4} entropy {:.3}",
        rec.iter,
        rec.steps,
        rec.channel_loss,
        rec.mean_emp,
        rec.eval_msd,
        update.entropy_after
    );
    state.records.push(rec);
    Ok(())
}
