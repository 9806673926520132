//! Stochastic control policies, rewards and the empowerment-maximizing
//! training loop.

mod gce;
mod ppo;

use rand_distr::{Distribution, StandardNormal};

use crate::envs::{ActionSample, Actor, Dynamics, Environment};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::rng::Rng;

pub use gce::{
    evaluate_policy, evaluate_stabilization, initial_state, latent_gce_loop, EvalConfig, EvalReport, GceLoopConfig, IterationRecord,
    LoopOutput, LoopState, RewardKind, SourceKind,
};
pub use ppo::{gae, policy_update, Learner, PpoConfig, Sample, UpdateStats};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian policy over pre-squash actions `u ~ N(μ(obs), σ²)`; the
/// environment receives `bound · tanh(u)`. Log-probabilities refer to `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Act with `bound · tanh(μ)` instead of sampling.
    pub deterministic: bool,
}

impl GaussianPolicy {
    pub fn new(env: &Environment, hidden: &[usize], init_log_std: f64, rng: &mut Rng) -> Result<Self> {
        let obs_dim = env.observe(&vec![0.0; env.state_dim()]).len();
        let spec = MlpSpec {
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
            output_activation: Activation::Identity,
        };
        let mut mean = Mlp::new(obs_dim, env.action_dim(), &spec, rng)?;
        // Small final layer so that the initial mean action is close to zero.
        let off = mean.output_bias_offset();
        let n_w = mean.output_dim() * mean.sizes()[mean.sizes().len() - 2];
        for w in &mut mean.params_mut()[off - n_w..off] {
            *w *= 0.01;
        }
        Ok(Self {
            mean,
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); env.action_dim()],
            bounds: env.action_bounds(),
            deterministic: false,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn squash(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.bounds).map(|(x, b)| b * x.tanh()).collect()
    }

    pub fn log_prob(&self, mu: &[f64], u: &[f64]) -> f64 {
        mu.iter()
            .zip(u)
            .zip(&self.log_std)
            .map(|((m, x), ls)| {
                let z = (x - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Differential entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
    }

    pub fn num_params(&self) -> usize {
        self.mean.num_params() + self.log_std.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.mean.params().to_vec();
        p.extend(&self.log_std);
        p
    }

    /// Sets all parameters; the log-std is clamped to its range.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), p.len()));
        }
        let n = self.mean.num_params();
        self.mean.params_mut().copy_from_slice(&p[..n]);
        for (ls, v) in self.log_std.iter_mut().zip(&p[n..]) {
            *ls = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(())
    }

    pub fn greedy(mut self) -> Self {
        self.deterministic = true;
        self
    }
}

impl Actor for GaussianPolicy {
    fn act(&self, env: &Environment, state: &[f64], rng: &mut Rng) -> ActionSample {
        let mu = self.mean.forward(&env.observe(state));
        if self.deterministic {
            return ActionSample {
                action: self.squash(&mu),
                raw: mu.clone(),
                log_prob: self.log_prob(&mu, &mu),
            };
        }
        let u: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * e
            })
            .collect();
        ActionSample {
            action: self.squash(&u),
            log_prob: self.log_prob(&mu, &u),
            raw: u,
        }
    }
}

/// Per-step rewards `E(s_1) … E(s_T)` and their discounted sum
/// `Σ_t γ^{t−1} E(s_t)`.
pub fn intrinsic_return<F>(states: &[Vec<f64>], empowerment: F, gamma: f64) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if states.is_empty() {
        return Err(Error::invalid("trajectory is empty"));
    }
    let rewards = states.iter().map(|s| empowerment(s)).collect::<Result<Vec<_>>>()?;
    Ok((discounted_sum(&rewards, gamma), rewards))
}

pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// `1_goal + β·E`.
pub fn safety_reward(goal_hit: bool, empowerment: f64, beta: f64) -> f64 {
    f64::from(u8::from(goal_hit)) + beta * empowerment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Pendulum;
    use crate::rng::rng_from;

    #[test]
    fn discounted_returns() {
        let states = vec![vec![0.0]; 3];
        let (r, per) = intrinsic_return(&states, |_| Ok(2.0), 0.5).unwrap();
        assert_close!(r, 3.5, 1e-12);
        assert_eq!(per, vec![2.0; 3]);
        let (r, _) = intrinsic_return(&vec![vec![0.0]; 7], |_| Ok(2.0), 1.0).unwrap();
        assert_close!(r, 14.0, 1e-12);
        let (r, _) = intrinsic_return(&states, |_| Ok(0.0), 0.9).unwrap();
        assert_eq!(r, 0.0);
        assert!(intrinsic_return(&[], |_| Ok(1.0), 0.9).is_err());
    }

    #[test]
    fn safety_reward_values() {
        assert_eq!(safety_reward(true, 3.0, 0.0), 1.0);
        assert_close!(safety_reward(false, 4.0, 1.0 / 800.0), 0.005, 1e-15);
        assert_eq!(safety_reward(false, 4.0, 0.0), 0.0);
    }

    #[test]
    fn actions_respect_bounds_and_log_prob_matches_density() {
        let env = Environment::Pendulum(Pendulum::default());
        let mut rng = rng_from(0, &[]);
        let mut pol = GaussianPolicy::new(&env, &[8], 1.5, &mut rng).unwrap();
        for _ in 0..200 {
            let a = pol.act(&env, &[0.3, 1.0], &mut rng);
            assert!(a.action[0].abs() <= 2.0);
        }
        let p = pol.params();
        let n = p.len();
        let mut q = p.clone();
        q[n - 1] = 10.0;
        pol.set_params(&q).unwrap();
        assert_eq!(pol.log_std[0], LOG_STD_MAX);
        let mu = [0.2];
        let sd = LOG_STD_MAX.exp();
        let want = -0.5 * ((1.0f64 - 0.2) / sd).powi(2) - (sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_close!(pol.log_prob(&mu, &[1.0]), want, 1e-12);
    }

    #[test]
    fn greedy_policy_is_deterministic() {
        let env = Environment::Pendulum(Pendulum::default());
        let pol = GaussianPolicy::new(&env, &[8], 0.0, &mut rng_from(0, &[])).unwrap().greedy();
        let a = pol.act(&env, &[0.3, 1.0], &mut rng_from(1, &[]));
        let b = pol.act(&env, &[0.3, 1.0], &mut rng_from(2, &[]));
        assert_eq!(a, b);
    }
}
