//! Clipped-surrogate policy gradient with a learned value baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::GaussianPolicy;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, MlpSpec};
use crate::rng::{self, stream};
use crate::{par, stats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    /// Largest allowed change of the policy entropy within one update.
    pub max_entropy_change: f64,
    /// Stop the policy epochs early once the minibatch KL estimate exceeds
    /// 1.5× this value.
    pub target_kl: Option<f64>,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_log_std: 0.0,
            clip: 0.2,
            epochs: 10,
            minibatch: 256,
            learning_rate: 3e-4,
            value_learning_rate: 1e-3,
            gae_lambda: 0.95,
            entropy_coef: 0.0,
            max_entropy_change: 0.5,
            target_kl: Some(0.05),
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip > 0.0
            && self.epochs > 0
            && self.minibatch > 0
            && self.learning_rate > 0.0
            && self.value_learning_rate > 0.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.entropy_coef >= 0.0
            && self.max_entropy_change > 0.0
            && self.target_kl.is_none_or(|k| k > 0.0)
            && self.hidden.iter().all(|&w| w > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("policy.ppo has out-of-range values".into()))
        }
    }
}

/// One on-policy sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    /// Pre-squash action.
    pub raw: Vec<f64>,
    pub log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Policy, value network and both optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub policy_opt: Adam,
    pub value_opt: Adam,
}

impl Learner {
    pub fn new(env: &Environment, cfg: &PpoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::rng_from(seed, &[stream::POLICY_INIT]);
        let policy = GaussianPolicy::new(env, &cfg.hidden, cfg.init_log_std, &mut rng)?;
        let spec = MlpSpec {
            hidden: cfg.hidden.clone(),
            activation: Activation::Tanh,
            output_activation: Activation::Identity,
        };
        let value = Mlp::new(policy.mean.input_dim(), 1, &spec, &mut rng)?;
        Ok(Self {
            policy_opt: Adam::new(policy.num_params(), cfg.learning_rate),
            value_opt: Adam::new(value.num_params(), cfg.value_learning_rate),
            policy,
            value,
        })
    }

    pub fn value_of(&self, obs: &[f64]) -> f64 {
        self.value.forward(obs)[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub policy_steps: usize,
}

/// Generalized advantage estimates and value targets for one episode.
/// `bootstrap` is the value of the state after the last step when the
/// episode was truncated, `None` when it ended in a terminal state.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: Option<f64>, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap.unwrap_or(0.0);
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Policy loss terms of one sample: accumulates `∂(−surrogate)/∂θ` into
/// `grad` and returns `(−surrogate, logp_old − logp_new, clipped)`.
fn sample_policy_grad(policy: &GaussianPolicy, s: &Sample, adv: f64, clip: f64, scale: f64, grad: &mut [f64]) -> (f64, f64, f64) {
    let cache = policy.mean.forward_cached(&s.obs);
    let mu = cache.output();
    let logp = policy.log_prob(mu, &s.raw);
    let ratio = (logp - s.log_prob).exp();
    let clipped_ratio = ratio.clamp(1.0 - clip, 1.0 + clip);
    let surr = (ratio * adv).min(clipped_ratio * adv);
    let inactive = (adv >= 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip);
    if !inactive && adv != 0.0 {
        let coef = -adv * ratio / scale;
        let n = policy.mean.num_params();
        let (gm, gls) = grad.split_at_mut(n);
        let dmu: Vec<f64> = mu
            .iter()
            .zip(&s.raw)
            .zip(&policy.log_std)
            .map(|((m, u), ls)| coef * (u - m) / (2.0 * ls).exp())
            .collect();
        policy.mean.backward(&cache, &dmu, gm);
        for (k, ls) in policy.log_std.iter().enumerate() {
            let z = (s.raw[k] - mu[k]) / ls.exp();
            gls[k] += coef * (z * z - 1.0);
        }
    }
    (-surr / scale, (s.log_prob - logp) / scale, f64::from(u8::from(inactive)) / scale)
}

/// Several epochs of clipped-surrogate minibatch updates on `batch`, plus
/// value regression onto the `ret` targets.
pub fn policy_update(learner: &mut Learner, batch: &[Sample], cfg: &PpoConfig, seed: u64) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::invalid("policy update needs a non-empty batch"));
    }
    let raw_adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    let adv = if cfg.normalize_advantages {
        stats::standardize(&raw_adv)
    } else {
        raw_adv
    };
    if adv.iter().any(|a| !a.is_finite()) || batch.iter().any(|s| !s.ret.is_finite()) {
        return Err(Error::PolicyAbort("non-finite advantages or returns".into()));
    }
    let mut rng = rng::rng_from(seed, &[stream::PPO]);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let entropy_before = learner.policy.entropy();
    let mut stats = UpdateStats {
        entropy_before,
        ..UpdateStats::default()
    };
    let np = learner.policy.num_params();
    let nv = learner.value.num_params();
    let mut policy_done = false;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let n = chunk.len() as f64;
            if !policy_done {
                let pol = &learner.policy;
                let mut g = par::chunked_sum(chunk.len(), np + 3, |k, acc| {
                    let i = chunk[k];
                    let (head, tail) = acc.split_at_mut(np);
                    let (l, kl, c) = sample_policy_grad(pol, &batch[i], adv[i], cfg.clip, n, head);
                    tail[0] += l;
                    tail[1] += kl;
                    tail[2] += c;
                });
                let clip_frac = g.pop().unwrap();
                let kl = g.pop().unwrap();
                let loss = g.pop().unwrap();
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::PolicyAbort(format!("non-finite policy loss {loss}")));
                }
                stats.policy_loss = loss;
                stats.approx_kl = kl;
                stats.clip_fraction = clip_frac;
                if cfg.target_kl.is_some_and(|t| kl > 1.5 * t) {
                    policy_done = true;
                } else {
                    for k in 0..learner.policy.log_std.len() {
                        g[np - learner.policy.log_std.len() + k] -= cfg.entropy_coef;
                    }
                    let saved = (learner.policy.clone(), learner.policy_opt.clone());
                    let mut p = learner.policy.params();
                    learner.policy_opt.step(&mut p, &g);
                    learner.policy.set_params(&p)?;
                    if (learner.policy.entropy() - entropy_before).abs() > cfg.max_entropy_change {
                        (learner.policy, learner.policy_opt) = saved;
                        policy_done = true;
                    } else {
                        stats.policy_steps += 1;
                    }
                }
            }

            let value = &learner.value;
            let mut g = par::chunked_sum(chunk.len(), nv + 1, |k, acc| {
                let s = &batch[chunk[k]];
                let (head, tail) = acc.split_at_mut(nv);
                let cache = value.forward_cached(&s.obs);
                let err = cache.output()[0] - s.ret;
                value.backward(&cache, &[2.0 * err / n], head);
                tail[0] += err * err / n;
            });
            let vloss = g.pop().unwrap();
            if !vloss.is_finite() {
                return Err(Error::PolicyAbort(format!("non-finite value loss {vloss}")));
            }
            stats.value_loss = vloss;
            learner.value_opt.step(learner.value.params_mut(), &g);
        }
    }
    stats.entropy_after = learner.policy.entropy();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Actor, Pendulum};
    use crate::rng::rng_from;

    fn learner() -> (Environment, Learner) {
        let env = Environment::Pendulum(Pendulum::default());
        let l = Learner::new(&env, &PpoConfig { hidden: vec![16], ..PpoConfig::default() }, 3).unwrap();
        (env, l)
    }

    #[test]
    fn gae_with_lambda_one_is_discounted_return() {
        let (adv, ret) = gae(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], None, 0.5, 1.0);
        assert_eq!(ret, vec![1.75, 1.5, 1.0]);
        assert_eq!(adv, ret);
        let (_, ret) = gae(&[1.0], &[0.0], Some(4.0), 0.5, 1.0);
        assert_eq!(ret, vec![3.0]);
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let (env, mut l) = learner();
        let mut rng = rng_from(1, &[]);
        let batch: Vec<Sample> = (0..64)
            .map(|k| {
                let s = [k as f64 * 0.1 - 3.0, 0.5];
                let a = l.policy.act(&env, &s, &mut rng);
                Sample {
                    obs: crate::envs::Dynamics::observe(&env, &s),
                    raw: a.raw,
                    log_prob: a.log_prob,
                    advantage: 0.0,
                    ret: 1.0,
                }
            })
            .collect();
        let before = l.policy.clone();
        let value_before = l.value.clone();
        policy_update(&mut l, &batch, &PpoConfig::default(), 0).unwrap();
        assert_eq!(l.policy, before);
        assert_ne!(l.value, value_before);
    }

    #[test]
    fn updates_are_deterministic() {
        let (env, l0) = learner();
        let mut rng = rng_from(1, &[]);
        let batch: Vec<Sample> = (0..100)
            .map(|k| {
                let s = [k as f64 * 0.05 - 2.5, -0.5];
                let a = l0.policy.act(&env, &s, &mut rng);
                Sample {
                    obs: crate::envs::Dynamics::observe(&env, &s),
                    advantage: -a.action[0].powi(2),
                    raw: a.raw,
                    log_prob: a.log_prob,
                    ret: 0.0,
                }
            })
            .collect();
        let mut a = l0.clone();
        let mut b = l0.clone();
        policy_update(&mut a, &batch, &PpoConfig::default(), 9).unwrap();
        policy_update(&mut b, &batch, &PpoConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.policy, l0.policy);
    }

    #[test]
    fn entropy_change_is_bounded() {
        let (env, mut l) = learner();
        let mut rng = rng_from(4, &[]);
        let cfg = PpoConfig {
            learning_rate: 0.5,
            target_kl: None,
            entropy_coef: 10.0,
            ..PpoConfig::default()
        };
        let batch: Vec<Sample> = (0..64)
            .map(|k| {
                let s = [0.0, k as f64 * 0.01];
                let a = l.policy.act(&env, &s, &mut rng);
                Sample {
                    obs: crate::envs::Dynamics::observe(&env, &s),
                    advantage: a.raw[0],
                    raw: a.raw,
                    log_prob: a.log_prob,
                    ret: 0.0,
                }
            })
            .collect();
        let st = policy_update(&mut l, &batch, &cfg, 0).unwrap();
        assert!((st.entropy_after - st.entropy_before).abs() <= 0.5);
    }
}
