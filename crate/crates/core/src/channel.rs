//! Learned latent Gaussian channel.
//!
//! A [`ChannelModel`] maps a state to a matrix `G(f(s))` such that
//! `f(s_{t+H}) − f(ŝ_{t+H}) ≈ G(f(s_t)) · g(a_t … a_{t+H−1})`, where `ŝ` is the
//! endpoint of the zero-action rollout from `s_t`. Subtracting that endpoint
//! removes the action-independent drift, leaving `G` as the pure action
//! sensitivity. With `absorb_drift_in_bias` the model instead predicts
//! `f(s_{t+H}) − f(s_t)` and carries an additional state-dependent bias.
//!
//! Encoders `f`, `g` are either identities or MLPs with decoders trained by
//! a reconstruction loss `L_R`; the prediction loss is `L_P`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envs::{Actor, Dynamics, Environment, Step};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Adam, Cache, Mlp, MlpSpec};
use crate::rng::{self, stream};
use crate::{par, stats};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// `(s_t, a_t … a_{t+H−1}, s_{t+H})` plus the zero-action endpoint from `s_t`.
/// End states are unwrapped relative to the start state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTuple {
    pub start_state: Vec<f64>,
    pub actions: Vec<f64>,
    pub end_state: Vec<f64>,
    pub baseline_end_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Identity,
    Learned {
        state_latent: usize,
        action_latent: usize,
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub horizon: usize,
    pub encoder: EncoderConfig,
    pub matrix_net: MlpSpec,
    pub absorb_drift_in_bias: bool,
    pub reconstruction_weight: f64,
    pub prediction_weight: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warm_start: bool,
    /// Initialize the matrix network's output bias to the least-squares
    /// linear channel (identity encoders only).
    pub least_squares_init: bool,
    /// Output scale of the matrix network relative to the data scale.
    pub output_scale: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            encoder: EncoderConfig::Identity,
            matrix_net: MlpSpec::new(vec![64, 64]),
            absorb_drift_in_bias: false,
            reconstruction_weight: 1.0,
            prediction_weight: 1.0,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 256,
            epochs: 50,
            warm_start: true,
            least_squares_init: true,
            output_scale: 0.1,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("channel.{m}")));
        if self.horizon == 0 {
            return bad("horizon must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.reconstruction_weight >= 0.0 && self.prediction_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return bad("output_scale must be positive");
        }
        if let EncoderConfig::Learned {
            state_latent,
            action_latent,
            hidden,
        } = &self.encoder
        {
            if *state_latent == 0 || *action_latent == 0 || hidden.contains(&0) {
                return bad("encoder sizes must be ≥ 1");
            }
        }
        self.matrix_net.validate()
    }
}

/// Tuples plus the count of episodes too short to contribute any.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub tuples: Vec<TransitionTuple>,
    pub short_episodes: usize,
}

/// Sliding windows of `horizon` steps over one recorded episode. Windows run
/// over the per-step `state` column, so an episode of `T` steps yields
/// `T − horizon` tuples.
pub fn tuples_from_episode(
    env: &Environment,
    steps: &[Step],
    horizon: usize,
) -> Result<Vec<TransitionTuple>> {
    if steps.len() <= horizon {
        return Ok(Vec::new());
    }
    let zeros = vec![0.0; horizon * env.action_dim()];
    (0..steps.len() - horizon)
        .map(|i| {
            let start = steps[i].state.clone();
            let actions: Vec<f64> = steps[i..i + horizon]
                .iter()
                .flat_map(|s| s.action.iter().copied())
                .collect();
            let mut end = steps[i + horizon].state.clone();
            env.unwrap_relative(&start, &mut end);
            let mut base = env.propagate(&start, &zeros)?;
            env.unwrap_relative(&start, &mut base);
            Ok(TransitionTuple {
                start_state: start,
                actions,
                end_state: end,
                baseline_end_state: base,
            })
        })
        .collect()
}

/// Runs `episodes` seeded episodes of `actor` and arranges them into tuples.
pub fn collect_tuples(
    env: &Environment,
    actor: &dyn Actor,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::invalid("episodes and horizon must be ≥ 1"));
    }
    let per_episode = par::map_range(episodes, |k| -> Result<Vec<TransitionTuple>> {
        let ep_seed = rng::derive_seed(seed, &[stream::EPISODE, k as u64]);
        let steps = crate::envs::rollout(env, actor, env.max_steps(), ep_seed)?;
        tuples_from_episode(env, &steps, horizon)
    });
    let mut data = Dataset::default();
    for tuples in per_episode {
        let tuples = tuples?;
        if tuples.is_empty() {
            data.short_episodes += 1;
        }
        data.tuples.extend(tuples);
    }
    if data.short_episodes > 0 {
        log::warn!(
            "{} of {episodes} episodes shorter than horizon {horizon} + 1",
            data.short_episodes
        );
    }
    Ok(data)
}

/// Loss components for one epoch, evaluated on the full dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub reconstruction: f64,
    pub prediction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    /// Update rule used; recorded for reproducibility.
    pub optimizer: String,
    pub gradient_check: Option<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }
}

/// Encoders, decoders and the matrix network, with fixed data normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub config: ChannelConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bounds: Vec<f64>,
    pub latent_dim: usize,
    pub action_latent_dim: usize,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Per-entry scale of the matrix network output (row-major `d_f × d_g`).
    pub matrix_scale: Vec<f64>,
    pub bias_scale: Vec<f64>,
    pub matrix: Mlp,
    pub encoders: Option<Encoders>,
    pub optimizer: Option<Adam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub state_enc: Mlp,
    pub state_dec: Mlp,
    pub action_enc: Mlp,
    pub action_dec: Mlp,
}

fn rms(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn nonzero_or(x: f64, fallback: f64) -> f64 {
    if x > 1e-12 && x.is_finite() {
        x
    } else {
        fallback
    }
}

impl ChannelModel {
    /// Builds a model whose normalization and output scales are fitted to
    /// `data`. Parameters are Glorot-initialized from `seed`.
    pub fn new(config: &ChannelConfig, env: &Environment, data: &[TransitionTuple], seed: u64) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("channel dataset is empty"));
        }
        let ds = env.state_dim();
        let da = env.action_dim();
        let h = config.horizon;
        for t in data {
            check_tuple(t, ds, h * da)?;
        }
        let mut rng = rng::rng_from(seed, &[stream::CHANNEL_INIT]);
        let (d_f, d_g) = match &config.encoder {
            EncoderConfig::Identity => (ds, h * da),
            EncoderConfig::Learned {
                state_latent,
                action_latent,
                ..
            } => (*state_latent, *action_latent),
        };

        let state_mean: Vec<f64> = (0..ds)
            .map(|i| stats::mean(&data.iter().map(|t| t.start_state[i]).collect::<Vec<_>>()))
            .collect();
        let state_std: Vec<f64> = (0..ds)
            .map(|i| nonzero_or(stats::std_dev(&data.iter().map(|t| t.start_state[i]).collect::<Vec<_>>()), 1.0))
            .collect();

        let bias = config.absorb_drift_in_bias;
        let out_dim = d_f * d_g + if bias { d_f } else { 0 };
        let matrix = Mlp::new(d_f, out_dim, &config.matrix_net, &mut rng)?;
        let encoders = match &config.encoder {
            EncoderConfig::Identity => None,
            EncoderConfig::Learned { hidden, .. } => {
                let spec = MlpSpec::new(hidden.clone());
                Some(Encoders {
                    state_enc: Mlp::new(ds, d_f, &spec, &mut rng)?,
                    state_dec: Mlp::new(d_f, ds, &spec, &mut rng)?,
                    action_enc: Mlp::new(h * da, d_g, &spec, &mut rng)?,
                    action_dec: Mlp::new(d_g, h * da, &spec.clone().with_output(Activation::Tanh), &mut rng)?,
                })
            }
        };
        let mut model = Self {
            config: config.clone(),
            state_dim: ds,
            action_dim: da,
            action_bounds: env.action_bounds(),
            latent_dim: d_f,
            action_latent_dim: d_g,
            state_mean,
            state_std,
            matrix_scale: vec![config.output_scale; d_f * d_g],
            bias_scale: vec![config.output_scale; if bias { d_f } else { 0 }],
            matrix,
            encoders,
            optimizer: None,
        };
        if model.encoders.is_none() {
            model.fit_output_scales(data);
        }
        Ok(model)
    }

    /// Identity mode: scale each output so that unit network outputs
    /// correspond to `output_scale` of the data's typical gain, then seed the
    /// output bias with the least-squares linear channel.
    fn fit_output_scales(&mut self, data: &[TransitionTuple]) {
        let (d_f, d_g) = (self.latent_dim, self.action_latent_dim);
        let c = self.config.output_scale;
        let targets: Vec<Vec<f64>> = data.iter().map(|t| self.target_identity(t)).collect();
        let y_rms: Vec<f64> = (0..d_f).map(|i| rms(targets.iter().map(|y| y[i]))).collect();
        let a_rms: Vec<f64> = (0..d_g).map(|j| rms(data.iter().map(|t| t.actions[j]))).collect();
        for i in 0..d_f {
            for j in 0..d_g {
                let gain = nonzero_or(y_rms[i], 1.0) / nonzero_or(a_rms[j], 1.0);
                self.matrix_scale[i * d_g + j] = c * gain / (d_g as f64).sqrt();
            }
        }
        for i in 0..self.bias_scale.len() {
            self.bias_scale[i] = c * nonzero_or(y_rms[i], 1.0);
        }
        if !self.config.least_squares_init {
            return;
        }
        let bias = self.config.absorb_drift_in_bias;
        let cols = d_g + usize::from(bias);
        let mut ata = DMatrix::<f64>::zeros(cols, cols);
        let mut aty = DMatrix::<f64>::zeros(cols, d_f);
        for (t, y) in data.iter().zip(&targets) {
            let mut a = t.actions.clone();
            if bias {
                a.push(1.0);
            }
            let a = DVector::from_vec(a);
            ata += &a * a.transpose();
            aty += &a * DVector::from_column_slice(y).transpose();
        }
        let ridge = 1e-10 * ata.trace().max(1e-300);
        for k in 0..cols {
            ata[(k, k)] += ridge;
        }
        let Some(sol) = ata.cholesky().map(|ch| ch.solve(&aty)) else {
            return;
        };
        let off = self.matrix.output_bias_offset();
        let p = self.matrix.params_mut();
        for i in 0..d_f {
            for j in 0..d_g {
                p[off + i * d_g + j] = sol[(j, i)] / self.matrix_scale[i * d_g + j];
            }
            if bias {
                p[off + d_f * d_g + i] = sol[(d_g, i)] / self.bias_scale[i];
            }
        }
    }

    fn target_identity(&self, t: &TransitionTuple) -> Vec<f64> {
        let reference = if self.config.absorb_drift_in_bias {
            &t.start_state
        } else {
            &t.baseline_end_state
        };
        t.end_state.iter().zip(reference).map(|(a, b)| a - b).collect()
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((x, m), sd)| (x - m) / sd)
            .collect()
    }

    fn normalize_actions(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_bounds.iter().cycle())
            .map(|(x, b)| x / b)
            .collect()
    }

    /// State latent `f(s)`.
    pub fn encode_state(&self, s: &[f64]) -> Vec<f64> {
        match &self.encoders {
            None => s.to_vec(),
            Some(e) => e.state_enc.forward(&self.normalize_state(s)),
        }
    }

    /// Action-sequence latent `g(a)`.
    pub fn encode_actions(&self, a: &[f64]) -> Vec<f64> {
        match &self.encoders {
            None => a.to_vec(),
            Some(e) => e.action_enc.forward(&self.normalize_actions(a)),
        }
    }

    /// `f⁻¹(z)`; identity encoders return `z`.
    pub fn decode_state(&self, z: &[f64]) -> Vec<f64> {
        match &self.encoders {
            None => z.to_vec(),
            Some(e) => e
                .state_dec
                .forward(z)
                .iter()
                .zip(&self.state_mean)
                .zip(&self.state_std)
                .map(|((x, m), sd)| x * sd + m)
                .collect(),
        }
    }

    /// `g⁻¹(u)`: tanh output scaled to the action bounds.
    pub fn decode_actions(&self, u: &[f64]) -> Vec<f64> {
        match &self.encoders {
            None => u.to_vec(),
            Some(e) => e
                .action_dec
                .forward(u)
                .iter()
                .zip(self.action_bounds.iter().cycle())
                .map(|(x, b)| x * b)
                .collect(),
        }
    }

    fn matrix_input(&self, s: &[f64]) -> Vec<f64> {
        match &self.encoders {
            None => self.normalize_state(s),
            Some(e) => e.state_enc.forward(&self.normalize_state(s)),
        }
    }

    fn assemble(&self, out: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let (d_f, d_g) = (self.latent_dim, self.action_latent_dim);
        let g = DMatrix::from_fn(d_f, d_g, |i, j| self.matrix_scale[i * d_g + j] * out[i * d_g + j]);
        let b = self
            .bias_scale
            .iter()
            .enumerate()
            .map(|(i, s)| s * out[d_f * d_g + i])
            .collect();
        (g, b)
    }

    /// `G(f(s))`, shape `d_f × d_g`.
    pub fn channel_matrix(&self, s: &[f64]) -> Result<DMatrix<f64>> {
        if s.len() != self.state_dim {
            return Err(Error::shape(self.state_dim, s.len()));
        }
        ensure_finite(s, "state")?;
        Ok(self.assemble(&self.matrix.forward(&self.matrix_input(s))).0)
    }

    /// Drift bias at `s` (empty unless `absorb_drift_in_bias`).
    pub fn drift_bias(&self, s: &[f64]) -> Vec<f64> {
        self.assemble(&self.matrix.forward(&self.matrix_input(s))).1
    }

    /// `G(f(s)) · g(a)`, the noise-free latent prediction of the action
    /// effect (the drift bias is not included).
    pub fn predict(&self, s: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let n = self.horizon() * self.action_dim;
        if actions.len() != n {
            return Err(Error::shape(n, actions.len()));
        }
        ensure_finite(actions, "actions")?;
        let g = self.channel_matrix(s)?;
        let u = DVector::from_vec(self.encode_actions(actions));
        Ok((g * u).iter().copied().collect())
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.matrix];
        if let Some(e) = &self.encoders {
            v.extend([&e.state_enc, &e.state_dec, &e.action_enc, &e.action_dec]);
        }
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.matrix];
        if let Some(e) = &mut self.encoders {
            v.extend([&mut e.state_enc, &mut e.state_dec, &mut e.action_enc, &mut e.action_dec]);
        }
        v
    }

    /// All trainable parameters, concatenated (matrix network first).
    pub fn params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), flat.len()));
        }
        let mut off = 0;
        for net in self.nets_mut() {
            let n = net.num_params();
            net.params_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Loss terms `(L_R, L_P)` of one tuple, weighted and divided by `scale`.
    /// With `grad`, accumulates the parameter gradient of `L_R + L_P`.
    fn tuple_loss(&self, t: &TransitionTuple, scale: f64, grad: Option<&mut [f64]>) -> (f64, f64) {
        let (d_f, d_g) = (self.latent_dim, self.action_latent_dim);
        let wp = self.config.prediction_weight / scale;
        let wr = self.config.reconstruction_weight / scale;
        match &self.encoders {
            None => {
                let x = self.normalize_state(&t.start_state);
                let cache = self.matrix.forward_cached(&x);
                let (g, b) = self.assemble(cache.output());
                let y = self.target_identity(t);
                let r: Vec<f64> = (0..d_f)
                    .map(|i| {
                        let gi: f64 = (0..d_g).map(|j| g[(i, j)] * t.actions[j]).sum();
                        gi + b.get(i).copied().unwrap_or(0.0) - y[i]
                    })
                    .collect();
                let lp = wp * r.iter().map(|v| v * v).sum::<f64>();
                if let Some(grad) = grad {
                    let mut dout = vec![0.0; self.matrix.output_dim()];
                    for i in 0..d_f {
                        let dr = 2.0 * wp * r[i];
                        for j in 0..d_g {
                            dout[i * d_g + j] = dr * t.actions[j] * self.matrix_scale[i * d_g + j];
                        }
                        if !self.bias_scale.is_empty() {
                            dout[d_f * d_g + i] = dr * self.bias_scale[i];
                        }
                    }
                    let n = self.matrix.num_params();
                    self.matrix.backward(&cache, &dout, &mut grad[..n]);
                }
                (0.0, lp)
            }
            Some(e) => self.tuple_loss_learned(e, t, wr, wp, grad),
        }
    }

    fn tuple_loss_learned(
        &self,
        e: &Encoders,
        t: &TransitionTuple,
        wr: f64,
        wp: f64,
        grad: Option<&mut [f64]>,
    ) -> (f64, f64) {
        let (d_f, d_g) = (self.latent_dim, self.action_latent_dim);
        let s0 = self.normalize_state(&t.start_state);
        let s1 = self.normalize_state(&t.end_state);
        let a = self.normalize_actions(&t.actions);
        let c0 = e.state_enc.forward_cached(&s0);
        let c1 = e.state_enc.forward_cached(&s1);
        let bias_mode = self.config.absorb_drift_in_bias;
        let cb: Option<Cache> = (!bias_mode).then(|| e.state_enc.forward_cached(&self.normalize_state(&t.baseline_end_state)));
        let ca = e.action_enc.forward_cached(&a);
        let z0 = c0.output();
        let u = ca.output();
        let cm = self.matrix.forward_cached(z0);
        let (g, b) = self.assemble(cm.output());
        let z_ref = cb.as_ref().map_or(z0, |c| c.output());
        let r: Vec<f64> = (0..d_f)
            .map(|i| {
                let gi: f64 = (0..d_g).map(|j| g[(i, j)] * u[j]).sum();
                gi + b.get(i).copied().unwrap_or(0.0) - (c1.output()[i] - z_ref[i])
            })
            .collect();
        let lp = wp * r.iter().map(|v| v * v).sum::<f64>();

        let cd = e.state_dec.forward_cached(z0);
        let rs: Vec<f64> = cd.output().iter().zip(&s0).map(|(p, q)| p - q).collect();
        let cad = e.action_dec.forward_cached(u);
        let ra: Vec<f64> = cad.output().iter().zip(&a).map(|(p, q)| p - q).collect();
        let lr = wr * (rs.iter().chain(&ra).map(|v| v * v).sum::<f64>());

        let Some(grad) = grad else {
            return (lr, lp);
        };
        let sizes: Vec<usize> = self.nets().iter().map(|n| n.num_params()).collect();
        let (gm, rest) = grad.split_at_mut(sizes[0]);
        let (gse, rest) = rest.split_at_mut(sizes[1]);
        let (gsd, rest) = rest.split_at_mut(sizes[2]);
        let (gae, gad) = rest.split_at_mut(sizes[3]);

        let dr: Vec<f64> = r.iter().map(|v| 2.0 * wp * v).collect();
        let mut dout = vec![0.0; self.matrix.output_dim()];
        let mut du = vec![0.0; d_g];
        for i in 0..d_f {
            for j in 0..d_g {
                dout[i * d_g + j] = dr[i] * u[j] * self.matrix_scale[i * d_g + j];
                du[j] += g[(i, j)] * dr[i];
            }
            if bias_mode {
                dout[d_f * d_g + i] = dr[i] * self.bias_scale[i];
            }
        }
        let mut dz0 = self.matrix.backward(&cm, &dout, gm);
        let neg: Vec<f64> = dr.iter().map(|v| -v).collect();
        e.state_enc.backward(&c1, &neg, gse);
        match &cb {
            Some(cb) => {
                e.state_enc.backward(cb, &dr, gse);
            }
            None => {
                for (z, d) in dz0.iter_mut().zip(&dr) {
                    *z += d;
                }
            }
        }
        let drs: Vec<f64> = rs.iter().map(|v| 2.0 * wr * v).collect();
        for (z, d) in dz0.iter_mut().zip(e.state_dec.backward(&cd, &drs, gsd)) {
            *z += d;
        }
        e.state_enc.backward(&c0, &dz0, gse);
        let dra: Vec<f64> = ra.iter().map(|v| 2.0 * wr * v).collect();
        for (x, d) in du.iter_mut().zip(e.action_dec.backward(&cad, &dra, gad)) {
            *x += d;
        }
        e.action_enc.backward(&ca, &du, gae);
        (lr, lp)
    }

    /// Mean loss over `data` (`L_R`, `L_P`).
    pub fn loss(&self, data: &[TransitionTuple]) -> EpochLoss {
        let n = data.len().max(1) as f64;
        let sums = par::chunked_sum(data.len(), 2, |k, acc| {
            let (r, p) = self.tuple_loss(&data[k], n, None);
            acc[0] += r;
            acc[1] += p;
        });
        EpochLoss {
            reconstruction: sums[0],
            prediction: sums[1],
            total: sums[0] + sums[1],
        }
    }

    /// Loss and parameter gradient over `batch`.
    pub fn loss_and_grad(&self, batch: &[&TransitionTuple]) -> (EpochLoss, Vec<f64>) {
        let np = self.num_params();
        let n = batch.len().max(1) as f64;
        let mut acc = par::chunked_sum(batch.len(), np + 2, |k, acc| {
            let (head, tail) = acc.split_at_mut(np);
            let (r, p) = self.tuple_loss(batch[k], n, Some(head));
            tail[0] += r;
            tail[1] += p;
        });
        let p = acc.pop().unwrap();
        let r = acc.pop().unwrap();
        (
            EpochLoss {
                reconstruction: r,
                prediction: p,
                total: r + p,
            },
            acc,
        )
    }
}

fn check_tuple(t: &TransitionTuple, ds: usize, na: usize) -> Result<()> {
    if t.start_state.len() != ds || t.end_state.len() != ds || t.baseline_end_state.len() != ds {
        return Err(Error::shape(ds, t.start_state.len()));
    }
    if t.actions.len() != na {
        return Err(Error::shape(na, t.actions.len()));
    }
    ensure_finite(&t.start_state, "start state")?;
    ensure_finite(&t.end_state, "end state")?;
    ensure_finite(&t.baseline_end_state, "baseline end state")?;
    ensure_finite(&t.actions, "actions")
}

/// Runs `epochs` epochs of minibatch Adam on `data`. The optimizer state is
/// kept in the model so that later calls continue where this one stopped.
pub fn train_channel(
    model: &mut ChannelModel,
    data: &[TransitionTuple],
    epochs: usize,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("channel dataset is empty"));
    }
    let na = model.horizon() * model.action_dim;
    for t in data {
        check_tuple(t, model.state_dim, na)?;
    }
    let np = model.num_params();
    let mut opt = match model.optimizer.take() {
        Some(o) if model.config.warm_start && o.m.len() == np => o,
        _ => Adam::new(np, model.config.learning_rate),
    };
    let mut params = model.params();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(epochs),
        optimizer: format!("adam(beta1={}, beta2={}, eps={})", opt.beta1, opt.beta2, opt.eps),
        gradient_check: None,
    };
    let mut rng = rng::rng_from(seed, &[stream::CHANNEL_SHUFFLE]);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(model.config.batch_size) {
            let batch: Vec<&TransitionTuple> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = model.loss_and_grad(&batch);
            if !loss.total.is_finite() || loss.total > DIVERGENCE_LOSS {
                model.optimizer = Some(opt);
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.total,
                });
            }
            opt.step(&mut params, &grad);
            model.set_params(&params)?;
        }
        let loss = model.loss(data);
        if !loss.total.is_finite() || loss.total > DIVERGENCE_LOSS {
            model.optimizer = Some(opt);
            return Err(Error::Diverged {
                epoch,
                loss: loss.total,
            });
        }
        log::debug!("channel epoch {epoch}: L_R={} L_P={}", loss.reconstruction, loss.prediction);
        report.epochs.push(loss);
        opt.lr *= model.config.lr_decay;
    }
    model.optimizer = Some(opt);
    Ok(report)
}

/// Worst relative error between the analytic gradient of `L_R + L_P` on
/// `batch` and central finite differences, over `samples` parameters drawn
/// with `seed` (all parameters if there are fewer).
///
/// The relative error uses `max(|analytic| + |numeric|, floor)` as the
/// denominator so that vanishing gradients do not blow it up.
pub fn gradient_check(
    model: &ChannelModel,
    batch: &[TransitionTuple],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient check needs a non-empty batch"));
    }
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::invalid("gradient check ε must lie in [1e-7, 1e-4]"));
    }
    const FLOOR: f64 = 1e-4;
    let refs: Vec<&TransitionTuple> = batch.iter().collect();
    let (_, grad) = model.loss_and_grad(&refs);
    let base = model.params();
    let mut idx: Vec<usize> = (0..base.len()).collect();
    let mut rng = rng::rng_from(seed, &[stream::CHANNEL_INIT, 1]);
    idx.shuffle(&mut rng);
    idx.truncate(samples.max(1));
    idx.sort_unstable();
    let errs = par::map_slice(&idx, |&k| -> Result<f64> {
        let mut m = model.clone();
        let mut p = base.clone();
        p[k] = base[k] + eps;
        m.set_params(&p)?;
        let up = m.loss(batch).total;
        p[k] = base[k] - eps;
        m.set_params(&p)?;
        let down = m.loss(batch).total;
        let fd = (up - down) / (2.0 * eps);
        Ok((fd - grad[k]).abs() / (fd.abs() + grad[k].abs()).max(FLOOR))
    });
    let mut worst: f64 = 0.0;
    for e in errs {
        worst = worst.max(e?);
    }
    Ok(worst)
}

/// Dataset CSV: `s_*, a_*, sH_*` columns followed by the zero-action
/// endpoint `s0H_*`.
pub fn write_dataset_csv(data: &[TransitionTuple]) -> String {
    let Some(first) = data.first() else {
        return String::new();
    };
    let ds = first.start_state.len();
    let na = first.actions.len();
    let mut header: Vec<String> = (0..ds).map(|i| format!("s_{i}")).collect();
    header.extend((0..na).map(|i| format!("a_{i}")));
    header.extend((0..ds).map(|i| format!("sH_{i}")));
    header.extend((0..ds).map(|i| format!("s0H_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for t in data {
        let row: Vec<f64> = t
            .start_state
            .iter()
            .chain(&t.actions)
            .chain(&t.end_state)
            .chain(&t.baseline_end_state)
            .copied()
            .collect();
        out.push_str(&crate::io::csv_row(&row));
        out.push('\n');
    }
    out
}

pub fn read_dataset_csv(text: &str) -> Result<Vec<TransitionTuple>> {
    let (header, rows) = crate::io::parse_csv(text)?;
    let count = |p: &str| header.iter().filter(|h| h.starts_with(p) && h[p.len()..].parse::<usize>().is_ok()).count();
    let (ds, na) = (count("s_"), count("a_"));
    if count("sH_") != ds || count("s0H_") != ds || header.len() != 3 * ds + na {
        return Err(Error::Artifact("dataset CSV header does not match s_/a_/sH_/s0H_ layout".into()));
    }
    Ok(rows
        .into_iter()
        .map(|r| TransitionTuple {
            start_state: r[..ds].to_vec(),
            actions: r[ds..ds + na].to_vec(),
            end_state: r[ds + na..2 * ds + na].to_vec(),
            baseline_end_state: r[2 * ds + na..].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BallInBox, ConstantActor, DoubleIntegrator, Pendulum, UniformActor};

    fn integrator() -> Environment {
        Environment::DoubleIntegrator(DoubleIntegrator::default())
    }

    fn linear_config(horizon: usize) -> ChannelConfig {
        ChannelConfig {
            horizon,
            matrix_net: MlpSpec::new(vec![]),
            ..ChannelConfig::default()
        }
    }

    #[test]
    fn sliding_window_count() {
        let env = Environment::Pendulum(Pendulum::default());
        let data = collect_tuples(&env, &UniformActor, 1, 3, 0).unwrap();
        assert_eq!(data.tuples.len(), 197);
        assert_eq!(data.short_episodes, 0);
        let data = collect_tuples(&env, &UniformActor, 2, 500, 0).unwrap();
        assert!(data.tuples.is_empty());
        assert_eq!(data.short_episodes, 2);
    }

    #[test]
    fn zero_actions_leave_ball_in_place() {
        let env = Environment::BallInBox(BallInBox::default());
        let data = collect_tuples(&env, &ConstantActor(vec![0.0, 0.0]), 2, 4, 1).unwrap();
        assert!(!data.tuples.is_empty());
        for t in &data.tuples {
            assert_eq!(t.end_state, t.start_state);
            assert_eq!(t.baseline_end_state, t.start_state);
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let env = integrator();
        let a = collect_tuples(&env, &UniformActor, 3, 2, 11).unwrap();
        let b = collect_tuples(&env, &UniformActor, 3, 2, 11).unwrap();
        assert_eq!(a.tuples, b.tuples);
    }

    #[test]
    fn pendulum_tuples_unwrap_angle() {
        let t = tuples_from_episode(
            &Environment::Pendulum(Pendulum::default()),
            &crate::envs::rollout_from(
                &Environment::Pendulum(Pendulum::default()),
                &ConstantActor(vec![0.0]),
                vec![3.1, 8.0],
                5,
                0,
            )
            .unwrap(),
            3,
        )
        .unwrap();
        for x in &t {
            assert!((x.end_state[0] - x.start_state[0]).abs() < 2.0);
        }
    }

    #[test]
    fn least_squares_init_recovers_linear_channel() {
        let env = integrator();
        let data = collect_tuples(&env, &UniformActor, 20, 2, 3).unwrap();
        let model = ChannelModel::new(&linear_config(2), &env, &data.tuples, 0).unwrap();
        // Zero-hidden-layer net: the output is affine in the normalized state,
        // so only the bias carries the fit; check at the data mean.
        let g = model.channel_matrix(&model.state_mean.clone()).unwrap();
        let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!((g - truth).norm() < 0.2);
    }

    #[test]
    fn predict_is_linear_in_actions_and_pure() {
        let env = integrator();
        let data = collect_tuples(&env, &UniformActor, 5, 2, 3).unwrap();
        let model = ChannelModel::new(&ChannelConfig { horizon: 2, ..ChannelConfig::default() }, &env, &data.tuples, 4).unwrap();
        assert_eq!(model.predict(&[0.3, -0.2], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let a = model.predict(&[0.3, -0.2], &[0.5, -0.1]).unwrap();
        assert_eq!(a, model.predict(&[0.3, -0.2], &[0.5, -0.1]).unwrap());
        assert!(model.predict(&[0.3, -0.2], &[0.5]).is_err());
    }

    #[test]
    fn single_repeated_tuple_is_fitted() {
        let env = integrator();
        let t = TransitionTuple {
            start_state: vec![0.2, 0.1],
            actions: vec![0.7, -0.4],
            end_state: vec![0.2 + 0.2 + 0.7, 0.1 + 0.3],
            baseline_end_state: vec![0.4, 0.1],
        };
        let data = vec![t; 64];
        let cfg = ChannelConfig {
            horizon: 2,
            least_squares_init: false,
            learning_rate: 1e-2,
            batch_size: 16,
            ..ChannelConfig::default()
        };
        let mut model = ChannelModel::new(&cfg, &env, &data, 0).unwrap();
        let report = train_channel(&mut model, &data, 100, 0).unwrap();
        assert!(report.final_loss().unwrap() < 1e-8, "{:?}", report.final_loss());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let env = Environment::Pendulum(Pendulum::default());
        let data = collect_tuples(&env, &UniformActor, 1, 3, 5).unwrap().tuples;
        let batch = &data[..32];
        let identity = ChannelModel::new(&ChannelConfig::default(), &env, &data, 1).unwrap();
        let err = gradient_check(&identity, batch, 1e-6, 200, 0).unwrap();
        assert!(err <= 1e-5, "identity mode: {err}");
        let learned_cfg = ChannelConfig {
            encoder: EncoderConfig::Learned {
                state_latent: 3,
                action_latent: 2,
                hidden: vec![16],
            },
            matrix_net: MlpSpec::new(vec![16]),
            ..ChannelConfig::default()
        };
        let learned = ChannelModel::new(&learned_cfg, &env, &data, 2).unwrap();
        let err = gradient_check(&learned, batch, 1e-6, 200, 0).unwrap();
        assert!(err <= 1e-5, "learned mode: {err}");
        let bias = ChannelModel::new(
            &ChannelConfig {
                absorb_drift_in_bias: true,
                ..learned_cfg
            },
            &env,
            &data,
            2,
        )
        .unwrap();
        let err = gradient_check(&bias, batch, 1e-6, 200, 0).unwrap();
        assert!(err <= 1e-5, "bias mode: {err}");
    }

    #[test]
    fn linear_model_gradient_is_exact() {
        let env = integrator();
        let data = collect_tuples(&env, &UniformActor, 2, 2, 5).unwrap().tuples;
        let model = ChannelModel::new(&linear_config(2), &env, &data, 1).unwrap();
        let err = gradient_check(&model, &data, 1e-4, 100, 0).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn zero_parameters_give_finite_check() {
        let env = integrator();
        let data = collect_tuples(&env, &UniformActor, 1, 2, 5).unwrap().tuples;
        let mut model = ChannelModel::new(&ChannelConfig { horizon: 2, ..ChannelConfig::default() }, &env, &data, 1).unwrap();
        model.set_params(&vec![0.0; model.num_params()]).unwrap();
        assert!(gradient_check(&model, &data, 1e-6, 100, 0).unwrap().is_finite());
    }

    #[test]
    fn loss_decomposes() {
        let env = Environment::Pendulum(Pendulum::default());
        let data = collect_tuples(&env, &UniformActor, 1, 3, 5).unwrap().tuples;
        let cfg = ChannelConfig {
            encoder: EncoderConfig::Learned {
                state_latent: 2,
                action_latent: 3,
                hidden: vec![8],
            },
            ..ChannelConfig::default()
        };
        let mut model = ChannelModel::new(&cfg, &env, &data, 0).unwrap();
        let report = train_channel(&mut model, &data, 3, 0).unwrap();
        for e in &report.epochs {
            assert!(e.reconstruction > 0.0);
            assert_eq!(e.total, e.reconstruction + e.prediction);
        }
        let identity = ChannelModel::new(&ChannelConfig::default(), &env, &data, 0).unwrap();
        assert_eq!(identity.loss(&data).reconstruction, 0.0);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let env = Environment::Pendulum(Pendulum::default());
        let data = collect_tuples(&env, &UniformActor, 1, 3, 5).unwrap().tuples;
        let text = write_dataset_csv(&data);
        assert!(text.starts_with("s_0,s_1,a_0,a_1,a_2,sH_0,sH_1,s0H_0,s0H_1\n"));
        assert_eq!(read_dataset_csv(&text).unwrap(), data);
    }
}
