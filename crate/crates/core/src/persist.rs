//! Bit-exact text persistence for models, policies and loop checkpoints.
//!
//! Layout:
//!
//! ```text
//! empower-params 1
//! kind channel_model
//! meta {"schema_version":1,...}
//! tensor matrix.w0 64 2
//! 3fb999999999999a bfd3333333333333 ...
//! ...
//! end
//! ```
//!
//! Every tensor row is one line of IEEE-754 bit patterns in hex, so loading
//! reproduces the saved values exactly (including NaN payloads and -0.0).
//! `meta` is a single-line JSON object holding configs and integer fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::channel::{ChannelConfig, ChannelModel, Encoders, TransitionTuple};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::nn::{Adam, Mlp, MlpSpec};
use crate::policy::{EvalReport, GaussianPolicy, IterationRecord, Learner, LoopState, UpdateStats};
use crate::SCHEMA_VERSION;

const MAGIC: &str = "empower-params";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// A parsed parameter file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Artifact(msg.into())
}

impl ParamFile {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: json!({ "schema_version": SCHEMA_VERSION }),
            tensors: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {SCHEMA_VERSION}\nkind {}\nmeta {}\n", self.kind, self.meta);
        for t in &self.tensors {
            out.push_str(&format!("tensor {} {} {}\n", t.name, t.rows, t.cols));
            for r in 0..t.rows {
                let row: Vec<String> = t.data[r * t.cols..(r + 1) * t.cols]
                    .iter()
                    .map(|x| format!("{:016x}", x.to_bits()))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty parameter file"))?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v.trim().parse::<u32>() == Ok(SCHEMA_VERSION) => {}
            Some((MAGIC, v)) => return Err(bad(format!("unsupported parameter file version {v}"))),
            _ => return Err(bad("not a parameter file")),
        }
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("kind "))
            .ok_or_else(|| bad("missing kind line"))?
            .to_string();
        let meta_line = lines
            .next()
            .and_then(|l| l.strip_prefix("meta "))
            .ok_or_else(|| bad("missing meta line"))?;
        let meta: Value = serde_json::from_str(meta_line).map_err(|e| bad(format!("meta: {e}")))?;

        let mut tensors = Vec::new();
        loop {
            let line = lines.next().ok_or_else(|| bad("truncated file (no end line)"))?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [kw, name, rows, cols] = parts[..] else {
                return Err(bad(format!("malformed tensor header {line:?}")));
            };
            if kw != "tensor" {
                return Err(bad(format!("expected tensor header, got {line:?}")));
            }
            let rows: usize = rows.parse().map_err(|_| bad(format!("bad row count in {line:?}")))?;
            let cols: usize = cols.parse().map_err(|_| bad(format!("bad column count in {line:?}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = lines.next().ok_or_else(|| bad(format!("tensor {name}: missing row {r}")))?;
                let before = data.len();
                for word in row.split_ascii_whitespace() {
                    let bits = u64::from_str_radix(word, 16).map_err(|_| bad(format!("tensor {name}: bad word {word:?}")))?;
                    data.push(f64::from_bits(bits));
                }
                if data.len() - before != cols {
                    return Err(bad(format!("tensor {name}: row {r} has {} values, expected {cols}", data.len() - before)));
                }
            }
            tensors.push(Tensor {
                name: name.to_string(),
                rows,
                cols,
                data,
            });
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(bad(format!("expected a {kind} file, found {}", self.kind)))
        }
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) {
        debug_assert_eq!(rows * cols, data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            rows,
            cols,
            data,
        });
    }

    pub fn push_vec(&mut self, name: impl Into<String>, data: &[f64]) {
        self.push(name, 1, data.len(), data.to_vec());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor(name)?.data.clone())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| bad(format!("meta {key}: {e}")))?;
        self.meta[key] = v;
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| bad(format!("meta field {key} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| bad(format!("meta {key}: {e}")))
    }

    /// One weight tensor (`out × in`) and one bias tensor per layer.
    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp) -> Result<()> {
        self.set_meta(&format!("{prefix}.sizes"), net.sizes())?;
        self.set_meta(&format!("{prefix}.spec"), net.spec())?;
        let mut off = 0;
        for (k, w) in net.sizes().windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let p = net.params();
            self.push(format!("{prefix}.w{k}"), fan_out, fan_in, p[off..off + fan_in * fan_out].to_vec());
            off += fan_in * fan_out;
            self.push(format!("{prefix}.b{k}"), fan_out, 1, p[off..off + fan_out].to_vec());
            off += fan_out;
        }
        Ok(())
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let sizes: Vec<usize> = self.meta(&format!("{prefix}.sizes"))?;
        let spec: MlpSpec = self.meta(&format!("{prefix}.spec"))?;
        let mut params = Vec::new();
        for (k, w) in sizes.windows(2).enumerate() {
            let weights = self.tensor(&format!("{prefix}.w{k}"))?;
            let bias = self.tensor(&format!("{prefix}.b{k}"))?;
            if (weights.rows, weights.cols) != (w[1], w[0]) || bias.data.len() != w[1] {
                return Err(bad(format!("{prefix} layer {k}: shape does not match sizes {sizes:?}")));
            }
            params.extend(&weights.data);
            params.extend(&bias.data);
        }
        Mlp::from_params(sizes, &spec, params).map_err(|e| bad(format!("{prefix}: {e}")))
    }

    pub fn push_adam(&mut self, prefix: &str, opt: &Adam) -> Result<()> {
        self.set_meta(&format!("{prefix}.t"), opt.t)?;
        self.push_vec(format!("{prefix}.hyper"), &[opt.lr, opt.beta1, opt.beta2, opt.eps]);
        self.push_vec(format!("{prefix}.m"), &opt.m);
        self.push_vec(format!("{prefix}.v"), &opt.v);
        Ok(())
    }

    pub fn adam(&self, prefix: &str) -> Result<Adam> {
        let h = self.vec(&format!("{prefix}.hyper"))?;
        let [lr, beta1, beta2, eps] = h[..] else {
            return Err(bad(format!("{prefix}.hyper must hold 4 values")));
        };
        let (m, v) = (self.vec(&format!("{prefix}.m"))?, self.vec(&format!("{prefix}.v"))?);
        if m.len() != v.len() {
            return Err(bad(format!("{prefix}: moment vectors differ in length")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
            t: self.meta(&format!("{prefix}.t"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn write_channel(file: &mut ParamFile, prefix: &str, m: &ChannelModel) -> Result<()> {
    file.set_meta(&format!("{prefix}.config"), &m.config)?;
    file.set_meta(
        &format!("{prefix}.dims"),
        [m.state_dim, m.action_dim, m.latent_dim, m.action_latent_dim],
    )?;
    file.push_vec(format!("{prefix}.action_bounds"), &m.action_bounds);
    file.push_vec(format!("{prefix}.state_mean"), &m.state_mean);
    file.push_vec(format!("{prefix}.state_std"), &m.state_std);
    file.push_vec(format!("{prefix}.matrix_scale"), &m.matrix_scale);
    file.push_vec(format!("{prefix}.bias_scale"), &m.bias_scale);
    file.push_mlp(&format!("{prefix}.matrix"), &m.matrix)?;
    if let Some(e) = &m.encoders {
        file.push_mlp(&format!("{prefix}.state_enc"), &e.state_enc)?;
        file.push_mlp(&format!("{prefix}.state_dec"), &e.state_dec)?;
        file.push_mlp(&format!("{prefix}.action_enc"), &e.action_enc)?;
        file.push_mlp(&format!("{prefix}.action_dec"), &e.action_dec)?;
    }
    file.set_meta(&format!("{prefix}.has_optimizer"), m.optimizer.is_some())?;
    if let Some(opt) = &m.optimizer {
        file.push_adam(&format!("{prefix}.adam"), opt)?;
    }
    Ok(())
}

fn read_channel(file: &ParamFile, prefix: &str) -> Result<ChannelModel> {
    let config: ChannelConfig = file.meta(&format!("{prefix}.config"))?;
    let [state_dim, action_dim, latent_dim, action_latent_dim]: [usize; 4] = file.meta(&format!("{prefix}.dims"))?;
    let encoders = match config.encoder {
        crate::channel::EncoderConfig::Identity => None,
        crate::channel::EncoderConfig::Learned { .. } => Some(Encoders {
            state_enc: file.mlp(&format!("{prefix}.state_enc"))?,
            state_dec: file.mlp(&format!("{prefix}.state_dec"))?,
            action_enc: file.mlp(&format!("{prefix}.action_enc"))?,
            action_dec: file.mlp(&format!("{prefix}.action_dec"))?,
        }),
    };
    let optimizer = if file.meta(&format!("{prefix}.has_optimizer"))? {
        Some(file.adam(&format!("{prefix}.adam"))?)
    } else {
        None
    };
    let model = ChannelModel {
        config,
        state_dim,
        action_dim,
        action_bounds: file.vec(&format!("{prefix}.action_bounds"))?,
        latent_dim,
        action_latent_dim,
        state_mean: file.vec(&format!("{prefix}.state_mean"))?,
        state_std: file.vec(&format!("{prefix}.state_std"))?,
        matrix_scale: file.vec(&format!("{prefix}.matrix_scale"))?,
        bias_scale: file.vec(&format!("{prefix}.bias_scale"))?,
        matrix: file.mlp(&format!("{prefix}.matrix"))?,
        encoders,
        optimizer,
    };
    let out = latent_dim * action_latent_dim + model.bias_scale.len();
    if model.matrix.output_dim() != out || model.matrix_scale.len() != latent_dim * action_latent_dim {
        return Err(bad("channel matrix network does not match the stored dimensions"));
    }
    if model.state_mean.len() != state_dim || model.state_std.len() != state_dim {
        return Err(bad("channel normalization does not match the state dimension"));
    }
    Ok(model)
}

fn write_learner(file: &mut ParamFile, prefix: &str, l: &Learner) -> Result<()> {
    file.push_mlp(&format!("{prefix}.policy"), &l.policy.mean)?;
    file.push_vec(format!("{prefix}.log_std"), &l.policy.log_std);
    file.push_vec(format!("{prefix}.bounds"), &l.policy.bounds);
    file.set_meta(&format!("{prefix}.deterministic"), l.policy.deterministic)?;
    file.push_mlp(&format!("{prefix}.value"), &l.value)?;
    file.push_adam(&format!("{prefix}.policy_adam"), &l.policy_opt)?;
    file.push_adam(&format!("{prefix}.value_adam"), &l.value_opt)
}

fn read_learner(file: &ParamFile, prefix: &str) -> Result<Learner> {
    let policy = GaussianPolicy {
        mean: file.mlp(&format!("{prefix}.policy"))?,
        log_std: file.vec(&format!("{prefix}.log_std"))?,
        bounds: file.vec(&format!("{prefix}.bounds"))?,
        deterministic: file.meta(&format!("{prefix}.deterministic"))?,
    };
    if policy.log_std.len() != policy.mean.output_dim() || policy.bounds.len() != policy.mean.output_dim() {
        return Err(bad("policy log_std/bounds do not match the action dimension"));
    }
    let learner = Learner {
        value: file.mlp(&format!("{prefix}.value"))?,
        policy_opt: file.adam(&format!("{prefix}.policy_adam"))?,
        value_opt: file.adam(&format!("{prefix}.value_adam"))?,
        policy,
    };
    if learner.policy_opt.m.len() != learner.policy.num_params() || learner.value_opt.m.len() != learner.value.num_params() {
        return Err(bad("optimizer state does not match the network sizes"));
    }
    Ok(learner)
}

pub fn channel_to_file(model: &ChannelModel) -> Result<ParamFile> {
    let mut f = ParamFile::new("channel_model");
    write_channel(&mut f, "channel", model)?;
    Ok(f)
}

pub fn channel_from_file(file: &ParamFile) -> Result<ChannelModel> {
    file.expect_kind("channel_model")?;
    read_channel(file, "channel")
}

pub fn learner_to_file(learner: &Learner) -> Result<ParamFile> {
    let mut f = ParamFile::new("policy");
    write_learner(&mut f, "learner", learner)?;
    Ok(f)
}

pub fn learner_from_file(file: &ParamFile) -> Result<Learner> {
    file.expect_kind("policy")?;
    read_learner(file, "learner")
}

pub fn save_channel(path: &Path, model: &ChannelModel) -> Result<()> {
    channel_to_file(model)?.save(path)
}

pub fn load_channel(path: &Path) -> Result<ChannelModel> {
    channel_from_file(&ParamFile::load(path)?)
}

pub fn save_learner(path: &Path, learner: &Learner) -> Result<()> {
    learner_to_file(learner)?.save(path)
}

pub fn load_learner(path: &Path) -> Result<Learner> {
    learner_from_file(&ParamFile::load(path)?)
}

const RECORD_COLS: usize = 14;

fn record_row(r: &IterationRecord) -> [f64; RECORD_COLS] {
    let u = &r.update;
    [
        r.iter as f64,
        r.channel_loss,
        r.mean_emp,
        r.eval_msd,
        r.steps as f64,
        u.policy_loss,
        u.value_loss,
        u.entropy_before,
        u.entropy_after,
        u.approx_kl,
        u.clip_fraction,
        u.policy_steps as f64,
        r.goal_rate,
        r.middle_fraction,
    ]
}

fn record_from_row(x: &[f64]) -> IterationRecord {
    IterationRecord {
        iter: x[0] as usize,
        channel_loss: x[1],
        mean_emp: x[2],
        eval_msd: x[3],
        steps: x[4] as usize,
        update: UpdateStats {
            policy_loss: x[5],
            value_loss: x[6],
            entropy_before: x[7],
            entropy_after: x[8],
            approx_kl: x[9],
            clip_fraction: x[10],
            policy_steps: x[11] as usize,
        },
        goal_rate: x[12],
        middle_fraction: x[13],
    }
}

/// Everything in `state` except the initial evaluation, which is a pure
/// function of the run configuration and is recomputed on load.
pub fn checkpoint_to_file(state: &LoopState) -> Result<ParamFile> {
    let mut f = ParamFile::new("checkpoint");
    f.set_meta("next_iter", state.next_iter)?;
    f.set_meta("steps", state.steps)?;
    write_learner(&mut f, "learner", &state.learner)?;
    f.set_meta("has_channel", state.channel.is_some())?;
    if let Some(m) = &state.channel {
        write_channel(&mut f, "channel", m)?;
    }
    let rows: Vec<f64> = state.records.iter().flat_map(record_row).collect();
    f.push("records", state.records.len(), RECORD_COLS, rows);
    f.set_meta("replay_len", state.replay.len())?;
    for (k, tuples) in state.replay.iter().enumerate() {
        let width = tuples.first().map_or(0, |t| 3 * t.start_state.len() + t.actions.len());
        f.set_meta(
            &format!("replay{k}.dims"),
            tuples.first().map_or([0, 0], |t| [t.start_state.len(), t.actions.len()]),
        )?;
        let data = tuples
            .iter()
            .flat_map(|t| {
                t.start_state
                    .iter()
                    .chain(&t.actions)
                    .chain(&t.end_state)
                    .chain(&t.baseline_end_state)
                    .copied()
            })
            .collect();
        f.push(format!("replay{k}"), tuples.len(), width, data);
    }
    Ok(f)
}

pub fn checkpoint_from_file(file: &ParamFile, initial_eval: EvalReport) -> Result<LoopState> {
    file.expect_kind("checkpoint")?;
    let channel = if file.meta("has_channel")? {
        Some(read_channel(file, "channel")?)
    } else {
        None
    };
    let rec = file.tensor("records")?;
    if rec.cols != RECORD_COLS && rec.rows > 0 {
        return Err(bad(format!("records need {RECORD_COLS} columns")));
    }
    let records = rec.data.chunks(RECORD_COLS).map(record_from_row).collect();
    let mut replay = Vec::new();
    for k in 0..file.meta::<usize>("replay_len")? {
        let [ds, na]: [usize; 2] = file.meta(&format!("replay{k}.dims"))?;
        let t = file.tensor(&format!("replay{k}"))?;
        if t.rows > 0 && t.cols != 3 * ds + na {
            return Err(bad(format!("replay{k}: width {} does not match dims", t.cols)));
        }
        replay.push(
            t.data
                .chunks(t.cols.max(1))
                .take(t.rows)
                .map(|row| TransitionTuple {
                    start_state: row[..ds].to_vec(),
                    actions: row[ds..ds + na].to_vec(),
                    end_state: row[ds + na..2 * ds + na].to_vec(),
                    baseline_end_state: row[2 * ds + na..].to_vec(),
                })
                .collect(),
        );
    }
    Ok(LoopState {
        next_iter: file.meta("next_iter")?,
        learner: read_learner(file, "learner")?,
        channel,
        replay,
        records,
        steps: file.meta("steps")?,
        initial_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{collect_tuples, train_channel, EncoderConfig};
    use crate::envs::{BallInBox, Environment, UniformActor};
    use crate::policy::PpoConfig;

    fn trained(encoder: EncoderConfig) -> ChannelModel {
        let env = Environment::BallInBox(BallInBox::default());
        let data = collect_tuples(&env, &UniformActor, 2, 3, 5).unwrap();
        let cfg = ChannelConfig {
            encoder,
            matrix_net: MlpSpec::new(vec![8]),
            ..ChannelConfig::default()
        };
        let mut m = ChannelModel::new(&cfg, &env, &data.tuples, 1).unwrap();
        train_channel(&mut m, &data.tuples, 2, 2).unwrap();
        m
    }

    #[test]
    fn channel_round_trip_is_bit_exact() {
        for enc in [
            EncoderConfig::Identity,
            EncoderConfig::Learned {
                state_latent: 3,
                action_latent: 2,
                hidden: vec![4],
            },
        ] {
            let m = trained(enc);
            let text = channel_to_file(&m).unwrap().to_text();
            let back = channel_from_file(&ParamFile::parse(&text).unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(channel_to_file(&back).unwrap().to_text(), text);
        }
    }

    #[test]
    fn special_values_survive() {
        let mut f = ParamFile::new("test");
        f.push_vec("x", &[-0.0, f64::NAN, f64::INFINITY, f64::MIN_POSITIVE, 0.1]);
        let back = ParamFile::parse(&f.to_text()).unwrap();
        let x = back.vec("x").unwrap();
        assert_eq!(x[0].to_bits(), (-0.0f64).to_bits());
        assert!(x[1].is_nan());
        assert_eq!(x[2], f64::INFINITY);
        assert_eq!(x[4], 0.1);
    }

    #[test]
    fn learner_round_trip_is_bit_exact() {
        let env = Environment::BallInBox(BallInBox::default());
        let l = Learner::new(&env, &PpoConfig::default(), 3).unwrap();
        let back = learner_from_file(&ParamFile::parse(&learner_to_file(&l).unwrap().to_text()).unwrap()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn rejects_damaged_files() {
        let m = trained(EncoderConfig::Identity);
        let text = channel_to_file(&m).unwrap().to_text();
        assert!(ParamFile::parse(&text.replace("empower-params 1", "empower-params 9")).is_err());
        assert!(ParamFile::parse(&text[..text.len() / 2]).is_err());
        let wrong_kind = learner_to_file(&Learner::new(&Environment::BallInBox(BallInBox::default()), &PpoConfig::default(), 0).unwrap()).unwrap();
        assert!(channel_from_file(&wrong_kind).is_err());
    }
}
