//! Self-check suites comparing fast routines against slow references:
//! water-filling against grid search, the analytic pendulum channel against
//! finite differences, and channel-loss gradients against finite differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analytic::{analytic_g_pendulum, numeric_g, AnalyticPendulumConfig, GVariant, PENDULUM_HORIZON};
use crate::capacity::{capacity_of, water_fill_with, GainMode, SingularSpectrum};
use crate::channel::{collect_tuples, gradient_check, ChannelConfig, ChannelModel, EncoderConfig};
use crate::envs::{Environment, Pendulum, UniformActor};
use crate::error::Result;
use crate::nn::MlpSpec;
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Waterfill,
    Jacobian,
    Gradient,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Waterfill => "waterfill",
            Suite::Jacobian => "jacobian",
            Suite::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub suite: Suite,
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub worst: f64,
    pub worst_instance: usize,
    /// Instances outside tolerance, with everything needed to replay them.
    pub failures: Vec<Value>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn new(suite: Suite, seed: u64, tolerance: f64) -> Self {
        Self {
            suite,
            seed,
            instances: 0,
            tolerance,
            worst: 0.0,
            worst_instance: 0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, deviation: f64, instance: impl FnOnce() -> Value) {
        let k = self.instances;
        self.instances += 1;
        if deviation > self.worst || deviation.is_nan() {
            self.worst = deviation;
            self.worst_instance = k;
        }
        if !(deviation <= self.tolerance) {
            let mut v = instance();
            v["instance"] = json!(k);
            v["deviation"] = json!(deviation);
            self.failures.push(v);
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<OracleReport> {
    match suite {
        Suite::Waterfill => waterfill_suite(seed),
        Suite::Jacobian => jacobian_suite(seed),
        Suite::Gradient => gradient_suite(seed),
    }
}

/// Maximum of `½ Σ ln(1 + gain_i p_i)` over the power simplex by grid
/// search: a uniform grid with 48 steps per unit of budget, then repeated
/// local grids around the incumbent with shrinking spacing.
pub fn grid_search_capacity(sigmas: &[f64], power: f64, mode: GainMode) -> f64 {
    let k = sigmas.len();
    if k == 0 || power == 0.0 {
        return 0.0;
    }
    let eval = |p: &[f64]| capacity_of(sigmas, p, mode);
    let n = 48usize;
    let mut best = vec![0.0; k];
    best[0] = power;
    let mut best_val = eval(&best);
    let mut counts = vec![0usize; k - 1];
    loop {
        let used: usize = counts.iter().sum();
        if used <= n {
            let mut p: Vec<f64> = counts.iter().map(|&c| power * c as f64 / n as f64).collect();
            p.push(power * (n - used) as f64 / n as f64);
            let v = eval(&p);
            if v > best_val {
                best_val = v;
                best = p;
            }
        }
        // Odometer over the first k−1 coordinates.
        let mut i = 0;
        while i < k - 1 {
            counts[i] += 1;
            if counts[i] <= n {
                break;
            }
            counts[i] = 0;
            i += 1;
        }
        if i == k - 1 {
            break;
        }
    }
    let mut step = power / n as f64;
    let m = 4i64;
    for _ in 0..12 {
        step /= 3.0;
        let centre = best.clone();
        let mut offs = vec![-m; k - 1];
        loop {
            let mut p: Vec<f64> = centre[..k - 1]
                .iter()
                .zip(&offs)
                .map(|(c, &o)| c + step * o as f64)
                .collect();
            let rest = power - p.iter().sum::<f64>();
            p.push(rest);
            if p.iter().all(|&x| x >= 0.0) {
                let v = eval(&p);
                if v > best_val {
                    best_val = v;
                    best = p;
                }
            }
            let mut i = 0;
            while i < k - 1 {
                offs[i] += 1;
                if offs[i] <= m {
                    break;
                }
                offs[i] = -m;
                i += 1;
            }
            if i == k - 1 || k == 1 {
                break;
            }
        }
    }
    best_val
}

fn waterfill_suite(seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new(Suite::Waterfill, seed, 1e-3);
    let mut rng = rng_from(seed, &[0x0a11]);
    for _ in 0..200 {
        let k = rng.random_range(1..=4usize);
        let sigmas: Vec<f64> = (0..k)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.01..3.0) })
            .collect();
        let power = rng.random_range(0.05..5.0);
        let mode = if rng.random_bool(0.5) { GainMode::Sigma } else { GainMode::SigmaSquared };
        let spectrum = SingularSpectrum::new(sigmas.clone())?;
        let res = water_fill_with(&spectrum, power, mode)?;
        let grid = grid_search_capacity(spectrum.values(), power, mode);
        let kkt = res.kkt_violation(power);
        // A KKT violation is scored against the same tolerance.
        let deviation = (res.capacity - grid).abs().max(if kkt <= 1e-9 { 0.0 } else { f64::INFINITY });
        report.record(deviation, || {
            json!({
                "sigmas": sigmas,
                "power": power,
                "gain_mode": mode,
                "solver_capacity": res.capacity,
                "grid_capacity": grid,
                "powers": res.allocation.powers,
                "kkt_violation": kkt,
            })
        });
    }
    Ok(report)
}

fn jacobian_suite(seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new(Suite::Jacobian, seed, 1e-5);
    let pendulum = Pendulum::default();
    let cfg = AnalyticPendulumConfig::from(&pendulum);
    let env = Environment::Pendulum(pendulum);
    let mut rng = rng_from(seed, &[0x0a12]);
    for _ in 0..100 {
        let s = vec![
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(-8.0..8.0),
        ];
        let analytic = analytic_g_pendulum(&s, &cfg, GVariant::DerivationConsistent);
        let numeric = numeric_g(&env, &s, PENDULUM_HORIZON, 1e-6)?.matrix;
        let deviation = (&analytic - &numeric).amax();
        report.record(deviation, || {
            json!({
                "state": s,
                "analytic": analytic.as_slice(),
                "numeric": numeric.as_slice(),
                "layout": "column-major 2x3",
            })
        });
    }
    Ok(report)
}

fn gradient_suite(seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new(Suite::Gradient, seed, 1e-5);
    let env = Environment::Pendulum(Pendulum::default());
    let data = collect_tuples(&env, &UniformActor, 1, 3, seed)?.tuples;
    let batch = &data[..32];
    let learned = ChannelConfig {
        encoder: EncoderConfig::Learned {
            state_latent: 3,
            action_latent: 2,
            hidden: vec![16],
        },
        matrix_net: MlpSpec::new(vec![16]),
        ..ChannelConfig::default()
    };
    let configs = [
        ("identity", ChannelConfig::default()),
        ("learned", learned.clone()),
        (
            "learned_with_bias",
            ChannelConfig {
                absorb_drift_in_bias: true,
                ..learned
            },
        ),
    ];
    for (name, cfg) in configs {
        let model = ChannelModel::new(&cfg, &env, &data, seed)?;
        let deviation = gradient_check(&model, batch, 1e-6, 200, seed)?;
        report.record(deviation, || json!({ "mode": name, "config": cfg, "data_seed": seed, "eps": 1e-6 }));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_search_finds_the_two_channel_optimum() {
        // σ = (2, 1), P = 1: level 1/ν with (L − ½) + (L − 1) = 1 → L = 1.25.
        let v = grid_search_capacity(&[2.0, 1.0], 1.0, GainMode::Sigma);
        let want = 0.5 * (2.5f64.ln() + 1.25f64.ln());
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
    }

    #[test]
    fn suites_pass() {
        for suite in [Suite::Waterfill, Suite::Jacobian, Suite::Gradient] {
            let r = run_suite(suite, 0).unwrap();
            assert!(r.passed(), "{suite:?}: {:?}", r.failures.first());
        }
    }
}
