use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use empower_core::analytic::{landscape as tabulate, AnalyticSource, EmpowermentSource, NumericSource};
use empower_core::config::RunConfig;
use empower_core::envs::{Dynamics, Environment, Step};
use empower_core::io::{atomic_write, csv_row};
use empower_core::oracle::run_suite;
use empower_core::persist::{self, checkpoint_from_file, checkpoint_to_file, ParamFile};
use empower_core::policy::{
    evaluate_policy, initial_state, latent_gce_loop, EvalConfig, EvalReport, IterationRecord, LoopState, RewardKind,
};
use empower_core::rng::{derive_seed, stream};
use empower_core::Result;
use serde_json::json;

use crate::output::{to_pretty, CliError, CliResult, OutDir};
use crate::{Common, EvalArgs, LandscapeArgs, OracleArgs, SafetyArgs, SourceArg, TrainArgs};

const CHECKPOINT: &str = "checkpoint.params";
const METRICS: &str = "metrics.csv";

/// Loads the config and applies `--seed`.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_root(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut s = format!("{}\n", IterationRecord::CSV_HEADER);
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// One row per step of every episode: `episode,t,s_*,a_*,done,goal`.
fn trajectories_csv(trajectories: &[Vec<Step>]) -> String {
    let (ds, da) = trajectories
        .iter()
        .find_map(|t| t.first())
        .map_or((0, 0), |s| (s.state.len(), s.action.len()));
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..ds).map(|i| format!("s_{i}")));
    header.extend((0..da).map(|i| format!("a_{i}")));
    header.extend(["done".to_string(), "goal".to_string()]);
    let mut out = header.join(",") + "\n";
    for (k, traj) in trajectories.iter().enumerate() {
        for (t, s) in traj.iter().enumerate() {
            let mut row = vec![k as f64, t as f64];
            row.extend(&s.state);
            row.extend(&s.action);
            row.push(f64::from(u8::from(s.done)));
            row.push(f64::from(u8::from(s.goal_hit)));
            out.push_str(&csv_row(&row));
            out.push('\n');
        }
        // Close the episode with its final state.
        if let Some(last) = traj.last() {
            let mut row = vec![k as f64, traj.len() as f64];
            row.extend(&last.next_state);
            row.extend(std::iter::repeat_n(f64::NAN, da));
            row.extend([1.0, f64::from(u8::from(last.goal_hit))]);
            out.push_str(&csv_row(&row));
            out.push('\n');
        }
    }
    out
}

pub fn landscape(a: &LandscapeArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let env = &cfg.environment;
    let spec = cfg.grid_spec();
    let source: Box<dyn EmpowermentSource> = match a.source {
        SourceArg::Analytic => match env {
            Environment::Pendulum(p) => Box::new(AnalyticSource {
                config: p.into(),
                variant: a.variant.into(),
            }),
            _ => return Err(CliError::Config("the analytic source exists only for the pendulum".into())),
        },
        SourceArg::Numeric => {
            let eps = a.eps.unwrap_or(cfg.policy.numeric_eps);
            let bound = env.action_bounds().into_iter().fold(f64::INFINITY, f64::min);
            if !(eps > 0.0 && eps <= bound) {
                return Err(CliError::Config(format!("--eps must lie in (0, {bound}], got {eps}")));
            }
            Box::new(NumericSource {
                env: env.clone(),
                horizon: cfg.channel.horizon,
                eps,
            })
        }
        SourceArg::Learned => {
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| CliError::Artifact("--source learned needs --model".into()))?;
            let m = persist::load_channel(path)?;
            if m.state_dim != env.state_dim() || m.action_dim != env.action_dim() {
                return Err(CliError::Artifact(format!(
                    "model {} has state/action dims {}/{}, environment {} has {}/{}",
                    path.display(),
                    m.state_dim,
                    m.action_dim,
                    env.name(),
                    env.state_dim(),
                    env.action_dim()
                )));
            }
            Box::new(m)
        }
    };
    let grid = tabulate(source.as_ref(), &spec, &cfg.capacity)?;

    let mut out = OutDir::create(out_root(&a.common, &cfg))?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).ok();
    out.write("landscape.csv", grid.to_csv())?;
    out.write("landscape.json", to_pretty(&grid.metadata(cfg.seed, timestamp)))?;
    out.write_manifest("landscape", cfg.seed, json!({ "source": grid.source, "config": cfg }))?;

    let (i, j) = grid.argmax();
    let values = grid.flat_values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "{} cells, empowerment in [{lo:.6}, {:.6}] nats, argmax at {}={:.4}, {}={:.4}",
        values.len(),
        grid.values[i][j],
        spec.axis1.name,
        grid.axis1[i],
        spec.axis2.name,
        grid.axis2[j]
    );
    Ok(())
}

/// Runs the loop with per-iteration checkpoints and writes the final
/// artifacts. A failing run leaves `FAILED` with the iteration index.
fn run_training(cfg: &RunConfig, out: &mut OutDir, resume: bool) -> CliResult<LoopState> {
    let env = &cfg.environment;
    let seed = cfg.seed;
    let cfg_json = cfg.to_json();
    let mut start = None;
    if resume && out.exists(CHECKPOINT) {
        if out.exists("config.json") {
            let mut previous = RunConfig::load(&out.path("config.json"))?;
            // Extending a finished run is the point of resuming.
            previous.policy.iterations = cfg.policy.iterations;
            if &previous != cfg {
                return Err(CliError::Config(
                    "--resume with a config that differs from the one in the output directory".into(),
                ));
            }
        }
        let file = ParamFile::load(&out.path(CHECKPOINT))?;
        let initial = initial_state(env, &cfg.policy, seed)?.initial_eval;
        let state = checkpoint_from_file(&file, initial)?;
        log::info!("resuming at iteration {}", state.next_iter);
        start = Some(state);
    } else if resume {
        log::warn!("--resume: no checkpoint in the output directory, starting from scratch");
    }
    out.remove("FAILED")?;
    out.write("config.json", &cfg_json)?;

    let checkpoint_path = out.path(CHECKPOINT);
    let metrics_path = out.path(METRICS);
    let mut save = |s: &LoopState| -> Result<()> {
        atomic_write(&checkpoint_path, checkpoint_to_file(s)?.to_text().as_bytes())?;
        atomic_write(&metrics_path, metrics_csv(&s.records).as_bytes())?;
        let r = s.records.last().expect("a record per finished iteration");
        println!(
            "iter {:>3}  steps {:>7}  channel_loss {:.3e}  mean_emp {:.4}  eval_msd {:.4}",
            r.iter, r.steps, r.channel_loss, r.mean_emp, r.eval_msd
        );
        Ok(())
    };
    let state = match latent_gce_loop(env, &cfg.policy, &cfg.channel, &cfg.capacity, seed, start, &mut save) {
        Ok(s) => s,
        Err(e) => {
            let at = e.iteration().map_or("none".to_string(), |i| i.to_string());
            out.write("FAILED", format!("iteration {at}\n{e}\n"))?;
            return Err(e.into());
        }
    };

    out.write(CHECKPOINT, checkpoint_to_file(&state)?.to_text())?;
    out.write(METRICS, metrics_csv(&state.records))?;
    out.write("policy.params", persist::learner_to_file(&state.learner)?.to_text())?;
    if let Some(m) = &state.channel {
        out.write("channel.params", persist::channel_to_file(m)?.to_text())?;
    }
    if let Some(latest) = state.replay.last() {
        out.write("dataset.csv", empower_core::channel::write_dataset_csv(latest))?;
    }
    let final_eval = evaluate_policy(env, &state.learner.policy, &cfg.policy.eval, derive_seed(seed, &[stream::EVAL]))?;
    out.write(
        "eval.json",
        to_pretty(&json!({ "initial": state.initial_eval, "final": final_eval })),
    )?;
    println!(
        "eval mean squared deviation: initial {:.4}, final {:.4}",
        state.initial_eval.mean_sq_dev, final_eval.mean_sq_dev
    );
    Ok(state)
}

pub fn train(a: &TrainArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let mut out = OutDir::create(out_root(&a.common, &cfg))?;
    let state = run_training(&cfg, &mut out, a.resume)?;
    out.write_manifest("train", cfg.seed, json!({ "iterations": state.next_iter, "steps": state.steps }))
}

pub fn safety(a: &SafetyArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if !matches!(cfg.environment, Environment::Tunnel(_)) {
        return Err(CliError::Config("safety runs need the tunnel environment".into()));
    }
    if !(a.beta >= 0.0 && a.beta.is_finite()) {
        return Err(CliError::Config(format!("--beta must be a finite value ≥ 0, got {}", a.beta)));
    }
    if a.episodes == 0 {
        return Err(CliError::Config("--episodes must be ≥ 1".into()));
    }
    cfg.policy.reward = RewardKind::Safety { beta: a.beta };
    cfg.validate()?;
    let mut out = OutDir::create(out_root(&a.common, &cfg))?;
    let state = run_training(&cfg, &mut out, a.resume)?;

    let eval_cfg = EvalConfig {
        episodes: a.episodes,
        ..cfg.policy.eval.clone()
    };
    let report = evaluate_policy(&cfg.environment, &state.learner.policy, &eval_cfg, derive_seed(cfg.seed, &[stream::EVAL, 1]))?;
    write_routes(&mut out, a.beta, &report)?;
    out.write("eval_trajectories.csv", trajectories_csv(&report.trajectories))?;
    out.write_manifest("safety", cfg.seed, json!({ "beta": a.beta, "episodes": a.episodes }))?;
    println!(
        "beta {}: middle tunnel {:.3}, right tunnel {:.3}, goal rate {:.3} over {} episodes",
        a.beta, report.middle_fraction, report.right_fraction, report.goal_rate, a.episodes
    );
    Ok(())
}

fn write_routes(out: &mut OutDir, beta: f64, r: &EvalReport) -> CliResult {
    let neither = 1.0 - r.middle_fraction - r.right_fraction;
    out.write(
        "routes.csv",
        format!(
            "beta,middle_fraction,right_fraction,neither_fraction,goal_rate\n{}\n",
            csv_row(&[beta, r.middle_fraction, r.right_fraction, neither, r.goal_rate])
        ),
    )
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.episodes {
        if n == 0 {
            return Err(CliError::Config("--episodes must be ≥ 1".into()));
        }
        cfg.policy.eval.episodes = n;
    }
    let root = out_root(&a.common, &cfg);
    let path = a.policy.clone().unwrap_or_else(|| root.join("policy.params"));
    let learner = persist::load_learner(&path)?;
    let env = &cfg.environment;
    let obs_dim = env.observe(&vec![0.0; env.state_dim()]).len();
    if learner.policy.mean.input_dim() != obs_dim || learner.policy.action_dim() != env.action_dim() {
        return Err(CliError::Artifact(format!(
            "policy {} does not fit environment {}",
            path.display(),
            env.name()
        )));
    }
    let report = evaluate_policy(env, &learner.policy, &cfg.policy.eval, derive_seed(cfg.seed, &[stream::EVAL, 2]))?;
    let mut out = OutDir::create(root)?;
    out.write("eval.json", to_pretty(&report))?;
    out.write("eval_trajectories.csv", trajectories_csv(&report.trajectories))?;
    if matches!(env, Environment::Tunnel(_)) {
        out.write(
            "routes.csv",
            format!(
                "middle_fraction,right_fraction,goal_rate\n{}\n",
                csv_row(&[report.middle_fraction, report.right_fraction, report.goal_rate])
            ),
        )?;
    }
    out.write_manifest("eval", cfg.seed, json!({ "policy": path, "episodes": cfg.policy.eval.episodes }))?;
    println!(
        "{} episodes: mean squared deviation {:.4}, final distance {:.4}, goal rate {:.3}",
        cfg.policy.eval.episodes, report.mean_sq_dev, report.final_distance, report.goal_rate
    );
    Ok(())
}

pub fn oracle_check(a: &OracleArgs) -> CliResult {
    let report = run_suite(a.suite.into(), a.seed).map_err(CliError::Run)?;
    let name = report.suite.name();
    println!(
        "{name}: {} instances, worst deviation {:.3e} (instance {}), tolerance {:e}: {}",
        report.instances,
        report.worst,
        report.worst_instance,
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = &a.out {
        let mut out = OutDir::create(dir.clone())?;
        out.write(&format!("oracle-{name}.json"), to_pretty(&report))?;
        out.write_manifest("oracle-check", a.seed, json!({ "suite": name }))?;
    }
    if report.passed() {
        Ok(())
    } else {
        for f in &report.failures {
            println!("{}", serde_json::to_string(f).expect("json values serialize"));
        }
        Err(CliError::Oracle(format!(
            "{name}: {} of {} instances outside tolerance",
            report.failures.len(),
            report.instances
        )))
    }
}
