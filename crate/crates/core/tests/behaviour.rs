use empower_core::capacity::CapacitySettings;
use empower_core::channel::ChannelConfig;
use empower_core::envs::{Actor, BallInBox, Dynamics, Environment, Pendulum, UniformActor};
use empower_core::policy::{
    evaluate_stabilization, latent_gce_loop, policy_update, EvalConfig, GceLoopConfig, Learner, PpoConfig, Sample,
};
use empower_core::rng::rng_from;

/// Mean θ² of the uniform random policy over 10 downward-start episodes,
/// seed 0. Frozen from a reference run.
const RANDOM_PENDULUM_MSD: f64 = 8.322_546_804_536_588;

#[test]
fn ppo_bandit_converges_to_the_optimum() {
    // One state, reward −a²: the best mean action is 0.
    let env = Environment::Pendulum(Pendulum::default());
    let cfg = PpoConfig {
        hidden: vec![8],
        learning_rate: 1e-2,
        epochs: 4,
        minibatch: 64,
        target_kl: None,
        ..PpoConfig::default()
    };
    let mut learner = Learner::new(&env, &cfg, 3).unwrap();
    let off = learner.policy.mean.output_bias_offset();
    learner.policy.mean.params_mut()[off] = 1.0;
    let obs = env.observe(&[0.3, -0.2]);
    let state = [0.3, -0.2];
    let mut rng = rng_from(3, &[]);
    for k in 0..500 {
        let batch: Vec<Sample> = (0..64)
            .map(|_| {
                let a = learner.policy.act(&env, &state, &mut rng);
                let r = -a.action[0] * a.action[0];
                Sample {
                    obs: obs.clone(),
                    raw: a.raw,
                    log_prob: a.log_prob,
                    advantage: r - learner.value_of(&obs),
                    ret: r,
                }
            })
            .collect();
        policy_update(&mut learner, &batch, &cfg, k).unwrap();
    }
    let mu = learner.policy.mean.forward(&obs);
    let mean_action = learner.policy.squash(&mu)[0];
    assert!(mean_action.abs() < 0.05, "mean action {mean_action}");
}

#[test]
fn random_pendulum_policy_regression() {
    let env = Environment::Pendulum(Pendulum::default());
    let cfg = EvalConfig::default();
    let r = evaluate_stabilization(&env, &UniformActor, &cfg, 0).unwrap();
    assert!(r.mean_sq_dev > 1.0);
    assert_eq!(r.mean_sq_dev, RANDOM_PENDULUM_MSD, "{:?}", r.mean_sq_dev);
    assert_eq!(r, evaluate_stabilization(&env, &UniformActor, &cfg, 0).unwrap());
}

fn small_ball_loop() -> GceLoopConfig {
    let mut cfg = GceLoopConfig {
        iterations: 2,
        episodes: 3,
        ..GceLoopConfig::default()
    };
    cfg.eval.episodes = 3;
    cfg
}

#[test]
fn full_loop_is_deterministic_per_seed() {
    let env = Environment::BallInBox(BallInBox::default());
    let ch = ChannelConfig {
        horizon: 3,
        epochs: 3,
        ..ChannelConfig::default()
    };
    let run = |seed| {
        latent_gce_loop(&env, &small_ball_loop(), &ch, &CapacitySettings::default(), seed, None, &mut |_| Ok(())).unwrap()
    };
    let (a, b, c) = (run(9), run(9), run(10));
    assert_eq!(a.records, b.records);
    assert_eq!(a.learner, b.learner);
    assert_eq!(a.channel, b.channel);
    assert_ne!(a.records, c.records);
}

#[test]
fn loop_errors_carry_the_iteration() {
    let env = Environment::BallInBox(BallInBox::default());
    let ch = ChannelConfig {
        horizon: 3,
        epochs: 1,
        ..ChannelConfig::default()
    };
    let err = latent_gce_loop(&env, &small_ball_loop(), &ch, &CapacitySettings::default(), 1, None, &mut |s| {
        if s.next_iter == 2 {
            Err(empower_core::Error::InvalidInput("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert_eq!(err.iteration(), Some(1), "{err}");
    assert!(err.to_string().contains("stop"));
}

#[test]
fn learned_pendulum_run_fits_the_channel_before_the_policy_improves() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pendulum-learned.json");
    let cfg = empower_core::config::RunConfig::load(&path).unwrap();
    let out = latent_gce_loop(&cfg.environment, &cfg.policy, &cfg.channel, &cfg.capacity, cfg.seed, None, &mut |_| Ok(()))
        .unwrap();
    let first = |pred: &dyn Fn(&empower_core::policy::IterationRecord) -> bool| out.records.iter().position(pred);
    let loss0 = out.records[0].channel_loss;
    let msd0 = out.initial_eval.mean_sq_dev;
    let channel_phase = first(&|r| r.channel_loss < 0.2 * loss0).expect("channel loss never fell to 20%");
    let policy_phase = first(&|r| r.eval_msd < 0.5 * msd0).expect("eval mean θ² never halved");
    assert!(channel_phase < policy_phase, "channel {channel_phase}, policy {policy_phase}");
}
