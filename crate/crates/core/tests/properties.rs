use empower_core::analytic::{analytic_g_pendulum, AnalyticPendulumConfig, GVariant};
use empower_core::capacity::{capacity_of, empowerment_of_matrix, singular_values, water_fill_with, GainMode, SingularSpectrum};
use empower_core::envs::{BallInBox, Environment, Pendulum, Tunnel};
use empower_core::persist::ParamFile;
use empower_core::policy::{discounted_sum, intrinsic_return};
#[cfg(feature = "parallel")]
use empower_core::par;
use empower_core::stats;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn sigmas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..5.0], 1..=6)
}

fn mode() -> impl Strategy<Value = GainMode> {
    prop_oneof![Just(GainMode::Sigma), Just(GainMode::SigmaSquared)]
}

proptest! {
    #[test]
    fn water_fill_beats_random_allocations(s in sigmas(), power in 0.01f64..10.0, m in mode(),
                                           weights in prop::collection::vec(0.0f64..1.0, 6)) {
        let spectrum = SingularSpectrum::new(s.clone()).unwrap();
        let r = water_fill_with(&spectrum, power, m).unwrap();
        prop_assert!(r.kkt_violation(power) < 1e-9);
        prop_assert!((r.capacity - r.recompute_capacity()).abs() < 1e-12);
        // Any other split of the budget does no better.
        let w: Vec<f64> = weights[..s.len()].to_vec();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            let other: Vec<f64> = w.iter().map(|x| power * x / total).collect();
            prop_assert!(capacity_of(spectrum.values(), &other, m) <= r.capacity + 1e-12);
        }
    }

    #[test]
    fn capacity_grows_with_power_and_ignores_order(s in sigmas(), p in 0.01f64..5.0, extra in 0.0f64..5.0) {
        let a = water_fill_with(&SingularSpectrum::new(s.clone()).unwrap(), p, GainMode::Sigma).unwrap().capacity;
        let b = water_fill_with(&SingularSpectrum::new(s.clone()).unwrap(), p + extra, GainMode::Sigma).unwrap().capacity;
        prop_assert!(b >= a - 1e-12);
        let mut rev = s.clone();
        rev.reverse();
        let c = water_fill_with(&SingularSpectrum::new(rev).unwrap(), p, GainMode::Sigma).unwrap().capacity;
        prop_assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues(rows in 1usize..5, cols in 1usize..7,
                                              data in prop::collection::vec(-3.0f64..3.0, 35)) {
        let m = DMatrix::from_column_slice(rows, cols, &data[..rows * cols]);
        let sv = singular_values(&m).unwrap();
        prop_assert!(sv.values().windows(2).all(|w| w[0] >= w[1]));
        let mut eig: Vec<f64> = (&m * m.transpose()).symmetric_eigenvalues().iter().map(|e| e.max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in sv.values().iter().zip(&eig) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn intrinsic_return_is_the_discounted_sum_of_its_rewards(
        states in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..40),
        gamma in 0.0f64..=1.0,
    ) {
        let cfg = AnalyticPendulumConfig::default();
        let e = |s: &[f64]| empowerment_of_matrix(&analytic_g_pendulum(s, &cfg, GVariant::DerivationConsistent), 1.0);
        let (ret, rewards) = intrinsic_return(&states, e, gamma).unwrap();
        let explicit: f64 = rewards.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum();
        prop_assert!((ret - explicit).abs() < 1e-12);
        prop_assert_eq!(ret, discounted_sum(&rewards, gamma));
    }

    #[test]
    fn positive_scaling_keeps_the_preferred_state(
        states in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..30),
        c in 1e-3f64..1e3,
    ) {
        let cfg = AnalyticPendulumConfig::default();
        let e: Vec<f64> = states
            .iter()
            .map(|s| empowerment_of_matrix(&analytic_g_pendulum(s, &cfg, GVariant::DerivationConsistent), 1.0).unwrap())
            .collect();
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        let scaled: Vec<f64> = e.iter().map(|x| c * x).collect();
        prop_assert_eq!(argmax(&e), argmax(&scaled));
    }

    #[test]
    fn standardize_gives_zero_mean_unit_spread(xs in prop::collection::vec(-100.0f64..100.0, 2..50)) {
        prop_assume!(stats::std_dev(&xs) > 1e-6);
        let z = stats::standardize(&xs);
        prop_assert!(stats::mean(&z).abs() < 1e-9);
        prop_assert!((stats::std_dev(&z) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn param_files_round_trip_bit_exactly(data in prop::collection::vec(any::<f64>(), 0..40), cols in 1usize..5) {
        let rows = data.len() / cols;
        let body = data[..rows * cols].to_vec();
        let mut f = ParamFile::new("test");
        f.push("x", rows, cols, body.clone());
        let back = ParamFile::parse(&f.to_text()).unwrap();
        let got = &back.tensor("x").unwrap().data;
        prop_assert_eq!(got.len(), body.len());
        for (a, b) in got.iter().zip(&body) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tunnel_disc_never_overlaps_walls(x in 1.0f64..19.0, y in 1.0f64..19.0,
                                         actions in prop::collection::vec(-2.0f64..2.0, 2..40)) {
        let t = Tunnel::default();
        prop_assume!(t.clearance([x, y]) >= t.radius);
        let env = Environment::Tunnel(t.clone());
        let mut s = vec![x, y];
        for a in actions.chunks_exact(2) {
            s = env.step(&s, a).unwrap().next_state;
            prop_assert!(t.clearance([s[0], s[1]]) >= t.radius - 1e-9, "{:?}", s);
        }
    }

    #[test]
    fn ball_stays_in_its_box(x in 0.0f64..10.0, y in 0.0f64..10.0, actions in prop::collection::vec(-3.0f64..3.0, 2..40)) {
        let b = BallInBox::default();
        let env = Environment::BallInBox(b.clone());
        let mut s = vec![x.min(b.size), y.min(b.size)];
        for a in actions.chunks_exact(2) {
            let next = env.step(&s, a).unwrap().next_state;
            prop_assert!(next.iter().all(|v| (0.0..=b.size).contains(v)));
            prop_assert!(next.iter().zip(&s).all(|(n, o)| (n - o).abs() <= 0.5 + 1e-12));
            s = next;
        }
    }

    #[test]
    fn pendulum_angle_stays_wrapped(th in -10.0f64..10.0, om in -8.0f64..8.0, a in -5.0f64..5.0) {
        let env = Environment::Pendulum(Pendulum::default());
        let s = env.step(&[th, om], &[a]).unwrap().next_state;
        prop_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&s[0]));
    }
}

#[cfg(feature = "parallel")]
proptest! {
    #[test]
    fn chunked_sum_does_not_depend_on_threads(xs in prop::collection::vec(-1e6f64..1e6, 0..300)) {
        let parallel = par::chunked_sum(xs.len(), 1, |i, acc| acc[0] += xs[i]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| par::chunked_sum(xs.len(), 1, |i, acc| acc[0] += xs[i]));
        prop_assert_eq!(parallel[0].to_bits(), single[0].to_bits());
    }
}
