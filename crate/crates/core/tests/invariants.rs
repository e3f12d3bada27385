mod common;

use prio_core::cap::{cap_schedule, staging_coefficient, whitened_distance, CapConfig};
use prio_core::rng;
use prio_core::routing::{class_gated_weights, mixture_prior, route, Query, RoutingParams};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn routed_weights_form_a_gated_simplex(seed in any::<u64>(), qd in 1usize..6, fd in 1usize..6) {
        let mut r = rng::stream(seed, &[]);
        let bank = common::random_bank(&mut r, 4, 10, fd);
        let p = common::random_gate(&mut r, bank.num_classes());
        let q: Vec<f64> = (0..qd).map(|_| r.gen_range(-3.0..3.0)).collect();
        let params = RoutingParams::init(qd, fd, 64, seed);
        let out = route(&Query { q, p: p.clone() }, &params, &bank).unwrap();
        prop_assert!((out.a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(out.a.iter().all(|&w| w >= 0.0));
        for (c, s) in bank.slices().iter().enumerate() {
            let mass: f64 = out.a[s.clone()].iter().sum();
            let share = p[c] / p.iter().sum::<f64>();
            prop_assert!((mass - share).abs() < 1e-9, "class {} mass {} vs gate {}", c, mass, share);
        }
        prop_assert!(out.sigma_hat.iter().all(|s| *s > 0.0 && s.is_finite()));
    }

    #[test]
    fn mixture_of_one_prototype_is_that_prototype(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let bank = common::random_bank(&mut r, 2, 6, 2);
        let k = r.gen_range(0..bank.len());
        let mut a = vec![0.0; bank.len()];
        a[k] = 1.0;
        let m = mixture_prior(&a, &bank).unwrap();
        let proto = &bank.prototypes()[k];
        for j in 0..3 {
            prop_assert_eq!(m.mu_hat[j], proto.mu_lin[j]);
            prop_assert!((m.sigma_hat[j] - proto.sigma_lin[j].max(1e-6)).abs() < 1e-9);
        }
    }

    #[test]
    fn gated_weights_ignore_gate_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng::stream(seed, &[]);
        let bank = common::random_bank(&mut r, 3, 8, 2);
        let p = common::random_gate(&mut r, bank.num_classes());
        let logits: Vec<f64> = (0..bank.len()).map(|_| r.gen_range(-4.0..4.0)).collect();
        let a = class_gated_weights(&logits, &p, bank.slices()).unwrap();
        let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
        let b = class_gated_weights(&logits, &scaled, bank.slices()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn whitened_distance_is_nonnegative_and_zero_at_mean(seed in any::<u64>(), dx in prop::array::uniform3(-2.0f64..2.0)) {
        let mut r = rng::stream(seed, &[]);
        let proto = common::random_prototype(&mut r, 0, 2);
        let x = [0, 1, 2].map(|j| proto.mu_log[j] + dx[j]);
        prop_assert!(whitened_distance(x, &proto) >= 0.0);
        prop_assert_eq!(whitened_distance(proto.mu_log, &proto), 0.0);
        prop_assert!(proto.eta.iter().all(|&e| e >= 1e-4));
    }

    #[test]
    fn schedules_stay_in_range(e in 0.0f64..1000.0) {
        let cfg = CapConfig::default();
        let rho = cap_schedule(e, &cfg.schedule);
        prop_assert!(rho >= cfg.schedule.rho_end && rho <= 1.0);
        let k = staging_coefficient(e, &cfg.staging);
        prop_assert!((0.0..=1.0).contains(&k));
        prop_assert!(cap_schedule(e + 1.0, &cfg.schedule) <= rho);
        prop_assert!(staging_coefficient(e + 1.0, &cfg.staging) >= k);
    }
}
