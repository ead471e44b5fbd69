use proptest::prelude::*;
use udac::actor::{compose_action, DistortionSpec};
use udac::checkpoint;
use udac::critic::quantile_huber;
use udac::dataset::{OfflineDataset, Transition};
use udac::env::{mixture_counts, reset, step, RiskyPointMassConfig};
use udac::eval::{cvar_empirical, mean};
use udac::Tensor;

fn returns() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1000.0..1000.0f64, 1..200)
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, r * c)
            .prop_map(move |data| Tensor::matrix(r, c, data))
    })
}

fn transition() -> impl Strategy<Value = Transition> {
    (
        prop::array::uniform2(-5.0..5.0f64),
        prop::array::uniform2(-0.1..0.1f64),
        -50.0..0.0f64,
        any::<bool>(),
        0..2u32,
    )
        .prop_map(|(s, a, r, done, label)| Transition {
            state: s.to_vec(),
            action: a.to_vec(),
            reward: r,
            next_state: vec![s[0] + a[0], s[1] + a[1]],
            done,
            quality_label: label,
        })
}

proptest! {
    #[test]
    fn cvar_never_exceeds_mean(xs in returns(), alpha in 0.01..1.0f64) {
        prop_assert!(cvar_empirical(&xs, alpha).unwrap() <= mean(&xs) + 1e-9);
    }

    #[test]
    fn cvar_ignores_order(mut xs in returns(), alpha in 0.01..1.0f64, shift in 0usize..200) {
        let before = cvar_empirical(&xs, alpha).unwrap();
        let k = shift % xs.len();
        xs.rotate_left(k);
        xs.reverse();
        prop_assert_eq!(before, cvar_empirical(&xs, alpha).unwrap());
    }

    #[test]
    fn cvar_grows_with_alpha(xs in returns(), a in 0.01..1.0f64, b in 0.01..1.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(cvar_empirical(&xs, lo).unwrap() <= cvar_empirical(&xs, hi).unwrap() + 1e-9);
    }

    #[test]
    fn huber_is_nonnegative(delta in -100.0..100.0f64, tau in 0.001..0.999f64, kappa in 0.001..10.0f64) {
        prop_assert!(quantile_huber(delta, tau, kappa).unwrap() >= 0.0);
    }

    #[test]
    fn distortions_stay_inside_unit_interval(u in 0.001..0.999f64, eta in -2.0..2.0f64, p in 0.2..3.0f64) {
        for spec in [DistortionSpec::Wang(eta), DistortionSpec::Cpw(p), DistortionSpec::CVaR(0.1)] {
            let t = spec.distort(u).unwrap();
            prop_assert!(t > 0.0 && t < 1.0, "{} at {}: {}", spec, u, t);
        }
    }

    #[test]
    fn composed_actions_are_clipped(
        lambda in 0.0..1.0f64,
        xi in prop::array::uniform2(-1.0..1.0f64),
        beta in prop::array::uniform2(-1.0..1.0f64),
    ) {
        for a in compose_action(lambda, &xi, &beta) {
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn positions_stay_in_arena(seed in any::<u64>(), actions in prop::collection::vec(prop::array::uniform2(-10.0..10.0f64), 1..60)) {
        let cfg = RiskyPointMassConfig::default();
        let mut state = reset(&cfg, seed);
        for a in actions {
            let r = step(&cfg, state, a).unwrap();
            prop_assert!(r.next_state.position.iter().all(|p| p.abs() <= cfg.arena_half_width));
            if r.done {
                break;
            }
            state = r.next_state;
        }
    }

    #[test]
    fn mixture_counts_sum_to_total(w in prop::collection::vec(0.01..1.0f64, 1..5), episodes in 0usize..500) {
        let total: f64 = w.iter().sum();
        let ratios: Vec<f64> = w.iter().map(|x| x / total).collect();
        let counts = mixture_counts(&ratios, episodes).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), episodes);
        for (c, r) in counts.iter().zip(&ratios) {
            prop_assert!((*c as f64 - r * episodes as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn checkpoint_round_trip(tensors in prop::collection::vec(matrix(), 1..6)) {
        let records: Vec<(String, Tensor)> = tensors
            .into_iter()
            .enumerate()
            .map(|(k, t)| (format!("group{k}.weight"), t))
            .collect();
        let back = checkpoint::decode(&checkpoint::encode(&records)).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for ((n0, t0), (n1, t1)) in records.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            prop_assert!(t0.data().iter().zip(t1.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn dataset_round_trip(ts in prop::collection::vec(transition(), 1..40)) {
        let ds = OfflineDataset::new(ts, vec![-0.1; 2], vec![0.1; 2], vec![("direct".into(), 1)]).unwrap();
        let bytes = ds.encode();
        prop_assert_eq!(bytes.len(), ds.header_size() + ds.len() * ds.record_size() + 4);
        prop_assert_eq!(OfflineDataset::decode(&bytes).unwrap(), ds);
    }
}
