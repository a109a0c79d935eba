//! Property tests of the advantage, metric and rectifier invariants.

use gftlab::autodiff::Tape;
use gftlab::metrics::{fraction_below, kl_divergence, pass_at_k};
use gftlab::objectives::{batch_loss, group_advantages, random_instance, rectify_value, AdvantageConfig};
use gftlab::objectives::{DcrSemantics, ObjectiveConfig, ObjectiveKind};
use gftlab::persistence::{checkpoint_bytes, checkpoint_hash};
use gftlab::policy::{entropy, Policy, Vocab};
use proptest::prelude::*;

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

fn choose(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

proptest! {
    #[test]
    fn advantages_sum_to_zero(r in prop::collection::vec(-10.0f64..10.0, 2..32)) {
        let a = group_advantages(&r, &AdvantageConfig::default());
        let sum: f64 = a.iter().sum();
        prop_assert!(sum.abs() <= 1e-12 * r.len() as f64, "sum {}", sum);
    }

    #[test]
    fn advantages_ignore_shifts(r in prop::collection::vec(0.0f64..1.0, 2..16), c in -100.0f64..100.0) {
        let cfg = AdvantageConfig::default();
        let a = group_advantages(&r, &cfg);
        let b = group_advantages(&r.iter().map(|x| x + c).collect::<Vec<_>>(), &cfg);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn advantages_keep_ranking_under_scaling(r in prop::collection::vec(0.0f64..1.0, 2..16), s in 1e-3f64..1e3) {
        let cfg = AdvantageConfig::default();
        let a = group_advantages(&r, &cfg);
        let b = group_advantages(&r.iter().map(|x| x * s).collect::<Vec<_>>(), &cfg);
        for i in 0..r.len() {
            for j in 0..r.len() {
                prop_assert_eq!(r[i].partial_cmp(&r[j]), b[i].partial_cmp(&b[j]));
                prop_assert_eq!(a[i].partial_cmp(&a[j]), b[i].partial_cmp(&b[j]));
            }
        }
    }

    #[test]
    fn pass_at_k_matches_closed_form_and_is_monotone(n in 1usize..40, c_frac in 0.0f64..=1.0) {
        let c = (c_frac * n as f64).round() as usize;
        let mut prev = 0.0;
        for k in 1..=n {
            let v = pass_at_k(n, c, k).unwrap();
            let oracle = 1.0 - choose((n - c) as u64, k as u64) / choose(n as u64, k as u64);
            prop_assert!((v - oracle).abs() <= 1e-9, "n={} c={} k={}: {} vs {}", n, c, k, v, oracle);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_identity(
        x in prop::collection::vec(-5.0f64..5.0, 2..8),
        noise in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let p = log_softmax(&x);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let q = log_softmax(&y);
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() <= 1e-12);
    }

    #[test]
    fn entropy_lies_between_zero_and_log_v(x in prop::collection::vec(-20.0f64..20.0, 1..12)) {
        let h = entropy(&log_softmax(&x));
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (x.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn rectified_fraction_is_monotone_in_tau(
        probs in prop::collection::vec(1e-6f64..=1.0, 1..64),
        mut taus in prop::collection::vec(1e-3f64..=1.0, 1..10),
    ) {
        taus.sort_by(f64::total_cmp);
        let f = fraction_below(&probs, &taus).unwrap();
        prop_assert!(f.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rectifier_value_is_bounded(pi in 1e-9f64..=1.0, tau in 1e-3f64..=1.0) {
        let c = rectify_value(pi, tau);
        prop_assert!(c > 0.0 && c <= 1.0);
        prop_assert!(c / pi >= 1.0 - 1e-12);
        if pi >= tau {
            prop_assert!(c / pi <= 1.0 / tau + 1e-12);
        }
    }

    #[test]
    fn dcr_coefficients_respect_their_bounds(seed in 0u64..10_000, tau in 0.05f64..1.0) {
        let (policy, groups) = random_instance(ObjectiveKind::Gft, seed).unwrap();
        let mut cfg = ObjectiveConfig::new(ObjectiveKind::Gft).with_tau(tau);
        let mut tape = Tape::new();
        let bl = batch_loss(&mut tape, &policy, &groups, &cfg).unwrap();
        let scale = 1.0 / groups.len() as f64;
        for (c, w) in bl.coefficients.iter().zip(&bl.response_weights) {
            prop_assert!(c.abs() <= w.abs() * scale * (1.0 + 1e-12));
        }
        cfg.rectifier.semantics = DcrSemantics::GradForm;
        let mut tape = Tape::new();
        let bl = batch_loss(&mut tape, &policy, &groups, &cfg).unwrap();
        for (c, w) in bl.coefficients.iter().zip(&bl.response_weights) {
            if w.abs() > 1e-9 {
                let ratio = c / (w * scale);
                prop_assert!(ratio >= 1.0 - 1e-12 && ratio <= 1.0 / tau + 1e-12, "ratio {}", ratio);
            }
        }
    }

    #[test]
    fn checkpoint_hash_is_a_function_of_the_bytes(seed in 0u64..1000) {
        let vocab = Vocab::new(&["a", "b"]).unwrap();
        let p = Policy::tabular_random(vocab.clone(), 2, 1.0, seed).unwrap();
        let q = Policy::tabular_random(vocab, 2, 1.0, seed).unwrap();
        prop_assert_eq!(checkpoint_bytes(&p).unwrap(), checkpoint_bytes(&q).unwrap());
        prop_assert_eq!(checkpoint_hash(&p).unwrap(), checkpoint_hash(&q).unwrap());
    }
}
