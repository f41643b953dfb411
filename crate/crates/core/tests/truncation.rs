use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trunclab_core::truncation::{
    apply_mask, sentence_level_mask, truncation_mask, update_threshold_estimate, LossWindow,
    TruncationConfig, TruncationMode, Truncator,
};

/// Sort-based nearest-rank percentile.
fn sorted_percentile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let r = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[r - 1]
}

#[test]
fn threshold_matches_sort_oracle_over_random_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ps = [0.0, 1.0, 20.0, 50.0, 99.0, 100.0];
    for trial in 0..1000 {
        let n = if trial % 10 == 0 {
            rng.random_range(1..=10_000)
        } else {
            rng.random_range(1..=300)
        };
        // a coarse grid forces plenty of ties
        let coarse = rng.random_bool(0.3);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 10.0;
                if coarse { x.floor() } else { x }
            })
            .collect();
        let p = ps[trial % ps.len()];
        let mut w = LossWindow::new(10_000);
        let valid = vec![true; n];
        let q = update_threshold_estimate(&mut w, &values, &valid, p).unwrap();
        assert_eq!(q.to_bits(), sorted_percentile(&values, p).to_bits(), "n {n} p {p}");
        assert!(values.contains(&q));
    }
}

#[test]
fn window_holds_only_the_most_recent_valid_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = LossWindow::new(50);
    let mut history = Vec::new();
    for _ in 0..40 {
        let losses: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        let valid: Vec<bool> = (0..7).map(|_| rng.random_bool(0.7)).collect();
        if !valid.iter().any(|&v| v) && history.is_empty() {
            continue;
        }
        let q = update_threshold_estimate(&mut w, &losses, &valid, 20.0).unwrap();
        history.extend(losses.iter().zip(&valid).filter(|(_, &v)| v).map(|(&l, _)| l));
        let tail = &history[history.len().saturating_sub(50)..];
        assert_eq!(w.values().collect::<Vec<_>>(), tail);
        assert_eq!(w.seen(), history.len() as u64);
        assert_eq!(q, sorted_percentile(tail, 20.0));
    }
}

#[test]
fn masked_fraction_tracks_percentile_on_a_full_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    for p in [20.0, 50.0, 80.0] {
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let valid = vec![true; n];
        let mut w = LossWindow::new(n);
        let q = update_threshold_estimate(&mut w, &values, &valid, p).unwrap();
        let below = values.iter().filter(|&&v| v < q).count() as f64 / n as f64 * 100.0;
        assert!((below - p).abs() <= 2.0 / n as f64 * 100.0, "p {p}: {below}");

        let abs = truncation_mask(&values, &valid, q, TruncationMode::Abstractiveness, 2, 1).unwrap();
        let masked = 100.0 - abs.iter().sum::<f64>() / n as f64 * 100.0;
        assert!((masked - p).abs() <= 2.0 / n as f64 * 100.0, "p {p}: masked {masked}");

        let fac = truncation_mask(&values, &valid, q, TruncationMode::Factuality, 2, 1).unwrap();
        let masked = 100.0 - fac.iter().sum::<f64>() / n as f64 * 100.0;
        assert!((masked - (100.0 - p)).abs() <= 2.0 / n as f64 * 100.0, "p {p}: masked {masked}");
    }
}

#[test]
fn truncator_telemetry_is_zero_before_warmup_and_near_p_after() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Truncator::new(TruncationConfig {
        mode: TruncationMode::Abstractiveness,
        percentile: 20.0,
        warmup_steps: 30,
        window: 2000,
    })
    .unwrap();
    let width = 12;
    let mut late = Vec::new();
    for step in 1..=200u64 {
        let losses: Vec<f64> = (0..16 * width).map(|_| rng.random::<f64>() * 4.0).collect();
        let valid: Vec<bool> = (0..16 * width).map(|i| i % width < 10).collect();
        let s = t.step(step, &losses, &valid, width).unwrap();
        assert!(s.mask.iter().zip(&valid).all(|(&m, &v)| v || m == 0.0));
        if step <= 30 {
            assert_eq!(s.fraction_masked, 0.0);
        } else if step > 50 {
            late.push(s.fraction_masked);
        }
    }
    let mean = late.iter().sum::<f64>() / late.len() as f64;
    assert!((mean - 0.2).abs() < 0.02, "mean masked fraction {mean}");
}

#[test]
fn sentence_level_threshold_uses_example_scores() {
    let mut w = LossWindow::new(100);
    let ex: [&[f64]; 4] = [&[0.0, 2.0], &[2.0], &[3.0, 3.0, 3.0], &[8.0, 0.0]];
    let (m, q) = sentence_level_mask(&ex, 50.0, &mut w).unwrap();
    assert_eq!(q, 2.0);
    assert_eq!(m, vec![1.0, 1.0, 0.0, 0.0]);
    assert!(sentence_level_mask(&[&[]], 50.0, &mut w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn threshold_is_a_window_member(values in prop::collection::vec(0.0f64..20.0, 1..200), p in 0.0f64..=100.0) {
        let mut w = LossWindow::new(64);
        let valid = vec![true; values.len()];
        let q = update_threshold_estimate(&mut w, &values, &valid, p).unwrap();
        prop_assert!(w.values().any(|v| v == q));
    }

    #[test]
    fn warmup_and_off_keep_every_valid_token(
        losses in prop::collection::vec(0.0f64..20.0, 0..50),
        q in 0.0f64..20.0,
        k in 0u64..100,
        t in 0u64..100,
        mode in prop_oneof![Just(TruncationMode::Off), Just(TruncationMode::Abstractiveness), Just(TruncationMode::Factuality)],
    ) {
        let valid: Vec<bool> = (0..losses.len()).map(|i| i % 5 != 4).collect();
        let m = truncation_mask(&losses, &valid, q, mode, t, k).unwrap();
        for (j, (&mj, &v)) in m.iter().zip(&valid).enumerate() {
            if !v {
                prop_assert_eq!(mj, 0.0);
            } else if t <= k || mode == TruncationMode::Off {
                prop_assert_eq!(mj, 1.0);
            } else if mode == TruncationMode::Abstractiveness {
                prop_assert_eq!(mj == 1.0, losses[j] > q);
            } else {
                prop_assert_eq!(mj == 1.0, losses[j] < q);
            }
        }
        let masked = apply_mask(&losses, &m).unwrap();
        prop_assert!(masked.iter().sum::<f64>() <= losses.iter().sum::<f64>());
    }
}
