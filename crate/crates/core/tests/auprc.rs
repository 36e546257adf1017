//! Area under the precision-recall curve against a brute-force oracle.

use latentwatch::evaluation::{auprc, pr_curve, TiePolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean over positives of the precision at that positive's cut.
fn brute_force(scored: &[(f64, bool)], ties: TiePolicy) -> f64 {
    let positives = scored.iter().filter(|s| s.1).count() as f64;
    let mut total = 0.0;
    for (i, &(s, label)) in scored.iter().enumerate() {
        if !label {
            continue;
        }
        let (mut tp, mut n) = (0.0, 0.0);
        for (j, &(t, other)) in scored.iter().enumerate() {
            let above = match ties {
                TiePolicy::Grouped => t >= s,
                // tied negatives first, tied positives in input order
                TiePolicy::Pessimistic => t > s || (t == s && (!other || j <= i)),
            };
            if above {
                n += 1.0;
                if other {
                    tp += 1.0;
                }
            }
        }
        total += tp / n;
    }
    total / positives
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    loop {
        let n = rng.random_range(2..60);
        // coarse scores so ties are common
        let levels = rng.random_range(2..20);
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.4)))
            .collect();
        if scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1) {
            return scored;
        }
    }
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let scored = random_instance(&mut rng);
        for ties in [TiePolicy::Grouped, TiePolicy::Pessimistic] {
            let got = auprc(&pr_curve(&scored, ties, "random").unwrap());
            let want = brute_force(&scored, ties);
            assert!((got - want).abs() < 1e-9, "{ties:?}: {got} vs {want} on {scored:?}");
        }
    }
}

#[test]
fn three_tile_case() {
    let scored = [(0.9, true), (0.8, false), (0.1, true)];
    let ap = auprc(&pr_curve(&scored, TiePolicy::Grouped, "three").unwrap());
    assert!((ap - 5.0 / 6.0).abs() < 1e-9, "{ap}");
}

/// A thousand tiles from a 64-bit LCG; the reference value came from an
/// external average-precision implementation.
#[test]
fn frozen_lcg_fixture() {
    let mut x: u64 = 2024;
    let mut next = || {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (x >> 11) as f64 / (1u64 << 53) as f64
    };
    let scored: Vec<(f64, bool)> = (0..1000)
        .map(|_| {
            let score = (next() * 100.0).floor() / 100.0;
            (score, next() < 0.15 + 0.5 * score)
        })
        .collect();
    assert_eq!(scored.iter().filter(|s| s.1).count(), 392);
    let ap = auprc(&pr_curve(&scored, TiePolicy::Grouped, "lcg").unwrap());
    assert!((ap - 0.5405803769715882).abs() < 1e-9, "{ap}");
}

#[test]
fn single_class_is_rejected() {
    assert!(pr_curve(&[(0.3, true), (0.1, true)], TiePolicy::Grouped, "s").is_err());
    assert!(pr_curve(&[(0.3, false)], TiePolicy::Grouped, "s").is_err());
}
