//! Property tests for the sampling curriculum, CTC collapse and the metrics.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use glance_core::ctc::{ctc_collapse, lcs_distance, min_alignment_len};
use glance_core::data::{bleu, repetition_ratio};
use glance_core::glm::{
    glancing_sample, ratio_schedule_value, sampling_number, FirstPass, RatioSchedule,
    SelectionStrategy,
};
use glance_core::vocab;

fn uniform_fp(t: usize, v: usize) -> FirstPass {
    FirstPass { y_hat: vec![0; t], probs: vec![1.0 / v as f64; t * v], vocab: v }
}

proptest! {
    #[test]
    fn sample_size_exact_and_distinct(
        t in 1usize..=8,
        s_frac in 0.0f64..=1.0,
        seed in 0u64..2000,
        strat_idx in 0usize..6,
    ) {
        let strategies = [
            SelectionStrategy::Random,
            SelectionStrategy::PRef,
            SelectionStrategy::OneMinusPRef,
            SelectionStrategy::MostCertain,
            SelectionStrategy::MostUncertain,
            SelectionStrategy::UniformMlm,
        ];
        let s = (s_frac * t as f64).floor() as usize;
        let y: Vec<usize> = (0..t).map(|i| i + vocab::RESERVED).collect();
        let fp = uniform_fp(t, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = glancing_sample(&y, s, strategies[strat_idx], &fp, &mut rng);
        prop_assert_eq!(picked.len(), s);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&p| p < t));
    }

    #[test]
    fn sampling_number_is_monotone(
        lambda1 in 0.0f64..=1.0,
        lambda2 in 0.0f64..=1.0,
        d1 in 0usize..=32,
        d2 in 0usize..=32,
    ) {
        let cap = 64;
        // monotone in distance at fixed lambda
        let (dlo, dhi) = (d1.min(d2), d1.max(d2));
        prop_assert!(sampling_number(lambda1, dlo, cap) <= sampling_number(lambda1, dhi, cap));
        // monotone in lambda at fixed distance
        let (llo, lhi) = (lambda1.min(lambda2), lambda1.max(lambda2));
        prop_assert!(sampling_number(llo, d1, cap) <= sampling_number(lhi, d1, cap));
    }

    #[test]
    fn schedule_value_stays_within_endpoints(
        start in 0.0f64..=1.0,
        end in 0.0f64..=1.0,
        step in 0u64..=500,
    ) {
        let sched = RatioSchedule::Linear { start, end };
        let v = ratio_schedule_value(&sched, step, 500);
        let (lo, hi) = (start.min(end), start.max(end));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn collapse_never_emits_blank_and_shrinks(seq in proptest::collection::vec(0usize..8, 0..24)) {
        let out = ctc_collapse(&seq, vocab::BLANK);
        prop_assert!(out.len() <= seq.len());
        prop_assert!(out.iter().all(|&t| t != vocab::BLANK));
    }

    #[test]
    fn collapse_of_min_expansion_is_identity(labels in proptest::collection::vec(6usize..12, 1..8)) {
        // interleave blanks between equal neighbours only: the shortest
        // feasible alignment must collapse back to the labels
        let mut align = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            if i > 0 && labels[i - 1] == y {
                align.push(vocab::BLANK);
            }
            align.push(y);
        }
        prop_assert_eq!(align.len(), min_alignment_len(&labels));
        prop_assert_eq!(ctc_collapse(&align, vocab::BLANK), labels);
    }

    #[test]
    fn lcs_distance_bounds(a in proptest::collection::vec(0usize..6, 0..10),
                           b in proptest::collection::vec(0usize..6, 0..10)) {
        let d = lcs_distance(&a, &b);
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert_eq!(lcs_distance(&a, &a), 0);
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_identity(
        corpus in proptest::collection::vec(proptest::collection::vec(6usize..20, 1..12), 1..8)
    ) {
        let score = bleu(&corpus, &corpus);
        prop_assert!((score - 100.0).abs() < 1e-9);
        // shuffled-ish hypothesis still bounded
        let mut hyp = corpus.clone();
        hyp.reverse();
        let s2 = bleu(&hyp, &corpus);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&s2));
    }

    #[test]
    fn repetition_ratio_bounded_and_permutation_invariant(
        corpus in proptest::collection::vec(proptest::collection::vec(0usize..4, 1..10), 1..8)
    ) {
        let r = repetition_ratio(&corpus);
        prop_assert!((0.0..=1.0).contains(&r));
        let mut rev = corpus.clone();
        rev.reverse();
        prop_assert_eq!(r, repetition_ratio(&rev));
    }
}
