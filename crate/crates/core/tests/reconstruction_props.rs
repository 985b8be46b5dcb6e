mod common;

use common::matrix_table;
use idsqs_core::reconstruction::{
    bootstrap_ci, compute_dmos, reconstruct, BootstrapOptions, ReconstructOptions,
};
use proptest::prelude::*;

const PER_SOURCE: usize = 4;

fn tight() -> ReconstructOptions {
    ReconstructOptions {
        epsilon: 1e-24,
        max_iter: 20_000,
        ..ReconstructOptions::default()
    }
}

/// Subjects × 8 questions of integer-ish scores kept away from the bounds so
/// that shifting one subject stays inside [0, 100].
fn score_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (4usize..12).prop_flat_map(|n| {
        prop::collection::vec(
            prop::collection::vec((20u32..=80).prop_map(f64::from), 2 * PER_SOURCE),
            n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mos_is_convex_combination(scores in score_matrix()) {
        let table = matrix_table(&scores, PER_SOURCE);
        let result = reconstruct(&table, &ReconstructOptions::default()).unwrap();
        prop_assert!(result.iterations <= ReconstructOptions::default().max_iter);
        for (j, (qid, &mos)) in result.mos.iter().enumerate() {
            prop_assert_eq!(qid, &format!("q{j:03}"));
            let corrected: Vec<f64> = scores
                .iter()
                .enumerate()
                .map(|(i, row)| row[j] - result.bias[&format!("p{i:03}")])
                .collect();
            let lo = corrected.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corrected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-9 <= mos && mos <= hi + 1e-9);
        }
    }

    /// Shifting one subject moves every MOS by one common constant and that
    /// subject's bias by `c` relative to everyone else; DMOS does not move.
    #[test]
    fn subject_offset_is_absorbed(
        scores in score_matrix(),
        pick in any::<prop::sample::Index>(),
        c in -15.0f64..15.0,
    ) {
        let j = pick.index(scores.len());
        let mut shifted = scores.clone();
        shifted[j].iter_mut().for_each(|s| *s += c);
        let base_table = matrix_table(&scores, PER_SOURCE);
        let shift_table = matrix_table(&shifted, PER_SOURCE);
        let base = reconstruct(&base_table, &tight()).unwrap();
        let moved = reconstruct(&shift_table, &tight()).unwrap();

        let diffs: Vec<f64> = base.mos.iter().map(|(q, m)| moved.mos[q] - m).collect();
        let spread = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(spread < 1e-6, "mos shift spread {}", spread);

        let gauge = diffs[0];
        let subject = format!("p{j:03}");
        for (s, b) in &base.bias {
            let expected = if *s == subject { c } else { 0.0 } - gauge;
            prop_assert!((moved.bias[s] - b - expected).abs() < 1e-6);
        }

        let d0 = compute_dmos(&base, base_table.questions()).unwrap();
        let d1 = compute_dmos(&moved, shift_table.questions()).unwrap();
        for (s, v) in &d0.dmos {
            prop_assert!((d1.dmos[s] - v).abs() < 1e-6);
        }
    }

    /// Residuals built from cyclic shifts of one zero-mean vector have zero
    /// row sums, zero column sums and equal row variances: every subject gets
    /// zero bias and the same weight, so MOS is the plain mean.
    #[test]
    fn equal_weights_give_plain_mean(
        base in prop::collection::vec(20f64..80.0, 2 * PER_SOURCE),
        raw in prop::collection::vec(-15f64..15.0, 2 * PER_SOURCE),
    ) {
        let q = base.len();
        let m = raw.iter().sum::<f64>() / q as f64;
        let v: Vec<f64> = raw.iter().map(|x| x - m).collect();
        let scores: Vec<Vec<f64>> = (0..q)
            .map(|i| (0..q).map(|k| base[k] + v[(k + i) % q]).collect())
            .collect();
        let table = matrix_table(&scores, PER_SOURCE);
        let result = reconstruct(&table, &ReconstructOptions::default()).unwrap();
        prop_assert!(result.converged);
        for (k, mos) in result.mos.values().enumerate() {
            let plain = scores.iter().map(|row| row[k]).sum::<f64>() / q as f64;
            prop_assert!((mos - plain).abs() < 1e-6);
        }
    }

    #[test]
    fn level_zero_dmos_is_zero(scores in score_matrix()) {
        let table = matrix_table(&scores, PER_SOURCE);
        let result = reconstruct(&table, &ReconstructOptions::default()).unwrap();
        let dmos = compute_dmos(&result, table.questions()).unwrap();
        for (s, d) in &dmos.dmos {
            if s.is_pristine() {
                prop_assert_eq!(*d, 0.0);
            }
        }
    }
}

fn bootstrap_fixture() -> Vec<Vec<f64>> {
    (0..10)
        .map(|i| {
            (0..2 * PER_SOURCE)
                .map(|j| {
                    ((j % PER_SOURCE) as f64 * 20.0 + ((i * 7 + j * 3) % 11) as f64).min(100.0)
                })
                .collect()
        })
        .collect()
}

#[test]
fn bootstrap_is_deterministic_and_complete() {
    let table = matrix_table(&bootstrap_fixture(), PER_SOURCE);
    let options = BootstrapOptions {
        replicates: 200,
        seed: 17,
        ..BootstrapOptions::default()
    };
    let a = bootstrap_ci(&table, &options).unwrap();
    let b = bootstrap_ci(&table, &options).unwrap();
    assert_eq!(a, b);
    for (s, values) in &a.replicate_values {
        assert_eq!(values.len(), 200);
        let iv = a.intervals[s];
        assert!(iv.lo <= iv.median && iv.median <= iv.hi, "{s}: {iv:?}");
    }
    let other = bootstrap_ci(
        &table,
        &BootstrapOptions {
            seed: 18,
            ..options
        },
    )
    .unwrap();
    assert_ne!(a.replicate_values, other.replicate_values);
}

#[test]
fn bootstrap_constant_input_has_zero_width() {
    let scores: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            (0..2 * PER_SOURCE)
                .map(|j| (j % PER_SOURCE) as f64 * 10.0)
                .collect()
        })
        .collect();
    let table = matrix_table(&scores, PER_SOURCE);
    let ci = bootstrap_ci(
        &table,
        &BootstrapOptions {
            replicates: 100,
            ..BootstrapOptions::default()
        },
    )
    .unwrap();
    for iv in ci.intervals.values() {
        assert_eq!(iv.lo, iv.hi);
    }
}
