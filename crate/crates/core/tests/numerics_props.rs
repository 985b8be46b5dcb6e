mod common;

use common::{naive_kendall, naive_pearson, naive_ranks};
use idsqs_core::numerics::{
    average_ranks, digamma, kendall_tau_b, otsu_threshold, pearson, polyfit, polyval, spearman,
    trigamma, CorrelationReport, DEFAULT_OTSU_BINS,
};
use proptest::prelude::*;

fn tied_vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..8).prop_map(|v| v as f64 * 12.5), len)
}

fn non_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..=50)
        .prop_flat_map(|n| (tied_vector(n), tied_vector(n)))
        .prop_filter("both vectors vary", |(x, y)| {
            non_constant(x) && non_constant(y)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn correlations_match_brute_force((x, y) in paired()) {
        prop_assert!((pearson(&x, &y).unwrap() - naive_pearson(&x, &y)).abs() < 1e-12);
        let sr = naive_pearson(&naive_ranks(&x), &naive_ranks(&y));
        prop_assert!((spearman(&x, &y).unwrap() - sr).abs() < 1e-12);
        prop_assert!((kendall_tau_b(&x, &y).unwrap() - naive_kendall(&x, &y)).abs() < 1e-12);
        prop_assert_eq!(average_ranks(&x), naive_ranks(&x));
    }

    #[test]
    fn correlations_symmetric((x, y) in paired()) {
        let a = CorrelationReport::compute(&x, &y).unwrap();
        let b = CorrelationReport::compute(&y, &x).unwrap();
        prop_assert!((a.plcc - b.plcc).abs() < 1e-12);
        prop_assert!((a.srocc - b.srocc).abs() < 1e-12);
        prop_assert!((a.kendall_tau - b.kendall_tau).abs() < 1e-12);
    }

    #[test]
    fn correlations_affine_invariant(
        (x, y) in paired(),
        scale in 0.01f64..100.0,
        shift in -1000f64..1000.0,
    ) {
        let x2: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
        let a = CorrelationReport::compute(&x, &y).unwrap();
        let b = CorrelationReport::compute(&x2, &y).unwrap();
        prop_assert!((a.plcc - b.plcc).abs() < 1e-9);
        prop_assert!((a.srocc - b.srocc).abs() < 1e-12);
        prop_assert!((a.kendall_tau - b.kendall_tau).abs() < 1e-12);
    }

    #[test]
    fn coefficients_bounded((x, y) in paired()) {
        let r = CorrelationReport::compute(&x, &y).unwrap();
        for v in [r.plcc, r.srocc, r.kendall_tau] {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn otsu_invariant_under_duplication(
        values in prop::collection::vec((0u8..=10).prop_map(|k| k as f64 / 10.0), 2..60),
        k in 2usize..5,
    ) {
        prop_assume!(non_constant(&values));
        let repeated: Vec<f64> = values
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, k))
            .collect();
        prop_assert_eq!(
            otsu_threshold(&values, DEFAULT_OTSU_BINS).unwrap(),
            otsu_threshold(&repeated, DEFAULT_OTSU_BINS).unwrap()
        );
    }

    #[test]
    fn polyfit_residual_orthogonal(
        xs in prop::collection::btree_set(0u32..1000, 8..40),
        noise in prop::collection::vec(-5f64..5.0, 40),
        c in prop::array::uniform4(-2f64..2.0),
    ) {
        let x: Vec<f64> = xs.iter().map(|&v| v as f64 / 10.0).collect();
        let y: Vec<f64> = x
            .iter()
            .zip(&noise)
            .map(|(&t, e)| c[0] + c[1] * t + c[2] * t * t / 100.0 + c[3] * t.powi(3) / 1e4 + e)
            .collect();
        let coeffs = polyfit(&x, &y, 3).unwrap();
        let residual: Vec<f64> = x.iter().zip(&y).map(|(&t, &v)| v - polyval(&coeffs, t)).collect();
        let rnorm = residual.iter().map(|r| r * r).sum::<f64>().sqrt().max(1e-12);
        for power in 0..=3 {
            let column: Vec<f64> = x.iter().map(|&t| (t / 100.0).powi(power)).collect();
            let cnorm = column.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = column.iter().zip(&residual).map(|(a, b)| a * b).sum();
            prop_assert!((dot / (cnorm * rnorm)).abs() < 1e-8, "power {} dot {}", power, dot);
        }
    }
}

/// Normal-equations least squares, used only as an independent check.
fn normal_equations(x: &[f64], y: &[f64], degree: usize) -> Vec<f64> {
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&t, &v) in x.iter().zip(y) {
        for r in 0..m {
            for c in 0..m {
                a[r][c] += t.powi((r + c) as i32);
            }
            a[r][m] += v * t.powi(r as i32);
        }
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for row in 0..m {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=m {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..m).map(|r| a[r][m] / a[r][r]).collect()
}

#[test]
fn polyfit_agrees_with_normal_equations() {
    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &t)| 1.0 - 2.0 * t + 0.5 * t.powi(3) + if i % 2 == 0 { 0.1 } else { -0.1 })
        .collect();
    let qr = polyfit(&x, &y, 3).unwrap();
    let ne = normal_equations(&x, &y, 3);
    for (a, b) in qr.iter().zip(&ne) {
        assert!((a - b).abs() < 1e-8, "{qr:?} vs {ne:?}");
    }
}

#[test]
fn digamma_at_half_integers() {
    const EULER: f64 = 0.577_215_664_901_532_9;
    let mut partial = 0.0;
    for n in 0..40u32 {
        if n > 0 {
            partial += 2.0 / (2.0 * n as f64 - 1.0);
        }
        let expected = -EULER - 2.0 * std::f64::consts::LN_2 + partial;
        let got = digamma(n as f64 + 0.5).unwrap();
        assert!(
            (got - expected).abs() < 1e-12,
            "psi({n}.5) = {got}, want {expected}"
        );
    }
}

#[test]
fn trigamma_matches_series() {
    // psi_1(x) = sum_k 1/(x+k)^2, summed directly with an integral tail
    for &x in &[0.3, 1.0, 2.5, 7.0, 20.0] {
        let terms = 200_000;
        let mut sum: f64 = (0..terms).map(|k| 1.0 / (x + k as f64).powi(2)).sum();
        let t = x + terms as f64;
        sum += 1.0 / t + 1.0 / (2.0 * t * t);
        assert!((trigamma(x).unwrap() - sum).abs() < 1e-10, "x = {x}");
    }
}
