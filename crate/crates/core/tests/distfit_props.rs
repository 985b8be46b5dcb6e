use idsqs_core::distfit::{
    chi_square_gof, classify_shape, fit_beta, fit_beta_moments, moments_estimate, FitMethod, Shape,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

fn beta_sample(alpha: f64, beta: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Beta::new(alpha, beta).unwrap();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mirror_swaps_parameters(
        alpha in 0.5f64..8.0,
        beta in 0.5f64..8.0,
        n in 20usize..300,
        seed in any::<u64>(),
    ) {
        let xs = beta_sample(alpha, beta, n, seed);
        let mirrored: Vec<f64> = xs.iter().map(|x| 1.0 - x).collect();

        let m = fit_beta_moments(&xs).unwrap();
        let mm = fit_beta_moments(&mirrored).unwrap();
        prop_assert!((m.alpha - mm.beta).abs() <= 1e-9 * m.alpha.max(1.0));
        prop_assert!((m.beta - mm.alpha).abs() <= 1e-9 * m.beta.max(1.0));

        let f = fit_beta(&xs).unwrap();
        let fm = fit_beta(&mirrored).unwrap();
        prop_assert_eq!(f.method, fm.method);
        prop_assert!((f.alpha - fm.beta).abs() < 1e-6, "{:?} vs {:?}", f, fm);
        prop_assert!((f.beta - fm.alpha).abs() < 1e-6, "{:?} vs {:?}", f, fm);
    }

    #[test]
    fn mle_never_below_moments(
        alpha in 0.3f64..10.0,
        beta in 0.3f64..10.0,
        seed in any::<u64>(),
    ) {
        let xs = beta_sample(alpha, beta, 200, seed);
        let mle = fit_beta(&xs).unwrap();
        let mom = fit_beta_moments(&xs).unwrap();
        prop_assert!(mle.alpha > 0.0 && mle.beta > 0.0);
        if mle.method == FitMethod::Mle {
            prop_assert!(mle.loglik >= mom.loglik - 1e-9);
        }
    }

    #[test]
    fn moments_inverse_identity(m in 0.05f64..0.95, frac in 0.01f64..0.99) {
        let v = frac * m * (1.0 - m);
        let (a, b) = moments_estimate(m, v).unwrap();
        let mean = a / (a + b);
        let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
        prop_assert!((mean - m).abs() < 1e-12);
        prop_assert!((var - v).abs() < 1e-12);
    }

    #[test]
    fn gof_expected_counts_sum_to_n(
        alpha in 0.5f64..6.0,
        beta in 0.5f64..6.0,
        n in 10usize..200,
        seed in any::<u64>(),
    ) {
        let xs = beta_sample(alpha, beta, n, seed);
        let fit = fit_beta(&xs).unwrap();
        let gof = chi_square_gof(&xs, &fit, 0.05).unwrap();
        prop_assert!((gof.expected.iter().sum::<f64>() - n as f64).abs() < 1e-9);
        prop_assert_eq!(gof.observed.iter().sum::<u64>() as usize, n);
        prop_assert_eq!(gof.passed, gof.p_value >= 0.05);
    }
}

#[test]
fn right_skewed_sample_classified() {
    let xs = beta_sample(8.0, 2.0, 45, 11);
    let fit = fit_beta(&xs).unwrap();
    assert!(fit.alpha > fit.beta);
    assert_eq!(classify_shape(&fit, 0.05), Shape::RightSkewed);
}
