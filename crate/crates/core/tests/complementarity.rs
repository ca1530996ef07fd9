use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use domainfuse::complementarity::{
    complementarity_report, domain_correlation, domain_mi, domain_orthogonality, premise_verdict,
    select_best_pair, Thresholds, Verdict, DEFAULT_BINS,
};
use domainfuse::dsp::{Domain, FeatureMatrix};
use domainfuse::Error;

fn fm(data: Array2<f64>) -> FeatureMatrix {
    FeatureMatrix::new(data, Domain::Deep).unwrap()
}

fn normal(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

/// Single-column bivariate Gaussian with correlation `rho`.
fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (FeatureMatrix, FeatureMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(n, 1, &mut rng);
    let e = normal(n, 1, &mut rng);
    let y = &x * rho + &e * (1.0 - rho * rho).sqrt();
    (fm(x), fm(y))
}

#[test]
fn gaussian_mi_oracle() {
    for (rho, seed) in [(0.0, 1), (0.5, 2), (0.8, 3)] {
        let (x, y) = gaussian_pair(5000, rho, seed);
        let mi = domain_mi(&x, &y, 16).unwrap();
        let truth = -0.5 * (1.0 - rho * rho).ln();
        assert!((mi - truth).abs() <= 0.08, "rho {rho}: {mi} vs {truth}");
    }
    let (x, y) = gaussian_pair(5000, 0.0, 4);
    assert!(domain_mi(&x, &y, 16).unwrap() < 0.05);
}

#[test]
fn identical_domains_hit_the_mi_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = fm(normal(400, 3, &mut rng));
    let mi = domain_mi(&x, &x, 8).unwrap();
    assert!((mi - 8f64.ln()).abs() < 1e-9);
}

#[test]
fn independent_matrices_score_low() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = fm(normal(1000, 4, &mut rng));
    let b = fm(normal(1000, 3, &mut rng));
    assert!(domain_correlation(&a, &b).unwrap().abs() < 0.1);
    assert!(domain_orthogonality(&a, &b).unwrap() < 0.1);
}

#[test]
fn orthogonal_columns_score_zero() {
    let n = 64;
    let a = Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 });
    let b = Array2::from_shape_fn((n, 1), |(i, _)| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 });
    assert!(domain_orthogonality(&fm(a), &fm(b)).unwrap().abs() < 1e-12);
}

#[test]
fn noisy_copy_carries_more_information_than_independent_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = normal(2000, 2, &mut rng);
    let y = normal(2000, 2, &mut rng);
    for sd in [0.1, 0.25, 0.5] {
        let noisy = &x + &(normal(2000, 2, &mut rng) * sd);
        let near = domain_mi(&fm(x.clone()), &fm(noisy), DEFAULT_BINS).unwrap();
        let far = domain_mi(&fm(x.clone()), &fm(y.clone()), DEFAULT_BINS).unwrap();
        assert!(near > far, "sd {sd}: {near} vs {far}");
    }
}

#[test]
fn mismatched_rows_and_constant_domains_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = fm(normal(200, 2, &mut rng));
    let b = fm(normal(150, 2, &mut rng));
    assert!(matches!(domain_correlation(&a, &b), Err(Error::InvalidInput(_))));
    let flat = fm(Array2::from_elem((200, 2), 3.0));
    assert!(matches!(domain_mi(&a, &flat, 8), Err(Error::DegenerateInput(_))));
    assert!(matches!(domain_correlation(&a, &flat), Err(Error::DegenerateInput(_))));
}

#[test]
fn report_picks_the_independent_pair_and_excludes_the_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = normal(2000, 3, &mut rng);
    let b = normal(2000, 3, &mut rng);
    let c = &a + &(normal(2000, 3, &mut rng) * 0.3);
    let (a, b, c) = (fm(a), fm(b), fm(c));
    let views = [("A".to_string(), &a), ("B".to_string(), &b), ("C".to_string(), &c)];
    let report = complementarity_report(&views, &Thresholds::default(), DEFAULT_BINS).unwrap();
    assert_eq!(report.pairs.len(), 3);
    assert_eq!(report.pair("A", "B").unwrap().verdict, Verdict::Complementary);
    assert_eq!(report.pair("A", "C").unwrap().verdict, Verdict::Redundant);
    let best = report.best_pair.clone().unwrap();
    assert!(report.complementary_set.contains(&best));
    assert_eq!(select_best_pair(&report).unwrap(), best);
    assert_eq!(report.excluded.len(), 1);
    let missing = ["A", "B", "C"].into_iter().find(|d| *d != best.0 && *d != best.1).unwrap();
    assert_eq!(report.excluded, vec![missing.to_string()]);
}

#[test]
fn reported_cells_classify_as_expected() {
    let th = Thresholds { eps: 0.1, ..Thresholds::default() };
    assert_eq!(premise_verdict(0.07, 0.40, 0.2, &th), Verdict::Complementary);
    let th = Thresholds { gamma: 0.2, ..Thresholds::default() };
    assert_eq!(premise_verdict(-0.30, 0.1, 0.1, &th), Verdict::Conflicting);
    assert_eq!(premise_verdict(0.0, 0.0, 0.0, &Thresholds::default()), Verdict::Complementary);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_symmetric_and_scale_invariant(
        seed in any::<u64>(),
        mix in 0.0f64..1.0,
        scale in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal(160, 3, &mut rng);
        let b = &normal(160, 2, &mut rng) * (1.0 - mix) + &a.slice(ndarray::s![.., ..2]) * mix;
        let (fa, fb) = (fm(a.clone()), fm(b));
        let corr = domain_correlation(&fa, &fb).unwrap();
        let mi = domain_mi(&fa, &fb, 8).unwrap();
        let ortho = domain_orthogonality(&fa, &fb).unwrap();
        prop_assert!((corr - domain_correlation(&fb, &fa).unwrap()).abs() < 1e-9);
        prop_assert!((mi - domain_mi(&fb, &fa, 8).unwrap()).abs() < 1e-9);
        prop_assert!((ortho - domain_orthogonality(&fb, &fa).unwrap()).abs() < 1e-9);
        prop_assert!(corr.abs() <= 1.0 + 1e-9);
        prop_assert!(mi >= -1e-9 && ortho >= 0.0);

        let scaled = fm(&a * scale);
        prop_assert!((domain_correlation(&scaled, &fb).unwrap() - corr).abs() < 1e-9);
        prop_assert!((domain_orthogonality(&scaled, &fb).unwrap() - ortho).abs() < 1e-9);
        prop_assert!((domain_mi(&scaled, &fb, 8).unwrap() - mi).abs() < 1e-6);
    }

    #[test]
    fn verdict_is_total_and_respects_precedence(
        corr in -1.0f64..1.0,
        mi in 0.0f64..2.0,
        ortho in 0.0f64..1.0,
    ) {
        let th = Thresholds::default();
        let v = premise_verdict(corr, mi, ortho, &th);
        if corr < -th.gamma {
            prop_assert_eq!(v, Verdict::Conflicting);
        } else if corr.abs() > th.delta || mi > th.tau_mi {
            prop_assert_eq!(v, Verdict::Redundant);
        } else if v == Verdict::Complementary {
            prop_assert!(corr.abs() < th.eps && mi < th.tau_mi && ortho < th.tau_ortho);
        } else {
            prop_assert_eq!(v, Verdict::Neutral);
        }
    }
}
