use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;

use common::{compositions, metrics_vector, names, oracle_metrics};
use domainfuse::stats::{
    bayes_compare, bootstrap_diff, evaluate, resample, run_ablation, stream_key, AblationConfig, AblationPair,
    DiffLabel, DiffResult, Metric,
};

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn evaluate_matches_exhaustive_counting() {
    // Metrics depend only on the multiset of (true, pred) cells, so every
    // multiset of up to 8 cells covers every label vector up to order.
    let mut checked = 0;
    for len in 1..=8 {
        let mut comps = Vec::new();
        compositions(len, 9, &mut Vec::new(), &mut comps);
        for counts in comps {
            let (mut y, mut p) = (Vec::new(), Vec::new());
            for (cell, &k) in counts.iter().enumerate() {
                for _ in 0..k {
                    y.push(cell / 3);
                    p.push(cell % 3);
                }
            }
            assert_close(&metrics_vector(&y, &p, 3), &oracle_metrics(&y, &p, 3));
            checked += 1;
        }
    }
    assert_eq!(checked, 24309);

    // and every ordered vector pair up to length 4
    for len in 1..=4u32 {
        for code in 0..3usize.pow(2 * len) {
            let digits: Vec<usize> = (0..2 * len).map(|i| code / 3usize.pow(i) % 3).collect();
            let (y, p) = digits.split_at(len as usize);
            assert_close(&metrics_vector(y, p, 3), &oracle_metrics(y, p, 3));
        }
    }
}

#[test]
fn weighted_recall_is_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let c = rng.random_range(2..6);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (_, m) = evaluate(&y, &p, &names(c)).unwrap();
        assert!((m.weighted_recall - m.accuracy).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_mean_matches_exhaustive_enumeration() {
    let y = [0, 1, 2, 1];
    let a = [0, 1, 1, 1];
    let b = [0, 2, 2, 0];
    let acc = |pred: &[usize], idx: &[usize]| idx.iter().filter(|&&i| pred[i] == y[i]).count() as f64 / 4.0;
    let mut all = Vec::with_capacity(256);
    for code in 0..256usize {
        let idx: Vec<usize> = (0..4).map(|k| code >> (2 * k) & 3).collect();
        all.push(acc(&a, &idx) - acc(&b, &idx));
    }
    let exact = all.iter().sum::<f64>() / 256.0;
    let sd = (all.iter().map(|d| (d - exact).powi(2)).sum::<f64>() / 256.0).sqrt();
    let iters = 10_000;
    let r = bootstrap_diff(&y, &a, &b, 3, Metric::Accuracy, iters, 3, DiffLabel::Comparison).unwrap();
    let mc_err = sd / (iters as f64).sqrt();
    assert!((r.mean_diff - exact).abs() < 3.0 * mc_err, "{} vs {exact} (σ {mc_err})", r.mean_diff);
    assert!((r.p_le0 + r.p_gt0 - 1.0).abs() < 1e-12);
}

#[test]
fn swapping_models_negates_every_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<usize> = (0..80).map(|_| rng.random_range(0..3)).collect();
    let a: Vec<usize> = y.iter().map(|&t| if rng.random_bool(0.8) { t } else { (t + 1) % 3 }).collect();
    let b: Vec<usize> = y.iter().map(|&t| if rng.random_bool(0.7) { t } else { (t + 2) % 3 }).collect();
    for metric in [Metric::Accuracy, Metric::WeightedF1, Metric::MacroF1] {
        let ab = bootstrap_diff(&y, &a, &b, 3, metric, 500, 11, DiffLabel::Comparison).unwrap();
        let ba = bootstrap_diff(&y, &b, &a, 3, metric, 500, 11, DiffLabel::Comparison).unwrap();
        for (x, z) in ab.samples.iter().zip(&ba.samples) {
            assert_eq!(*x, -*z);
        }
        assert!((ab.mean_diff + ba.mean_diff).abs() < 1e-12);
        assert!((ab.ci95.0 + ba.ci95.1).abs() < 1e-12 && (ab.ci95.1 + ba.ci95.0).abs() < 1e-12);
        assert!((ba.p_gt0 - (ab.p_le0 - ab.p_eq0)).abs() < 1e-12);
    }
}

#[test]
fn percentile_interval_coverage_is_calibrated() {
    let truth = 0.3;
    let dist = Normal::new(truth, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reps = 500;
    let n = 100;
    let mut covered = 0;
    for r in 0..reps {
        let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let means = resample(n, 1000, stream_key(r, "coverage"), |idx| {
            idx.iter().map(|&i| xs[i]).sum::<f64>() / n as f64
        });
        let ci = DiffResult::from_samples("mean", DiffLabel::Comparison, means).ci95;
        if ci.0 <= truth && truth <= ci.1 {
            covered += 1;
        }
    }
    let rate = covered as f64 / reps as f64;
    assert!((rate - 0.95).abs() <= 0.03, "coverage {rate}");
}

#[test]
fn duplicate_model_has_zero_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let a: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let b: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let models = vec![("A".to_string(), a.clone()), ("A copy".to_string(), a), ("B".to_string(), b)];
    let pair = |x: &str, z: &str| AblationPair { model_a: x.into(), model_b: z.into(), label: DiffLabel::Comparison };
    let cfg = AblationConfig {
        pairs: vec![pair("A copy", "A"), pair("B", "A")],
        metrics: Metric::WEIGHTED.to_vec(),
        iters: 200,
        seed: 1,
    };
    let table = run_ablation(&models, &y, &names(4), &cfg).unwrap();
    assert_eq!(table.rows.len(), 3);
    for r in &table.diffs[0].results {
        assert!(r.samples.iter().all(|d| *d == 0.0));
        assert_eq!((r.mean_diff, r.ci95, r.p_gt0), (0.0, (0.0, 0.0), 0.0));
    }
    assert!(table.rows.windows(2).all(|w| w[0].metrics.accuracy >= w[1].metrics.accuracy));
}

#[test]
fn bayes_and_bootstrap_share_one_engine() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
    let a: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
    let b: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
    let bayes = bayes_compare(&y, &a, &b, 3, &Metric::WEIGHTED, 300, 9).unwrap();
    for (m, r) in Metric::WEIGHTED.iter().zip(&bayes) {
        let boot = bootstrap_diff(&y, &a, &b, 3, *m, 300, 9, DiffLabel::Complementarity).unwrap();
        assert_eq!(r.samples, boot.samples);
        assert_eq!(r.mean_diff, boot.mean_diff);
        assert_eq!(r.metric, m.name());
    }
    // distinct metrics draw distinct streams
    assert_ne!(stream_key(9, "accuracy"), stream_key(9, "weighted_f1"));
}

#[test]
fn resampling_ignores_thread_count() {
    let key = stream_key(1, "threads");
    let stat = |idx: &[usize]| idx.iter().map(|&i| (i * i) as f64).sum::<f64>();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| resample(30, 400, key, stat));
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| resample(30, 400, key, stat));
    assert_eq!(one, four);
}
