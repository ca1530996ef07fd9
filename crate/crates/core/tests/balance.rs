use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use domainfuse::balance::{
    adasyn, augmented_csv, fidelity_report, frechet_distance, intra_class_variance, radar_export, AdasynConfig,
    FidelityReport,
};
use domainfuse::dsp::{Domain, FeatureMatrix};

fn fm(data: Array2<f64>) -> FeatureMatrix {
    FeatureMatrix::new(data, Domain::Time).unwrap()
}

fn gaussian_rows(n: usize, d: usize, mean: f64, sd: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        mean + sd * z
    })
}

/// Clustered classes of the given sizes in 3 dimensions.
fn clustered(sizes: &[usize], seed: u64) -> (FeatureMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = sizes.iter().sum();
    let mut data = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    let mut r = 0;
    for (c, &m) in sizes.iter().enumerate() {
        for _ in 0..m {
            for j in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                data[[r, j]] = c as f64 * 1.5 + z;
            }
            labels.push(c);
            r += 1;
        }
    }
    (fm(data), labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthesis_respects_provenance_and_balance(
        sizes in prop::collection::vec(2usize..30, 2..5),
        seed in any::<u64>(),
        k in 1usize..7,
    ) {
        let (x, y) = clustered(&sizes, seed);
        let cfg = AdasynConfig { k, beta: 1.0, seed };
        let out = adasyn(&x, &y, &cfg).unwrap();
        let n = y.len();
        // originals untouched
        prop_assert_eq!(&out.labels[..n], &y[..]);
        prop_assert_eq!(out.features.data.slice(ndarray::s![..n, ..]), x.data.view());
        prop_assert_eq!(out.provenance.len(), out.labels.len() - n);
        for (s, p) in out.provenance.iter().enumerate() {
            let row = out.features.data.row(n + s);
            prop_assert!(p.base < n && p.neighbor < n && p.base != p.neighbor);
            prop_assert!((0.0..=1.0).contains(&p.lambda));
            prop_assert_eq!(y[p.base], out.labels[n + s]);
            prop_assert_eq!(y[p.neighbor], out.labels[n + s]);
            for j in 0..3 {
                let want = x.data[[p.base, j]] + p.lambda * (x.data[[p.neighbor, j]] - x.data[[p.base, j]]);
                prop_assert!((row[j] - want).abs() < 1e-12);
            }
        }
        // each per-sample count is rounded once, so a class can miss by at
        // most half a sample per contributing member
        let majority = *sizes.iter().max().unwrap();
        for (c, &m) in sizes.iter().enumerate() {
            let total = m + out.synth_counts[c];
            let slack = m as f64 / 2.0;
            prop_assert!((total as f64 - majority as f64).abs() <= slack + 1e-9,
                "class {} ends at {} vs majority {}", c, total, majority);
        }
        let again = adasyn(&x, &y, &cfg).unwrap();
        prop_assert_eq!(again.features.data, out.features.data);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let a = fm(gaussian_rows(40, 3, 0.0, 1.0, seed));
        let b = fm(gaussian_rows(30, 3, shift, 1.5, seed ^ 1));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6);
    }
}

#[test]
fn balanced_classes_get_nothing() {
    let (x, y) = clustered(&[12, 12, 12], 3);
    let out = adasyn(&x, &y, &AdasynConfig::default()).unwrap();
    assert_eq!(out.synth_counts, vec![0, 0, 0]);
    assert_eq!(out.features.nrows(), 36);
}

#[test]
fn synthesis_comes_only_from_the_boundary_cluster() {
    // Boundary minority points each sit inside a ring of six majority points,
    // so all five nearest neighbours are majority. The pure minority cluster
    // is far away, so its neighbours are all minority.
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut boundary = Vec::new();
    for b in 0..5 {
        let cx = 20.0 * b as f64;
        boundary.push(rows.len());
        rows.push([cx, 0.0]);
        labels.push(1);
        for r in 0..6 {
            let t = r as f64 * std::f64::consts::PI / 3.0;
            rows.push([cx + 0.1 * t.cos(), 0.1 * t.sin()]);
            labels.push(0);
        }
    }
    for p in 0..8 {
        rows.push([500.0 + 0.01 * p as f64, 500.0]);
        labels.push(1);
    }
    let data = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
    let out = adasyn(&fm(data), &labels, &AdasynConfig { k: 5, beta: 1.0, seed: 9 }).unwrap();
    assert!(out.synth_counts[1] > 0);
    assert!(out.provenance.iter().all(|p| boundary.contains(&p.base)));
}

#[test]
fn intra_class_variance_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = gaussian_rows(60, 4, 1.0, 2.0, 8);
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let mask: Vec<bool> = (0..60).map(|_| rng.random_bool(0.4)).collect();
    let cv = intra_class_variance(&fm(data.clone()), &labels, &mask, 3).unwrap();
    for c in 0..3 {
        for (want_synth, got) in [(false, cv.real[c]), (true, cv.synthetic[c])] {
            let rows: Vec<usize> = (0..60).filter(|&i| labels[i] == c && mask[i] == want_synth).collect();
            let mut acc = 0.0;
            for j in 0..4 {
                let mean = rows.iter().map(|&i| data[[i, j]]).sum::<f64>() / rows.len() as f64;
                acc += rows.iter().map(|&i| (data[[i, j]] - mean).powi(2)).sum::<f64>() / rows.len() as f64;
            }
            assert!((got - acc / 4.0).abs() < 1e-9);
        }
    }
}

#[test]
fn frechet_oracles() {
    let a = fm(gaussian_rows(500, 3, 0.0, 1.0, 1));
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    let x = fm(gaussian_rows(10_000, 1, 0.0, 1.0, 2));
    let y = fm(gaussian_rows(10_000, 1, 3.0, 1.0, 3));
    let fd = frechet_distance(&x, &y).unwrap();
    assert!((fd - 9.0).abs() < 0.5, "{fd}");
}

#[test]
fn fidelity_report_and_radar_round_trip() {
    let (x, y) = clustered(&[30, 10, 12, 8], 4);
    let out = adasyn(&x, &y, &AdasynConfig::default()).unwrap();
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let rep = fidelity_report(&out, &names).unwrap();
    assert!(rep.fid >= 0.0);
    assert!(rep.real_variance.iter().chain(&rep.synthetic_variance).all(|v| *v >= 0.0));
    assert_eq!(rep.synth_counts[0], 0);
    let json = serde_json::to_value(&rep).unwrap();
    for key in ["classes", "real_variance", "synthetic_variance", "fid", "synth_counts"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let back: FidelityReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, rep);
    let radar = radar_export(&rep);
    assert_eq!(radar.axes.len(), 4);
    assert_eq!(radar.series.len(), 2);
    let text = serde_json::to_string(&radar).unwrap();
    assert_eq!(serde_json::from_str::<domainfuse::balance::RadarChart>(&text).unwrap(), radar);

    let csv = augmented_csv(&out);
    let synth_rows = csv.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(synth_rows, out.provenance.len());
}
