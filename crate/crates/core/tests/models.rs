use domainfuse::models::{
    build_1dcnn, build_2dcnn, build_cnn_transformer, build_hybrid, build_mlp, complementary_loss,
    extract_deep_features, ArchScale, Branch, ModelKind,
};
use domainfuse::nn::{cross_entropy, train, LossKind, Net, Tensor, TrainConfig, TrainData};
use domainfuse::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn width(w: f64) -> ArchScale {
    ArchScale { width_mult: w, ..ArchScale::default() }
}

fn kernel_shape(net: &Net, node: &str) -> Vec<usize> {
    let name = format!("{node}/kernel");
    net.params().find(|p| p.name == name).unwrap().value.shape().to_vec()
}

fn out_shape(net: &Net, node: &str) -> Vec<usize> {
    net.nodes[net.node_id(node).unwrap()].out_shape.clone()
}

fn conv_filters(net: &Net, n: usize) -> Vec<usize> {
    (1..=n).map(|i| *kernel_shape(net, &format!("conv{i}")).last().unwrap()).collect()
}

fn softmax_rows_ok(probs: &Tensor, classes: usize) {
    assert_eq!(probs.shape(), &[2, classes]);
    for i in 0..2 {
        let s: f64 = probs.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(probs.row(i).iter().all(|p| *p >= 0.0));
    }
}

/// Two-class task on a 64-sample signal with a class-dependent bump.
fn signal_task(n: usize, seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        for t in 0..64 {
            let bump = if c == 1 && (20..30).contains(&t) { 1.0 } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(bump + 0.5 * z);
        }
        labels.push(c);
    }
    TrainData::new(vec![Tensor::new(vec![n, 64, 1], data).unwrap()], labels).unwrap()
}

fn quick(epochs: usize, loss: LossKind) -> TrainConfig {
    TrainConfig { lr: 3e-3, epochs, batch_size: 16, loss, seed: 4, ..TrainConfig::default() }
}

fn trained_1d(seed: u64) -> Net {
    let net = build_1dcnn(&width(0.125), 64, 2, seed).unwrap();
    train(net, &signal_task(64, seed), None, &quick(2, LossKind::CrossEntropy)).unwrap().0
}

#[test]
fn oned_filter_counts_follow_width() {
    let full = build_1dcnn(&width(1.0), 128, 3, 0).unwrap();
    assert_eq!(conv_filters(&full, 3), vec![64, 128, 256]);
    let small = build_1dcnn(&width(0.125), 128, 3, 0).unwrap();
    assert_eq!(conv_filters(&small, 3), vec![8, 16, 32]);
    assert_eq!(kernel_shape(&small, "conv1"), vec![7, 1, 8]);
    assert_eq!(kernel_shape(&small, "conv3"), vec![5, 16, 32]);
}

#[test]
fn twod_filter_counts_and_final_grid() {
    let full = build_2dcnn(&width(1.0), 32, 32, 4, 0).unwrap();
    assert_eq!(conv_filters(&full, 4), vec![32, 64, 128, 256]);
    assert_eq!(out_shape(&full, "pool4"), vec![2, 2, 256]);
    assert_eq!(out_shape(&full, "flatten"), vec![2 * 2 * 256]);
    let err = build_2dcnn(&width(0.125), 8, 32, 4, 0).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn transformer_attention_settings() {
    let small = build_cnn_transformer(&ArchScale::default(), 32, 4, 0).unwrap();
    assert_eq!(kernel_shape(&small, "mha/query"), vec![16, 2 * 16]);
    let reference = ArchScale::reference();
    assert_eq!((reference.heads, reference.key_dim), (12, 256));
    let full = build_cnn_transformer(&reference, 16, 4, 0).unwrap();
    assert_eq!(kernel_shape(&full, "mha/query"), vec![128, 12 * 256]);
    let bad = ArchScale { heads: 0, ..ArchScale::default() };
    assert!(matches!(build_cnn_transformer(&bad, 32, 4, 0), Err(Error::Build(_))));
}

#[test]
fn every_builder_outputs_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = width(0.125);
    let mut one = build_1dcnn(&s, 64, 4, 1).unwrap();
    softmax_rows_ok(&one.predict(&[&randn(&[2, 64, 1], &mut rng)]).unwrap(), 4);
    let mut two = build_2dcnn(&s, 16, 32, 4, 1).unwrap();
    softmax_rows_ok(&two.predict(&[&randn(&[2, 16, 32, 1], &mut rng)]).unwrap(), 4);
    let mut tr = build_cnn_transformer(&s, 33, 4, 1).unwrap();
    softmax_rows_ok(&tr.predict(&[&randn(&[2, 33, 1], &mut rng)]).unwrap(), 4);
    let mut mlp = build_mlp(&s, 10, 3, 1).unwrap();
    softmax_rows_ok(&mlp.predict(&[&randn(&[2, 10], &mut rng)]).unwrap(), 3);
}

#[test]
fn conv_parameters_grow_quadratically_with_width() {
    let conv_params = |net: &Net| -> Vec<usize> {
        (1..=3).map(|i| kernel_shape(net, &format!("conv{i}")).iter().product()).collect()
    };
    let a = conv_params(&build_1dcnn(&width(0.125), 64, 2, 0).unwrap());
    let b = conv_params(&build_1dcnn(&width(0.25), 64, 2, 0).unwrap());
    // the first layer has one input channel, so it only doubles
    assert_eq!(b[0], 2 * a[0]);
    assert_eq!(b[1], 4 * a[1]);
    assert_eq!(b[2], 4 * a[2]);
    let ratio = b.iter().sum::<usize>() as f64 / a.iter().sum::<usize>() as f64;
    assert!((3.8..=4.2).contains(&ratio), "{ratio}");
}

#[test]
fn deep_features_are_rowwise() {
    let mut net = trained_1d(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&[6, 64, 1], &mut rng);
    let f = extract_deep_features(&mut net, &[&x], "hidden", ModelKind::OneD).unwrap();
    let d = width(0.125).units(512);
    assert_eq!(f.matrix.data.dim(), (6, d));

    // duplicated input rows give identical feature rows
    let dup = x.select_rows(&[2, 2]);
    let g = extract_deep_features(&mut net, &[&dup], "hidden", ModelKind::OneD).unwrap();
    assert_eq!(g.matrix.data.row(0), g.matrix.data.row(1));

    // permutation equivariance
    let perm = [4, 0, 5, 1, 3, 2];
    let xp = x.select_rows(&perm);
    let fp = extract_deep_features(&mut net, &[&xp], "hidden", ModelKind::OneD).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        for k in 0..d {
            assert!((fp.matrix.data[[r, k]] - f.matrix.data[[src, k]]).abs() < 1e-12);
        }
    }

    // one row at a time agrees with the batch
    for i in 0..6 {
        let single = extract_deep_features(&mut net, &[&x.select_rows(&[i])], "hidden", ModelKind::OneD).unwrap();
        for k in 0..d {
            assert!((single.matrix.data[[0, k]] - f.matrix.data[[i, k]]).abs() < 1e-6);
        }
    }
}

#[test]
fn hybrid_concat_width_and_frozen_trunk() {
    let a = trained_1d(1);
    let b = trained_1d(2);
    let c = trained_1d(3);
    let scale = ArchScale { fusion_units: Some(256), ..width(0.125) };
    let br = |name: &str, net| Branch { name: name.into(), net, tap: "hidden".into() };
    let two = build_hybrid(&[br("a", &a), br("b", &b)], &scale, false, 5).unwrap();
    assert_eq!(out_shape(&two, "concat"), vec![512]);
    let three = build_hybrid(&[br("a", &a), br("b", &b), br("c", &c)], &scale, false, 5).unwrap();
    assert_eq!(out_shape(&three, "concat"), vec![768]);

    let task = signal_task(48, 11);
    let data = TrainData::new(vec![task.inputs[0].clone(), task.inputs[0].clone()], task.labels.clone()).unwrap();
    let trunk = |net: &Net| -> Vec<(String, Vec<f64>)> {
        net.params()
            .filter(|p| (p.name.starts_with("a.") || p.name.starts_with("b.")) && !p.name.contains(".adapter/"))
            .map(|p| (p.name.clone(), p.value.data().to_vec()))
            .collect()
    };
    let before = trunk(&two);
    assert!(!before.is_empty());
    let loss = LossKind::Complementary { lambda1: 0.1, lambda2: 0.01 };
    let (after, _) = train(two, &data, None, &quick(2, loss)).unwrap();
    assert_eq!(trunk(&after), before);
}

#[test]
fn zero_weights_reproduce_plain_cross_entropy_training() {
    let a = trained_1d(1);
    let b = trained_1d(2);
    let scale = width(0.125);
    let build = || {
        build_hybrid(
            &[
                Branch { name: "a".into(), net: &a, tap: "hidden".into() },
                Branch { name: "b".into(), net: &b, tap: "hidden".into() },
            ],
            &scale,
            false,
            8,
        )
        .unwrap()
    };
    let task = signal_task(48, 12);
    let data = TrainData::new(vec![task.inputs[0].clone(), task.inputs[0].clone()], task.labels.clone()).unwrap();
    let (plain, _) = train(build(), &data, None, &quick(2, LossKind::CrossEntropy)).unwrap();
    let zero = LossKind::Complementary { lambda1: 0.0, lambda2: 0.0 };
    let (fused, _) = train(build(), &data, None, &quick(2, zero)).unwrap();
    assert_eq!(plain.param_values(), fused.param_values());
}

#[test]
fn complementary_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let b = 64;
    let probs = {
        let mut p = Tensor::zeros(&[b, 3]);
        for i in 0..b {
            let w: [f64; 3] = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
            let s: f64 = w.iter().sum();
            for (k, wk) in w.iter().enumerate() {
                p.data_mut()[i * 3 + k] = wk / s;
            }
        }
        p
    };
    let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let fi = randn(&[b, 5], &mut rng);
    let fj = randn(&[b, 4], &mut rng);

    let (ce, _) = cross_entropy(&probs, &labels).unwrap();
    let (l0, ..) = complementary_loss(&probs, &labels, &fi, &fj, 0.0, 0.0).unwrap();
    assert_eq!(l0.total, ce);

    // one shared column is perfectly correlated with itself
    let col = randn(&[b, 1], &mut rng);
    let (same, ..) = complementary_loss(&probs, &labels, &col, &col, 1.0, 1.0).unwrap();
    assert!((same.l_mi - 1.0).abs() < 1e-6);
    assert!((same.l_ortho - 1.0).abs() < 1e-6);

    // independent white noise: E[C²] ≈ 1/B
    let big = 4000;
    let (wi, wj) = (randn(&[big, 6], &mut rng), randn(&[big, 6], &mut rng));
    let pb = Tensor::full(&[big, 3], 1.0 / 3.0);
    let lb: Vec<usize> = (0..big).map(|i| i % 3).collect();
    let (white, ..) = complementary_loss(&pb, &lb, &wi, &wj, 1.0, 1.0).unwrap();
    assert!((white.l_mi * big as f64 - 1.0).abs() < 0.35, "{}", white.l_mi * big as f64);

    assert!(matches!(
        complementary_loss(&probs.select_rows(&[0, 1, 2]), &labels[..3], &fi.select_rows(&[0, 1, 2]), &fj.select_rows(&[0, 1, 2]), 0.1, 0.01),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn complementary_loss_feature_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let b = 12;
    let probs = Tensor::full(&[b, 2], 0.5);
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let fi = randn(&[b, 3], &mut rng);
    // partly shared so the penalty is far from zero
    let mut fj = randn(&[b, 2], &mut rng);
    for r in 0..b {
        fj.data_mut()[r * 2] += fi.row(r)[0];
    }
    let (l1, l2) = (0.7, 0.3);
    let (_, _, gi, gj) = complementary_loss(&probs, &labels, &fi, &fj, l1, l2).unwrap();
    let eps = 1e-5;
    let total = |a: &Tensor, c: &Tensor| complementary_loss(&probs, &labels, a, c, l1, l2).unwrap().0.total;
    let rel = |num: f64, ana: f64| (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6);
    for k in 0..fi.len() {
        let (mut up, mut dn) = (fi.clone(), fi.clone());
        up.data_mut()[k] += eps;
        dn.data_mut()[k] -= eps;
        let num = (total(&up, &fj) - total(&dn, &fj)) / (2.0 * eps);
        assert!(rel(num, gi.data()[k]) < 1e-4, "fi[{k}]: {num} vs {}", gi.data()[k]);
    }
    for k in 0..fj.len() {
        let (mut up, mut dn) = (fj.clone(), fj.clone());
        up.data_mut()[k] += eps;
        dn.data_mut()[k] -= eps;
        let num = (total(&fi, &up) - total(&fi, &dn)) / (2.0 * eps);
        assert!(rel(num, gj.data()[k]) < 1e-4, "fj[{k}]: {num} vs {}", gj.data()[k]);
    }
}

#[test]
fn architecture_export_lists_layers() {
    let net = build_mlp(&width(0.125), 6, 3, 0).unwrap();
    let arch = net.architecture();
    let layers = arch.as_array().unwrap();
    assert_eq!(layers.len(), net.nodes.len());
    let total: u64 = layers.iter().map(|l| l["params"].as_u64().unwrap()).sum();
    assert_eq!(total as usize, net.param_count());
    assert_eq!(layers.last().unwrap()["name"], "softmax");
}
