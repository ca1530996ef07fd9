//! Built-in benchmarks: constructed complementary/redundant domains, and an
//! imbalanced synthetic-ECG task for oversampling.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{adasyn, AdasynConfig};
use crate::complementarity::{complementarity_report, ComplementarityReport, Thresholds, DEFAULT_BINS};
use crate::dsp::{bandpass, BandpassSpec, Domain, FeatureMatrix};
use crate::error::{Error, Result};
use crate::ingest::{generate_synthetic, minmax_normalize, split_by_patient, LabeledDataset, SplitSpec, SynthConfig};
use crate::models::{build_1dcnn, build_hybrid, build_mlp, flat_tensor, ArchScale, Branch};
use crate::nn::{train, LossKind, Net, Tensor, TrainConfig, TrainData};
use crate::stats::{bootstrap_diff, evaluate, DiffLabel, DiffResult, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructedConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub dim_c: usize,
    /// Class-mean separation along each informative direction, in noise units.
    pub signal: f64,
    /// Noise added on top of the linear copy that forms C.
    pub copy_noise: f64,
    pub scale: ArchScale,
    pub unimodal: TrainConfig,
    pub fusion: TrainConfig,
    pub thresholds: Thresholds,
    pub bins: usize,
    pub bootstrap_iters: usize,
}

impl Default for ConstructedConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 2000,
            n_test: 2000,
            dim_a: 8,
            dim_b: 8,
            dim_c: 16,
            signal: 1.2,
            copy_noise: 0.3,
            scale: ArchScale { width_mult: 0.125, ..ArchScale::default() },
            unimodal: TrainConfig { lr: 3e-3, epochs: 25, batch_size: 32, ..TrainConfig::default() },
            fusion: TrainConfig {
                lr: 3e-3,
                epochs: 25,
                batch_size: 32,
                loss: LossKind::Complementary { lambda1: 0.1, lambda2: 0.01 },
                ..TrainConfig::default()
            },
            thresholds: Thresholds::default(),
            bins: DEFAULT_BINS,
            bootstrap_iters: 2000,
        }
    }
}

/// Three row-aligned domains over a four-class label `2·b1 + b2`:
/// A carries b1, B carries b2, C is a noisy linear map of A.
#[derive(Debug, Clone)]
pub struct ConstructedDomains {
    pub a: FeatureMatrix,
    pub b: FeatureMatrix,
    pub c: FeatureMatrix,
    pub labels: Vec<usize>,
}

impl ConstructedDomains {
    pub fn select(&self, idx: &[usize]) -> ConstructedDomains {
        ConstructedDomains {
            a: self.a.select_rows(idx),
            b: self.b.select_rows(idx),
            c: self.c.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn named(&self) -> [(String, &FeatureMatrix); 3] {
        [("A".to_string(), &self.a), ("B".to_string(), &self.b), ("C".to_string(), &self.c)]
    }
}

pub fn constructed_domains(cfg: &ConstructedConfig, n: usize, seed: u64) -> Result<ConstructedDomains> {
    if cfg.dim_a == 0 || cfg.dim_b == 0 || cfg.dim_c == 0 || n == 0 {
        return Err(Error::Config("constructed domains need positive sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    // mixing weights stay positive so C tracks A's mean direction
    let w: Vec<f64> = (0..cfg.dim_a * cfg.dim_c)
        .map(|_| (1.0 + rng.random_range(-0.5..0.5)) / cfg.dim_a as f64)
        .collect();
    let shift_a = cfg.signal / (cfg.dim_a as f64).sqrt();
    let shift_b = cfg.signal / (cfg.dim_b as f64).sqrt();
    let mut a = Array2::zeros((n, cfg.dim_a));
    let mut b = Array2::zeros((n, cfg.dim_b));
    let mut c = Array2::zeros((n, cfg.dim_c));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let b1 = rng.random_bool(0.5);
        let b2 = rng.random_bool(0.5);
        labels.push(2 * b1 as usize + b2 as usize);
        let s1 = if b1 { 1.0 } else { -1.0 };
        let s2 = if b2 { 1.0 } else { -1.0 };
        for k in 0..cfg.dim_a {
            a[[i, k]] = s1 * shift_a + gauss(&mut rng);
        }
        for k in 0..cfg.dim_b {
            b[[i, k]] = s2 * shift_b + gauss(&mut rng);
        }
        for l in 0..cfg.dim_c {
            let lin: f64 = (0..cfg.dim_a).map(|k| a[[i, k]] * w[k * cfg.dim_c + l]).sum();
            c[[i, l]] = lin + cfg.copy_noise * gauss(&mut rng);
        }
    }
    Ok(ConstructedDomains {
        a: FeatureMatrix::new(a, Domain::Deep)?,
        b: FeatureMatrix::new(b, Domain::Deep)?,
        c: FeatureMatrix::new(c, Domain::Deep)?,
        labels,
    })
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

fn predict_labels(net: &mut Net, inputs: &[&Tensor]) -> Result<Vec<usize>> {
    Ok(net.predict(inputs)?.argmax_rows())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub unimodal_acc: BTreeMap<String, f64>,
    pub best_unimodal: String,
    pub fused_ab_acc: f64,
    pub fused_abc_acc: f64,
    pub y_test: Vec<usize>,
    pub predictions: BTreeMap<String, Vec<usize>>,
    pub report: ComplementarityReport,
}

/// Trains one encoder per domain, scores the domains on the training rows,
/// and fits the two- and three-branch fusion networks.
pub fn run_constructed_seed(cfg: &ConstructedConfig, seed: u64) -> Result<SeedOutcome> {
    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    let all = constructed_domains(cfg, n, seed)?;
    let tr: Vec<usize> = (0..cfg.n_train).collect();
    let va: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_val).collect();
    let te: Vec<usize> = (cfg.n_train + cfg.n_val..n).collect();
    let (train_d, val_d, test_d) = (all.select(&tr), all.select(&va), all.select(&te));

    let report = complementarity_report(&train_d.named(), &cfg.thresholds, cfg.bins)?;

    let mut encoders = BTreeMap::new();
    let mut predictions = BTreeMap::new();
    let mut unimodal_acc = BTreeMap::new();
    for (k, ((name, trm), ((_, vam), (_, tem)))) in
        train_d.named().into_iter().zip(val_d.named().into_iter().zip(test_d.named())).enumerate()
    {
        let net = build_mlp(&cfg.scale, trm.ncols(), 4, seed.wrapping_mul(31).wrapping_add(k as u64))?;
        let tcfg = TrainConfig { seed: seed ^ (0x5eed + k as u64), ..cfg.unimodal.clone() };
        let (mut net, _) = train(
            net,
            &TrainData::new(vec![flat_tensor(trm)], train_d.labels.clone())?,
            Some(&TrainData::new(vec![flat_tensor(vam)], val_d.labels.clone())?),
            &tcfg,
        )?;
        let pred = predict_labels(&mut net, &[&flat_tensor(tem)])?;
        unimodal_acc.insert(name.clone(), accuracy(&pred, &test_d.labels));
        predictions.insert(name.clone(), pred);
        encoders.insert(name, net);
    }
    let best_unimodal = unimodal_acc
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, _)| k.clone())
        .expect("three encoders");

    let fuse = |names: &[&str], tag: &str| -> Result<(f64, Vec<usize>)> {
        let branches: Vec<Branch> = names
            .iter()
            .map(|&nm| Branch { name: nm.to_string(), net: &encoders[nm], tap: "hidden".into() })
            .collect();
        let net = build_hybrid(&branches, &cfg.scale, false, seed.wrapping_mul(131).wrapping_add(names.len() as u64))?;
        let pick = |d: &ConstructedDomains| -> Vec<Tensor> {
            names
                .iter()
                .map(|&nm| match nm {
                    "A" => flat_tensor(&d.a),
                    "B" => flat_tensor(&d.b),
                    _ => flat_tensor(&d.c),
                })
                .collect()
        };
        let tcfg = TrainConfig { seed: seed ^ 0xf00d, ..cfg.fusion.clone() };
        let (mut net, _) = train(
            net,
            &TrainData::new(pick(&train_d), train_d.labels.clone())?,
            Some(&TrainData::new(pick(&val_d), val_d.labels.clone())?),
            &tcfg,
        )?;
        let inputs = pick(&test_d);
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let pred = predict_labels(&mut net, &refs)?;
        log::debug!("seed {seed}: {tag} trained");
        Ok((accuracy(&pred, &test_d.labels), pred))
    };
    let (fused_ab_acc, pab) = fuse(&["A", "B"], "fused(A,B)")?;
    let (fused_abc_acc, pabc) = fuse(&["A", "B", "C"], "fused(A,B,C)")?;
    predictions.insert("fused(A,B)".into(), pab);
    predictions.insert("fused(A,B,C)".into(), pabc);
    Ok(SeedOutcome {
        seed,
        unimodal_acc,
        best_unimodal,
        fused_ab_acc,
        fused_abc_acc,
        y_test: test_d.labels,
        predictions,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstructedSummary {
    pub seeds: Vec<SeedOutcome>,
    pub mean_best_unimodal: f64,
    pub mean_fused_ab: f64,
    pub mean_fused_abc: f64,
    /// fused(A,B) against each seed's best single domain, predictions pooled.
    pub complementarity: DiffResult,
    /// fused(A,B,C) against fused(A,B), predictions pooled.
    pub redundancy: DiffResult,
}

pub fn run_constructed(cfg: &ConstructedConfig, seeds: &[u64]) -> Result<ConstructedSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let outcomes = seeds.iter().map(|&s| run_constructed_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let k = outcomes.len() as f64;
    let mut y = Vec::new();
    let (mut uni, mut ab, mut abc) = (Vec::new(), Vec::new(), Vec::new());
    for o in &outcomes {
        y.extend(&o.y_test);
        uni.extend(&o.predictions[&o.best_unimodal]);
        ab.extend(&o.predictions["fused(A,B)"]);
        abc.extend(&o.predictions["fused(A,B,C)"]);
    }
    let bseed = seeds[0];
    let complementarity =
        bootstrap_diff(&y, &ab, &uni, 4, Metric::Accuracy, cfg.bootstrap_iters, bseed, DiffLabel::Complementarity)?;
    let redundancy =
        bootstrap_diff(&y, &abc, &ab, 4, Metric::Accuracy, cfg.bootstrap_iters, bseed, DiffLabel::Redundancy)?;
    Ok(ConstructedSummary {
        mean_best_unimodal: outcomes.iter().map(|o| o.unimodal_acc[&o.best_unimodal]).sum::<f64>() / k,
        mean_fused_ab: outcomes.iter().map(|o| o.fused_ab_acc).sum::<f64>() / k,
        mean_fused_abc: outcomes.iter().map(|o| o.fused_abc_acc).sum::<f64>() / k,
        seeds: outcomes,
        complementarity,
        redundancy,
    })
}

// ---------------------------------------------------------------------------
// Imbalanced benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImbalanceConfig {
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub bandpass: BandpassSpec,
    pub adasyn: AdasynConfig,
    pub scale: ArchScale,
    pub train: TrainConfig,
}

impl Default for ImbalanceConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n_patients: 300,
                signals_per_patient: 2,
                length: 256,
                noise_sd: 0.1,
                patient_jitter: 0.2,
                class_weights: Some(vec![1.0, 0.2, 1.0, 0.2]),
                ..SynthConfig::default()
            },
            split: SplitSpec { train_frac: 0.6, val_frac: 0.2, test_frac: 0.2, seed: 0, group_by_patient: true, stratify: true },
            bandpass: BandpassSpec::default(),
            adasyn: AdasynConfig::default(),
            scale: ArchScale { width_mult: 0.125, ..ArchScale::default() },
            train: TrainConfig { lr: 1e-3, epochs: 30, batch_size: 32, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImbalanceOutcome {
    pub seed: u64,
    pub minority: Vec<usize>,
    pub f1_with: f64,
    pub f1_without: f64,
    pub synthesized: usize,
}

fn signals_tensor(m: &Array2<f64>) -> Tensor {
    let (n, d) = m.dim();
    Tensor::new(vec![n, d, 1], m.iter().cloned().collect()).expect("sized")
}

/// Band-passed, normalized synthetic data split by patient.
pub fn prepared_splits(cfg: &ImbalanceConfig, seed: u64) -> Result<[LabeledDataset; 3]> {
    let synth = SynthConfig { seed, ..cfg.synth.clone() };
    let raw = generate_synthetic(&synth)?;
    let filtered = raw.signals.iter().map(|s| bandpass(s, &cfg.bandpass)).collect::<Result<Vec<_>>>()?;
    let ds = minmax_normalize(&LabeledDataset::new(filtered, raw.class_names.clone())?)?;
    let (tr, va, te) = split_by_patient(&ds, &SplitSpec { seed, ..cfg.split.clone() })?;
    Ok([tr, va, te])
}

/// Minority-class mean F1 on the test split with and without oversampling.
pub fn run_imbalance_seed(cfg: &ImbalanceConfig, seed: u64) -> Result<ImbalanceOutcome> {
    let [tr, va, te] = prepared_splits(cfg, seed)?;
    let counts = tr.class_counts();
    let majority = *counts.iter().max().expect("classes");
    let minority: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] < majority).collect();
    let x_tr = tr.signal_matrix()?;
    let y_tr = tr.labels();
    let balanced = adasyn(
        &FeatureMatrix::new(x_tr.clone(), Domain::Time)?,
        &y_tr,
        &AdasynConfig { seed, ..cfg.adasyn },
    )?;
    let val = TrainData::new(vec![signals_tensor(&va.signal_matrix()?)], va.labels())?;
    let x_te = signals_tensor(&te.signal_matrix()?);
    let y_te = te.labels();
    let len = x_tr.ncols();
    let score = |x: &Array2<f64>, y: &[usize]| -> Result<f64> {
        let net = build_1dcnn(&cfg.scale, len, tr.n_classes(), seed)?;
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let (mut net, _) = train(net, &TrainData::new(vec![signals_tensor(x)], y.to_vec())?, Some(&val), &tcfg)?;
        let pred = predict_labels(&mut net, &[&x_te])?;
        let (_, m) = evaluate(&y_te, &pred, &tr.class_names)?;
        Ok(minority.iter().map(|&c| m.per_class[c].f1).sum::<f64>() / minority.len().max(1) as f64)
    };
    let f1_without = score(&x_tr, &y_tr)?;
    let f1_with = score(&balanced.features.data, &balanced.labels)?;
    Ok(ImbalanceOutcome { seed, minority, f1_with, f1_without, synthesized: balanced.provenance.len() })
}

#[derive(Debug, Clone, Serialize)]
pub struct ImbalanceSummary {
    pub seeds: Vec<ImbalanceOutcome>,
    pub mean_f1_with: f64,
    pub mean_f1_without: f64,
}

/// Seeds run in parallel; each one is independent and deterministic.
pub fn run_imbalance(cfg: &ImbalanceConfig, seeds: &[u64]) -> Result<ImbalanceSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let seeds: Vec<ImbalanceOutcome> =
        seeds.par_iter().map(|&s| run_imbalance_seed(cfg, s)).collect::<Result<_>>()?;
    let k = seeds.len() as f64;
    Ok(ImbalanceSummary {
        mean_f1_with: seeds.iter().map(|o| o.f1_with).sum::<f64>() / k,
        mean_f1_without: seeds.iter().map(|o| o.f1_without).sum::<f64>() / k,
        seeds,
    })
}
