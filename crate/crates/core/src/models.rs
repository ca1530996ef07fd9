//! Architecture builders, deep-feature extraction and branch fusion.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{Domain, FeatureMatrix, Scalogram};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, pair_penalty, Activation, LayerSpec, Net, NetBuilder, Padding, Tensor};

pub const MIN_FILTERS: usize = 4;
pub const MIN_UNITS: usize = 8;

/// Width and attention knobs applied to the reference architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchScale {
    pub width_mult: f64,
    pub heads: usize,
    pub key_dim: usize,
    /// Inner feed-forward width of the attention block; 512·width_mult if unset.
    pub ff_units: Option<usize>,
    /// Adapter and fusion width; 256·width_mult if unset.
    pub fusion_units: Option<usize>,
    pub batchnorm: bool,
}

impl Default for ArchScale {
    fn default() -> Self {
        Self { width_mult: 0.125, heads: 2, key_dim: 16, ff_units: None, fusion_units: None, batchnorm: true }
    }
}

impl ArchScale {
    /// Full reference widths.
    pub fn reference() -> Self {
        Self { width_mult: 1.0, heads: 12, key_dim: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(Error::Config(format!("width_mult must lie in (0, 1], got {}", self.width_mult)));
        }
        if self.heads == 0 || self.key_dim == 0 {
            return Err(Error::Build("attention heads and key_dim must be positive".into()));
        }
        if self.ff_units == Some(0) || self.fusion_units == Some(0) {
            return Err(Error::Build("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn filters(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(MIN_FILTERS)
    }

    pub fn units(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(MIN_UNITS)
    }

    pub fn fusion_width(&self) -> usize {
        self.fusion_units.unwrap_or_else(|| self.units(256))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    OneD,
    TwoD,
    Transformer,
    Hybrid,
    Mlp,
}

/// Tap used when a trained branch is reused inside a fusion network.
pub fn branch_tap(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::TwoD => "flatten",
        _ => "hidden",
    }
}

fn conv1d(filters: usize, kernel_size: usize, l2: f64) -> LayerSpec {
    LayerSpec::Conv1D { filters, kernel_size, padding: Padding::Same, activation: Activation::Relu, l2 }
}

fn head(b: &mut NetBuilder, n_classes: usize) -> Result<usize> {
    b.then("logits", LayerSpec::dense(n_classes, Activation::Linear))?;
    b.then("softmax", LayerSpec::Softmax)
}

fn check_classes(n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Build(format!("need at least 2 classes, got {n_classes}")));
    }
    Ok(())
}

/// Three conv blocks over a `(len, 1)` signal, then a dense hidden layer.
pub fn build_1dcnn(scale: &ArchScale, len: usize, n_classes: usize, seed: u64) -> Result<Net> {
    scale.validate()?;
    check_classes(n_classes)?;
    let mut b = NetBuilder::new(seed);
    b.input("signal", &[len, 1])?;
    for (i, (base, k)) in [(64, 7), (128, 7), (256, 5)].into_iter().enumerate() {
        b.then(&format!("conv{}", i + 1), conv1d(scale.filters(base), k, 1e-3))?;
        if scale.batchnorm {
            b.then(&format!("bn{}", i + 1), LayerSpec::batch_norm())?;
        }
        b.then(&format!("pool{}", i + 1), LayerSpec::MaxPool1D { pool: 2 })?;
    }
    b.then("flatten", LayerSpec::Flatten)?;
    let hidden = b.then(
        "hidden",
        LayerSpec::Dense { units: scale.units(512), activation: Activation::Relu, l1: 0.0, l2: 1e-3 },
    )?;
    b.then("dropout", LayerSpec::Dropout { rate: 0.5 })?;
    let out = head(&mut b, n_classes)?;
    let mut net = b.finish(out)?;
    net.taps.insert("hidden".into(), hidden);
    Ok(net)
}

/// Four conv blocks over an `(h, w, 1)` image, then a dense hidden layer.
pub fn build_2dcnn(scale: &ArchScale, h: usize, w: usize, n_classes: usize, seed: u64) -> Result<Net> {
    scale.validate()?;
    check_classes(n_classes)?;
    if h < 16 || w < 16 {
        return Err(Error::shape("input", format!("{h}×{w} is too small for four 2×2 poolings")));
    }
    let mut b = NetBuilder::new(seed);
    b.input("scalogram", &[h, w, 1])?;
    for (i, base) in [32, 64, 128, 256].into_iter().enumerate() {
        let n = i + 1;
        b.then(
            &format!("conv{n}"),
            LayerSpec::Conv2D {
                filters: scale.filters(base),
                kernel_size: [3, 3],
                padding: Padding::Same,
                activation: Activation::Relu,
                l2: 0.0,
            },
        )?;
        if scale.batchnorm {
            b.then(&format!("bn{n}"), LayerSpec::batch_norm())?;
        }
        b.then(&format!("pool{n}"), LayerSpec::MaxPool2D { pool: 2 })?;
        if n == 2 {
            b.then("block_dropout", LayerSpec::Dropout { rate: 0.2 })?;
        }
    }
    let flat = b.then("flatten", LayerSpec::Flatten)?;
    let hidden = b.then("hidden", LayerSpec::dense(scale.units(512), Activation::Relu))?;
    b.then("dropout", LayerSpec::Dropout { rate: 0.5 })?;
    let out = head(&mut b, n_classes)?;
    let mut net = b.finish(out)?;
    net.taps.insert("flatten".into(), flat);
    net.taps.insert("hidden".into(), hidden);
    Ok(net)
}

/// Conv front end over a `(bins, 1)` spectrum, one self-attention encoder
/// block, then a dense hidden layer.
pub fn build_cnn_transformer(scale: &ArchScale, bins: usize, n_classes: usize, seed: u64) -> Result<Net> {
    scale.validate()?;
    check_classes(n_classes)?;
    let mut b = NetBuilder::new(seed);
    b.input("spectrum", &[bins, 1])?;
    b.then("conv", conv1d(scale.filters(128), 5, 5e-5))?;
    let x = b.then("pool", LayerSpec::MaxPool1D { pool: 2 })?;
    let model_dim = b.shape_of(x)[1];
    let attn = b.add("mha", LayerSpec::MultiHeadAttention { heads: scale.heads, key_dim: scale.key_dim }, &[x])?;
    let r1 = b.add("add1", LayerSpec::Add, &[x, attn])?;
    let n1 = b.add("norm1", LayerSpec::layer_norm(), &[r1])?;
    let ff_units = scale.ff_units.unwrap_or_else(|| scale.units(512));
    let f1 = b.add("ff1", LayerSpec::dense(ff_units, Activation::Relu), &[n1])?;
    let f2 = b.add("ff2", LayerSpec::dense(model_dim, Activation::Linear), &[f1])?;
    let r2 = b.add("add2", LayerSpec::Add, &[n1, f2])?;
    b.add("norm2", LayerSpec::layer_norm(), &[r2])?;
    b.then("flatten", LayerSpec::Flatten)?;
    let hidden = b.then(
        "hidden",
        LayerSpec::Dense { units: scale.units(1024), activation: Activation::Relu, l1: 0.0, l2: 5e-5 },
    )?;
    b.then("dropout", LayerSpec::Dropout { rate: 0.1 })?;
    let out = head(&mut b, n_classes)?;
    let mut net = b.finish(out)?;
    net.taps.insert("hidden".into(), hidden);
    Ok(net)
}

/// Two-layer perceptron encoder for flat feature vectors.
pub fn build_mlp(scale: &ArchScale, dim: usize, n_classes: usize, seed: u64) -> Result<Net> {
    scale.validate()?;
    check_classes(n_classes)?;
    let mut b = NetBuilder::new(seed);
    b.input("features", &[dim])?;
    b.then("dense1", LayerSpec::dense(scale.units(256), Activation::Relu))?;
    b.then("flatten", LayerSpec::Flatten)?;
    let hidden = b.then("hidden", LayerSpec::dense(scale.units(256), Activation::Relu))?;
    b.then("dropout", LayerSpec::Dropout { rate: 0.2 })?;
    let out = head(&mut b, n_classes)?;
    let mut net = b.finish(out)?;
    net.taps.insert("hidden".into(), hidden);
    Ok(net)
}

/// One pretrained branch and the tap its trunk ends at.
pub struct Branch<'a> {
    pub name: String,
    pub net: &'a Net,
    pub tap: String,
}

/// Intermediate fusion: each branch trunk feeds Flatten → Dropout 0.5 →
/// Dense(relu) adapter; adapters are concatenated and classified by
/// Dense(relu, L1 0.01) → Dropout 0.5 → Dense → Softmax. Trunk parameters are
/// frozen unless `finetune` is set.
pub fn build_hybrid(branches: &[Branch], scale: &ArchScale, finetune: bool, seed: u64) -> Result<Net> {
    scale.validate()?;
    if !(2..=3).contains(&branches.len()) {
        return Err(Error::Build(format!("fusion takes 2 or 3 branches, got {}", branches.len())));
    }
    let n_classes = branches[0].net.output_width();
    if let Some(br) = branches.iter().find(|br| br.net.output_width() != n_classes) {
        return Err(Error::shape(
            &br.name,
            format!("branch predicts {} classes, expected {n_classes}", br.net.output_width()),
        ));
    }
    let width = scale.fusion_width();
    let mut b = NetBuilder::new(seed);
    let mut adapters = Vec::new();
    let mut trunk_nodes = Vec::new();
    for br in branches {
        if br.name.contains('/') || br.name.is_empty() {
            return Err(Error::Build(format!("invalid branch name `{}`", br.name)));
        }
        let tap = br.net.tap(&br.tap)?;
        // ancestors of the tap, in original order
        let mut keep = vec![false; tap + 1];
        keep[tap] = true;
        for id in (0..=tap).rev() {
            if keep[id] {
                for &i in &br.net.nodes[id].inputs {
                    keep[i] = true;
                }
            }
        }
        let mut map = BTreeMap::new();
        for (id, node) in br.net.nodes.iter().enumerate().take(tap + 1) {
            if !keep[id] {
                continue;
            }
            let name = format!("{}.{}", br.name, node.name);
            let new_id = match &node.spec {
                LayerSpec::Input { shape } => b.input(&name, shape)?,
                _ => {
                    let ins: Vec<usize> = node.inputs.iter().map(|i| map[i]).collect();
                    b.import(node, &ins, &name)?
                }
            };
            map.insert(id, new_id);
            trunk_nodes.push(new_id);
        }
        let n = &br.name;
        let flat = b.add(&format!("{n}.fuse_flatten"), LayerSpec::Flatten, &[map[&tap]])?;
        let drop = b.add(&format!("{n}.fuse_dropout"), LayerSpec::Dropout { rate: 0.5 }, &[flat])?;
        adapters.push(b.add(&format!("{n}.adapter"), LayerSpec::dense(width, Activation::Relu), &[drop])?);
    }
    let cat = b.add("concat", LayerSpec::Concat, &adapters)?;
    let fusion = b.add(
        "fusion",
        LayerSpec::Dense { units: width, activation: Activation::Relu, l1: 0.01, l2: 0.0 },
        &[cat],
    )?;
    b.add("fusion_dropout", LayerSpec::Dropout { rate: 0.5 }, &[fusion])?;
    let out = head(&mut b, n_classes)?;
    let mut net = b.finish(out)?;
    for id in trunk_nodes {
        net.set_trainable(id, finetune);
    }
    net.taps.insert("fusion".into(), fusion);
    for (br, &a) in branches.iter().zip(&adapters) {
        net.taps.insert(format!("{}.adapter", br.name), a);
    }
    net.fusion_taps = adapters;
    Ok(net)
}

/// Penultimate activations of a trained network, one row per input.
#[derive(Debug, Clone)]
pub struct DeepFeatures {
    pub matrix: FeatureMatrix,
    pub source: ModelKind,
    pub layer_tag: String,
}

/// Eval-mode activations at `tap`.
pub fn extract_deep_features(net: &mut Net, inputs: &[&Tensor], tap: &str, source: ModelKind) -> Result<DeepFeatures> {
    let node = net.tap(tap)?;
    let acts = net.predict_node(inputs, node, 128)?;
    let d = acts.row_len();
    let names = (0..d).map(|k| format!("{tap}{k}")).collect();
    let data = Array2::from_shape_vec((acts.batch(), d), acts.into_data())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let matrix = FeatureMatrix::new(data, Domain::Deep)?.with_names(names)?;
    Ok(DeepFeatures { matrix, source, layer_tag: tap.to_string() })
}

/// Value of the fusion objective on one batch, split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplementaryLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub l_mi: f64,
    pub l_ortho: f64,
}

/// Cross-entropy plus `lambda1·L_MI + lambda2·L_Ortho` between two branch
/// feature batches, with gradients w.r.t. the logits and both feature blocks.
pub fn complementary_loss(
    probs: &Tensor,
    labels: &[usize],
    fi: &Tensor,
    fj: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<(ComplementaryLoss, Tensor, Tensor, Tensor)> {
    let (ce, dlogits) = cross_entropy(probs, labels)?;
    let p = pair_penalty(fi, fj, lambda1, lambda2)?;
    let total = ce + lambda1 * p.l_mi + lambda2 * p.l_ortho;
    Ok((
        ComplementaryLoss { total, cross_entropy: ce, l_mi: p.l_mi, l_ortho: p.l_ortho },
        dlogits,
        Tensor::new(fi.shape().to_vec(), p.grad_i)?,
        Tensor::new(fj.shape().to_vec(), p.grad_j)?,
    ))
}

/// `(n, len, 1)` tensor from row-major signals.
pub fn sequence_tensor(m: &FeatureMatrix) -> Tensor {
    let (n, d) = m.data.dim();
    Tensor::new(vec![n, d, 1], m.data.iter().cloned().collect()).expect("sized")
}

/// `(n, d)` tensor from a feature matrix.
pub fn flat_tensor(m: &FeatureMatrix) -> Tensor {
    Tensor::from_array2(&m.data)
}

/// `(n, rows, cols, 1)` tensor from scalograms of one shape.
pub fn image_tensor(scalograms: &[Scalogram]) -> Result<Tensor> {
    let first = scalograms.first().ok_or_else(|| Error::InvalidInput("no scalograms".into()))?;
    let (h, w) = first.power.dim();
    let mut data = Vec::with_capacity(scalograms.len() * h * w);
    for s in scalograms {
        if s.power.dim() != (h, w) {
            return Err(Error::InvalidInput("scalograms differ in shape".into()));
        }
        data.extend(s.power.iter());
    }
    Tensor::new(vec![scalograms.len(), h, w, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_counts_follow_width() {
        let s = ArchScale::reference();
        assert_eq!([64, 128, 256].map(|b| s.filters(b)), [64, 128, 256]);
        let s = ArchScale::default();
        assert_eq!([64, 128, 256].map(|b| s.filters(b)), [8, 16, 32]);
        assert_eq!([32, 64, 128, 256].map(|b| s.filters(b)), [4, 8, 16, 32]);
    }

    #[test]
    fn reference_attention_config() {
        let s = ArchScale::reference();
        assert_eq!((s.heads, s.key_dim), (12, 256));
        let d = ArchScale::default();
        assert_eq!((d.heads, d.key_dim), (2, 16));
    }

    #[test]
    fn tiny_image_rejected() {
        let err = build_2dcnn(&ArchScale::default(), 8, 8, 4, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_heads_is_a_build_error() {
        let s = ArchScale { heads: 0, ..Default::default() };
        assert!(matches!(build_cnn_transformer(&s, 65, 4, 0), Err(Error::Build(_))));
    }
}
