use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clipped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Variance ridge used when standardizing features within a batch.
pub const BATCH_STD_EPS: f64 = 1e-8;

/// Smallest batch for which the correlation penalties are evaluated.
pub const MIN_CORR_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LossKind {
    CrossEntropy,
    Complementary { lambda1: f64, lambda2: f64 },
}

impl LossKind {
    /// True when the extra penalty terms contribute nothing.
    pub fn is_plain(&self) -> bool {
        match *self {
            LossKind::CrossEntropy => true,
            LossKind::Complementary { lambda1, lambda2 } => lambda1 == 0.0 && lambda2 == 0.0,
        }
    }
}

/// Mean cross-entropy of probability rows against integer labels, plus the
/// gradient with respect to the pre-softmax logits, `(p − y) / B`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = probs.batch();
    let c = probs.row_len();
    if labels.len() != b {
        return Err(Error::InvalidInput(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
    }
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.data()[i * c + y];
        // f64::max would swallow a NaN here
        loss -= if p.is_nan() { f64::NAN } else { p.max(PROB_FLOOR).ln() };
        grad[i * c + y] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= b as f64);
    Ok((loss / b as f64, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Redundancy penalties between two batches of branch features.
#[derive(Debug, Clone)]
pub struct PairPenalty {
    /// Mean squared cross-correlation between columns.
    pub l_mi: f64,
    /// ‖Ziᵀ Zj‖_F / (B·√(di·dj)) on batch-standardized features.
    pub l_ortho: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
}

/// Column-standardizes a row-major `b × d` block. Returns z and 1/σ per column.
fn batch_standardize(f: &[f64], b: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in f.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; d];
    for row in f.chunks_exact(d) {
        for k in 0..d {
            var[k] += (row[k] - mean[k]).powi(2);
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / b as f64 + BATCH_STD_EPS).sqrt()).collect();
    let mut z = Vec::with_capacity(f.len());
    for row in f.chunks_exact(d) {
        for k in 0..d {
            z.push((row[k] - mean[k]) * inv[k]);
        }
    }
    (z, inv)
}

/// Pulls a gradient on standardized values back to the raw features.
fn standardize_backward(dz: &[f64], z: &[f64], inv: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for (gr, zr) in dz.chunks_exact(d).zip(z.chunks_exact(d)) {
        for k in 0..d {
            s1[k] += gr[k];
            s2[k] += gr[k] * zr[k];
        }
    }
    let bn = b as f64;
    let mut out = Vec::with_capacity(dz.len());
    for (gr, zr) in dz.chunks_exact(d).zip(z.chunks_exact(d)) {
        for k in 0..d {
            out.push(inv[k] * (gr[k] - s1[k] / bn - zr[k] * s2[k] / bn));
        }
    }
    out
}

/// Both penalty terms and their weighted gradient
/// `lambda1·∂L_MI + lambda2·∂L_Ortho` with respect to the raw features.
pub fn pair_penalty(fi: &Tensor, fj: &Tensor, lambda1: f64, lambda2: f64) -> Result<PairPenalty> {
    let b = fi.batch();
    if fj.batch() != b {
        return Err(Error::InvalidInput("feature batches disagree".into()));
    }
    if b < MIN_CORR_BATCH {
        return Err(Error::InvalidInput(format!(
            "batch of {b} is too small for correlation penalties (need {MIN_CORR_BATCH})"
        )));
    }
    let (di, dj) = (fi.row_len(), fj.row_len());
    let (zi, inv_i) = batch_standardize(fi.data(), b, di);
    let (zj, inv_j) = batch_standardize(fj.data(), b, dj);
    // C = Ziᵀ Zj / B
    let mut cross = vec![0.0; di * dj];
    super::tensor::matmul_tn_acc(&zi, &zj, &mut cross, b, di, dj);
    cross.iter_mut().for_each(|c| *c /= b as f64);
    let pairs = (di * dj) as f64;
    let sumsq: f64 = cross.iter().map(|c| c * c).sum();
    let l_mi = sumsq / pairs;
    let norm = sumsq.sqrt();
    let l_ortho = norm / pairs.sqrt();
    // dL/dC, then through C = Ziᵀ Zj / B
    let ortho_scale = if norm > 1e-12 { lambda2 / (norm * pairs.sqrt()) } else { 0.0 };
    let dc: Vec<f64> = cross.iter().map(|c| (2.0 * lambda1 / pairs + ortho_scale) * c / b as f64).collect();
    let mut dzi = vec![0.0; b * di];
    super::tensor::matmul_nt_acc(&zj, &dc, &mut dzi, b, dj, di);
    let mut dzj = vec![0.0; b * dj];
    super::tensor::matmul_acc(&zi, &dc, &mut dzj, b, di, dj);
    Ok(PairPenalty {
        l_mi,
        l_ortho,
        grad_i: standardize_backward(&dzi, &zi, &inv_i, b, di),
        grad_j: standardize_backward(&dzj, &zj, &inv_j, b, dj),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_gradient_is_p_minus_y_over_b() {
        let p = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8]).unwrap();
        let (loss, g) = cross_entropy(&p, &[1, 2]).unwrap();
        assert!((loss - (-(0.5f64.ln() + 0.8f64.ln()) / 2.0)).abs() < 1e-12);
        let want = [0.1, -0.25, 0.15, 0.05, 0.05, -0.1];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_single_column_is_fully_redundant() {
        let f = Tensor::new(vec![6, 1], vec![1.0, 3.0, -2.0, 0.5, 4.0, -1.0]).unwrap();
        let p = pair_penalty(&f, &f, 1.0, 1.0).unwrap();
        assert!((p.l_mi - 1.0).abs() < 1e-6);
        assert!((p.l_ortho - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_batch_rejected() {
        let f = Tensor::zeros(&[3, 2]);
        assert!(pair_penalty(&f, &f, 1.0, 1.0).is_err());
    }
}
