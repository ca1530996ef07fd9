//! ADASYN oversampling and fidelity checks for the synthetic rows it adds.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdasynConfig {
    pub k: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for AdasynConfig {
    fn default() -> Self {
        Self { k: 5, beta: 1.0, seed: 0 }
    }
}

impl AdasynConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "ADASYN needs k >= 1 and 0 < beta <= 1 (got k={}, beta={})",
                self.k, self.beta
            )));
        }
        Ok(())
    }
}

/// How one synthetic row was made: `base + lambda * (neighbor - base)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct AdasynOutput {
    /// Original rows first, synthetic rows appended.
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub synth_counts: Vec<usize>,
    /// One entry per appended row, in order.
    pub provenance: Vec<Provenance>,
    /// Minority classes with a single member, left untouched.
    pub skipped: Vec<usize>,
}

impl AdasynOutput {
    pub fn n_original(&self) -> usize {
        self.labels.len() - self.provenance.len()
    }

    pub fn synthetic_mask(&self) -> Vec<bool> {
        let n0 = self.n_original();
        (0..self.labels.len()).map(|i| i >= n0).collect()
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Indices of the `k` nearest candidates to row `i` (excluding `i`).
/// Distance ties go to the lower index.
fn nearest(data: &Array2<f64>, i: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let row = data.row(i);
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (sq_dist(row, data.row(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Adaptive synthetic oversampling of every class smaller than the largest.
pub fn adasyn(features: &FeatureMatrix, labels: &[usize], cfg: &AdasynConfig) -> Result<AdasynOutput> {
    cfg.validate()?;
    let data = &features.data;
    let n = data.nrows();
    if labels.len() != n {
        return Err(Error::InvalidInput(format!("{} labels for {n} rows", labels.len())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    if members.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(Error::InvalidInput("ADASYN needs at least two classes".into()));
    }
    let majority = members.iter().map(Vec::len).max().unwrap();
    let everyone: Vec<usize> = (0..n).collect();
    let k_all = cfg.k.min(n - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut synth_rows: Vec<Vec<f64>> = Vec::new();
    let mut synth_labels = Vec::new();
    let mut provenance = Vec::new();
    let mut synth_counts = vec![0; n_classes];
    let mut skipped = Vec::new();

    for (class, idx) in members.iter().enumerate() {
        let m_s = idx.len();
        if m_s == 0 || m_s >= majority {
            continue;
        }
        if m_s < 2 {
            warn!("ADASYN: class {class} has a single sample; skipped");
            skipped.push(class);
            continue;
        }
        let g_total = (majority - m_s) as f64 * cfg.beta;
        let ratios: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let nn = nearest(data, i, &everyone, k_all);
                nn.iter().filter(|&&j| labels[j] != class).count() as f64 / k_all as f64
            })
            .collect();
        let total: f64 = ratios.iter().sum();
        let k_class = cfg.k.min(m_s - 1);
        for (pos, &i) in idx.iter().enumerate() {
            // a class with no boundary points falls back to uniform weights
            let weight = if total > 0.0 { ratios[pos] / total } else { 1.0 / m_s as f64 };
            let g = (weight * g_total).round() as usize;
            if g == 0 {
                continue;
            }
            let neigh = nearest(data, i, idx, k_class);
            for _ in 0..g {
                let z = neigh[rng.random_range(0..neigh.len())];
                let lambda: f64 = rng.random();
                let base = data.row(i);
                let other = data.row(z);
                synth_rows.push(base.iter().zip(other.iter()).map(|(a, b)| a + lambda * (b - a)).collect());
                synth_labels.push(class);
                provenance.push(Provenance { base: i, neighbor: z, lambda });
                synth_counts[class] += 1;
            }
        }
    }

    let d = data.ncols();
    let mut out = Array2::zeros((n + synth_rows.len(), d));
    out.slice_mut(ndarray::s![..n, ..]).assign(data);
    for (r, row) in synth_rows.iter().enumerate() {
        out.row_mut(n + r).iter_mut().zip(row).for_each(|(o, v)| *o = *v);
    }
    let mut all_labels = labels.to_vec();
    all_labels.extend(synth_labels);
    Ok(AdasynOutput {
        features: FeatureMatrix { data: out, domain: features.domain, feature_names: features.feature_names.clone() },
        labels: all_labels,
        synth_counts,
        provenance,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Fidelity

/// Per-class spread of real vs synthetic rows plus the Fréchet distance
/// between the two populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub classes: Vec<String>,
    pub real_variance: Vec<f64>,
    pub synthetic_variance: Vec<f64>,
    pub fid: f64,
    pub synth_counts: Vec<usize>,
    /// Classes whose real or synthetic subset had fewer than two members.
    #[serde(default)]
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassVariance {
    pub real: Vec<f64>,
    pub synthetic: Vec<f64>,
    pub flagged: Vec<usize>,
}

/// Mean over feature dimensions of the per-dimension population variance.
pub fn mean_dim_variance(rows: &Array2<f64>) -> f64 {
    let var = rows.var_axis(Axis(0), 0.0);
    var.mean().unwrap_or(0.0)
}

/// Class-wise spread for the real and synthetic subsets separately.
pub fn intra_class_variance(
    features: &FeatureMatrix,
    labels: &[usize],
    synthetic: &[bool],
    n_classes: usize,
) -> Result<ClassVariance> {
    if labels.len() != features.nrows() || synthetic.len() != features.nrows() {
        return Err(Error::InvalidInput("labels/mask do not match the feature rows".into()));
    }
    let mut real = vec![0.0; n_classes];
    let mut synth = vec![0.0; n_classes];
    let mut flagged = Vec::new();
    for c in 0..n_classes {
        let pick = |want: bool| -> Vec<usize> {
            (0..labels.len()).filter(|&i| labels[i] == c && synthetic[i] == want).collect()
        };
        let (r, s) = (pick(false), pick(true));
        if r.is_empty() {
            return Err(Error::InvalidInput(format!("class {c} has no real members")));
        }
        if r.len() < 2 || s.len() < 2 {
            flagged.push(c);
        }
        if r.len() >= 2 {
            real[c] = mean_dim_variance(&features.data.select(Axis(0), &r));
        }
        if s.len() >= 2 {
            synth[c] = mean_dim_variance(&features.data.select(Axis(0), &s));
        }
    }
    Ok(ClassVariance { real, synthetic: synth, flagged })
}

fn mean_cov(data: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = data.dim();
    let mean = DVector::from_iterator(d, data.mean_axis(Axis(0)).unwrap());
    let mut cov = DMatrix::zeros(d, d);
    for row in data.rows() {
        let c = DVector::from_iterator(d, row.iter().zip(mean.iter()).map(|(x, m)| x - m));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub const COV_RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two row sets.
pub fn frechet_distance(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidInput("Fréchet distance needs at least 2 rows per side".into()));
    }
    let d = a.ncols();
    let (mu_a, mut cov_a) = mean_cov(&a.data);
    let (mu_b, mut cov_b) = mean_cov(&b.data);
    for i in 0..d {
        cov_a[(i, i)] += COV_RIDGE;
        cov_b[(i, i)] += COV_RIDGE;
    }
    let root_a = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&root_a * &cov_b * &root_a));
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let trace = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace).max(0.0))
}

/// Full fidelity report for an ADASYN output in the given feature space.
pub fn fidelity_report(out: &AdasynOutput, class_names: &[String]) -> Result<FidelityReport> {
    let mask = out.synthetic_mask();
    let cv = intra_class_variance(&out.features, &out.labels, &mask, class_names.len())?;
    let real_idx: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let synth_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let fid = if synth_idx.len() >= 2 {
        frechet_distance(&out.features.select_rows(&real_idx), &out.features.select_rows(&synth_idx))?
    } else {
        0.0
    };
    let mut synth_counts = out.synth_counts.clone();
    synth_counts.resize(class_names.len(), 0);
    Ok(FidelityReport {
        classes: class_names.to_vec(),
        real_variance: cv.real,
        synthetic_variance: cv.synthetic,
        fid,
        synth_counts,
        flagged: cv.flagged,
    })
}

/// Radar-chart data: one axis per class, a real and a synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarChart {
    pub axes: Vec<String>,
    pub series: Vec<RadarSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarSeries {
    pub name: String,
    pub values: Vec<f64>,
}

pub fn radar_export(report: &FidelityReport) -> RadarChart {
    RadarChart {
        axes: report.classes.clone(),
        series: vec![
            RadarSeries { name: "real".into(), values: report.real_variance.clone() },
            RadarSeries { name: "synthetic".into(), values: report.synthetic_variance.clone() },
        ],
    }
}

/// Augmented rows as CSV with a trailing `synthetic` 0/1 column.
pub fn augmented_csv(out: &AdasynOutput) -> String {
    let mask = out.synthetic_mask();
    let mut s = out.features.names().join(",");
    s.push_str(",label,synthetic\n");
    for (i, row) in out.features.data.rows().into_iter().enumerate() {
        for v in row {
            s.push_str(&v.to_string());
            s.push(',');
        }
        s.push_str(&format!("{},{}\n", out.labels[i], mask[i] as u8));
    }
    s
}
