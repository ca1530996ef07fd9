//! Pairwise relationships between feature domains and fusion-pair selection.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

pub const MIN_ROWS: usize = 8;
pub const DEFAULT_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Upper bound on |corr| for linear independence.
    pub eps: f64,
    /// |corr| above this is linear dependence.
    pub delta: f64,
    /// corr below −gamma is negative dependence.
    pub gamma: f64,
    /// MI (nats) above this is redundancy.
    pub tau_mi: f64,
    pub tau_ortho: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { eps: 0.15, delta: 0.5, gamma: 0.25, tau_mi: 0.42, tau_ortho: 0.3 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eps, self.delta, self.gamma, self.tau_mi, self.tau_ortho];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("all thresholds must be positive".into()));
        }
        if self.eps >= self.delta {
            return Err(Error::Config(format!("eps ({}) must be below delta ({})", self.eps, self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Complementary,
    Redundant,
    Conflicting,
    Neutral,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Complementary => "complementary",
            Verdict::Redundant => "redundant",
            Verdict::Conflicting => "conflicting",
            Verdict::Neutral => "neutral",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub domains: (String, String),
    pub corr: f64,
    pub mi: f64,
    pub ortho: f64,
    pub verdict: Verdict,
}

impl PairScore {
    /// Ranking key used for pair selection.
    pub fn score(&self) -> f64 {
        self.mi + self.ortho
    }
}

/// Standardized copy with constant columns removed.
fn standardized(m: &FeatureMatrix, what: &str) -> Result<Array2<f64>> {
    let (n, d) = m.data.dim();
    let mut cols = Vec::new();
    for j in 0..d {
        let c = m.data.column(j);
        let mean = c.sum() / n as f64;
        let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            cols.push(c.iter().map(|v| (v - mean) / sd).collect::<Vec<f64>>());
        }
    }
    if cols.is_empty() {
        return Err(Error::DegenerateInput(format!("{what}: every column is constant")));
    }
    let k = cols.len();
    Ok(Array2::from_shape_fn((n, k), |(i, j)| cols[j][i]))
}

fn check_rows(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<usize> {
    if a.nrows() != b.nrows() {
        return Err(Error::InvalidInput(format!("row counts differ: {} vs {}", a.nrows(), b.nrows())));
    }
    if a.nrows() < MIN_ROWS {
        return Err(Error::InvalidInput(format!("need at least {MIN_ROWS} rows, got {}", a.nrows())));
    }
    Ok(a.nrows())
}

/// Cross-correlation matrix `ZaᵀZb / n` of standardized columns.
fn cross_correlation(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<Array2<f64>> {
    let n = check_rows(a, b)?;
    let za = standardized(a, "first domain")?;
    let zb = standardized(b, "second domain")?;
    Ok(za.t().dot(&zb) / n as f64)
}

/// Mean entry of the column cross-correlation matrix.
pub fn domain_correlation(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    let c = cross_correlation(a, b)?;
    Ok(c.mean().expect("non-empty"))
}

/// `‖ZaᵀZb‖_F / (n·√(da·db))` on standardized columns.
pub fn domain_orthogonality(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    let c = cross_correlation(a, b)?;
    let frob = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(frob / (c.len() as f64).sqrt())
}

/// Scores on the leading principal component of the standardized columns.
pub fn first_pc_scores(m: &FeatureMatrix) -> Result<Vec<f64>> {
    let z = standardized(m, "principal component")?;
    let (n, d) = z.dim();
    let scores = if d == 1 {
        z.column(0).to_vec()
    } else if d <= n {
        let cov = z.t().dot(&z);
        let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
        let eig = SymmetricEigen::new(cov);
        let top = (0..d)
            .max_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(j.cmp(&i)))
            .expect("d > 0");
        let v = eig.eigenvectors.column(top);
        (0..n).map(|i| (0..d).map(|k| z[[i, k]] * v[k]).sum()).collect()
    } else {
        // Gram trick: leading eigenvector of Z Zᵀ is proportional to the scores
        let g = z.dot(&z.t());
        let g = DMatrix::from_fn(n, n, |i, j| g[[i, j]]);
        let eig = SymmetricEigen::new(g);
        let top = (0..n)
            .max_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(j.cmp(&i)))
            .expect("n > 0");
        let s = eig.eigenvalues[top].max(0.0).sqrt();
        eig.eigenvectors.column(top).iter().map(|u| u * s).collect()
    };
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    if var <= 1e-24 {
        return Err(Error::DegenerateInput("leading component has zero variance".into()));
    }
    Ok(scores)
}

/// Equal-frequency bin index per value; ties are broken by position.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    out
}

/// Plug-in mutual information (nats) between two discretized variables.
pub fn discrete_mi(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * bins + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy * n * n / (pa[x] as f64 * pb[y] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// MI between the two score vectors, binned into equal-frequency bins.
pub fn score_mi(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("score vectors differ in length".into()));
    }
    if bins < 2 || a.len() < MIN_ROWS * bins {
        return Err(Error::InvalidInput(format!(
            "need bins ≥ 2 and at least {} rows for {bins} bins, got {}",
            MIN_ROWS * bins,
            a.len()
        )));
    }
    Ok(discrete_mi(&quantile_bins(a, bins), &quantile_bins(b, bins), bins))
}

/// MI between the first principal components of two domains.
pub fn domain_mi(a: &FeatureMatrix, b: &FeatureMatrix, bins: usize) -> Result<f64> {
    check_rows(a, b)?;
    if bins < 2 || a.nrows() < MIN_ROWS * bins {
        return Err(Error::InvalidInput(format!(
            "need at least {} rows for {bins} bins, got {}",
            MIN_ROWS * bins,
            a.nrows()
        )));
    }
    score_mi(&first_pc_scores(a)?, &first_pc_scores(b)?, bins)
}

/// Precedence: conflicting, redundant, complementary, neutral.
pub fn premise_verdict(corr: f64, mi: f64, ortho: f64, th: &Thresholds) -> Verdict {
    if corr < -th.gamma {
        Verdict::Conflicting
    } else if corr.abs() > th.delta || mi > th.tau_mi {
        Verdict::Redundant
    } else if corr.abs() < th.eps && mi < th.tau_mi && ortho < th.tau_ortho {
        Verdict::Complementary
    } else {
        Verdict::Neutral
    }
}

pub fn score_pair(
    name_a: &str,
    a: &FeatureMatrix,
    name_b: &str,
    b: &FeatureMatrix,
    th: &Thresholds,
    bins: usize,
) -> Result<PairScore> {
    let corr = domain_correlation(a, b)?;
    let mi = domain_mi(a, b, bins)?;
    let ortho = domain_orthogonality(a, b)?;
    Ok(PairScore {
        domains: (name_a.to_string(), name_b.to_string()),
        corr,
        mi,
        ortho,
        verdict: premise_verdict(corr, mi, ortho, th),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityReport {
    pub domains: Vec<String>,
    pub pairs: Vec<PairScore>,
    pub complementary_set: Vec<(String, String)>,
    pub best_pair: Option<(String, String)>,
    /// Domains that are not complementary to both members of the best pair.
    pub excluded: Vec<String>,
    pub thresholds: Thresholds,
    pub bins: usize,
}

fn rank(a: &PairScore, b: &PairScore) -> Ordering {
    a.score()
        .total_cmp(&b.score())
        .then(a.corr.abs().total_cmp(&b.corr.abs()))
        .then_with(|| a.domains.cmp(&b.domains))
}

/// The complementary pair with the lowest `mi + ortho`, tie-broken by |corr|
/// and then by domain names.
pub fn select_best_pair(report: &ComplementarityReport) -> Result<(String, String)> {
    report
        .pairs
        .iter()
        .filter(|p| p.verdict == Verdict::Complementary)
        .min_by(|a, b| rank(a, b))
        .map(|p| p.domains.clone())
        .ok_or(Error::NoComplementaryPair)
}

/// The pair with the lowest `mi + ortho` regardless of verdict.
pub fn lowest_score_pair(report: &ComplementarityReport) -> Option<(String, String)> {
    report.pairs.iter().min_by(|a, b| rank(a, b)).map(|p| p.domains.clone())
}

/// Scores every unordered pair of named views, in input order.
pub fn complementarity_report(
    views: &[(String, &FeatureMatrix)],
    th: &Thresholds,
    bins: usize,
) -> Result<ComplementarityReport> {
    th.validate()?;
    if views.len() < 2 {
        return Err(Error::InvalidInput("need at least two domains".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            pairs.push(score_pair(&views[i].0, views[i].1, &views[j].0, views[j].1, th, bins)?);
        }
    }
    let complementary_set: Vec<(String, String)> =
        pairs.iter().filter(|p| p.verdict == Verdict::Complementary).map(|p| p.domains.clone()).collect();
    let mut report = ComplementarityReport {
        domains: views.iter().map(|v| v.0.clone()).collect(),
        pairs,
        complementary_set,
        best_pair: None,
        excluded: Vec::new(),
        thresholds: *th,
        bins,
    };
    if let Ok(best) = select_best_pair(&report) {
        report.excluded = report
            .domains
            .iter()
            .filter(|d| **d != best.0 && **d != best.1)
            .filter(|d| {
                report.pairs.iter().any(|p| {
                    let touches_best = [&best.0, &best.1].iter().any(|m| **m == p.domains.0 || **m == p.domains.1);
                    let touches_d = p.domains.0 == **d || p.domains.1 == **d;
                    touches_best && touches_d && p.verdict != Verdict::Complementary
                })
            })
            .cloned()
            .collect();
        report.best_pair = Some(best);
    }
    Ok(report)
}

impl ComplementarityReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairScore> {
        self.pairs
            .iter()
            .find(|p| (p.domains.0 == a && p.domains.1 == b) || (p.domains.0 == b && p.domains.1 == a))
    }

    /// `domain_a,domain_b,corr,mi,ortho,verdict` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain_a,domain_b,corr,mi,ortho,verdict\n");
        for p in &self.pairs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.domains.0, p.domains.1, p.corr, p.mi, p.ortho, p.verdict
            ));
        }
        s
    }

    /// Symmetric matrices of corr, MI and orthogonality; the diagonal is null.
    pub fn heatmap(&self) -> Heatmap {
        let k = self.domains.len();
        let mut corr = vec![vec![None; k]; k];
        let mut mi = vec![vec![None; k]; k];
        let mut ortho = vec![vec![None; k]; k];
        let idx = |name: &str| self.domains.iter().position(|d| d == name).expect("known domain");
        for p in &self.pairs {
            let (i, j) = (idx(&p.domains.0), idx(&p.domains.1));
            for (a, b) in [(i, j), (j, i)] {
                corr[a][b] = Some(p.corr);
                mi[a][b] = Some(p.mi);
                ortho[a][b] = Some(p.ortho);
            }
        }
        Heatmap { domains: self.domains.clone(), corr, mi, ortho }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub domains: Vec<String>,
    pub corr: Vec<Vec<Option<f64>>>,
    pub mi: Vec<Vec<Option<f64>>>,
    pub ortho: Vec<Vec<Option<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Domain;

    fn col(v: Vec<f64>) -> FeatureMatrix {
        let n = v.len();
        FeatureMatrix::new(Array2::from_shape_vec((n, 1), v).unwrap(), Domain::Deep).unwrap()
    }

    #[test]
    fn single_column_self_and_negation() {
        let v: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        let a = col(v.clone());
        let neg = col(v.iter().map(|x| -x).collect());
        assert!((domain_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((domain_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((domain_orthogonality(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_scores_reach_log_bins() {
        let v: Vec<f64> = (0..160).map(|i| (i as f64 * 0.37).sin() + i as f64 * 1e-3).collect();
        let a = col(v);
        assert!((domain_mi(&a, &a, 4).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix_is_degenerate() {
        let a = col(vec![1.0; 16]);
        let b = col((0..16).map(|i| i as f64).collect());
        assert!(matches!(domain_correlation(&a, &b), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn too_few_rows_for_bins() {
        let a = col((0..20).map(|i| i as f64).collect());
        assert!(matches!(domain_mi(&a, &a, 16), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn verdict_cells() {
        let th = Thresholds { eps: 0.1, ..Default::default() };
        assert_eq!(premise_verdict(0.07, 0.40, 0.05, &th), Verdict::Complementary);
        let th = Thresholds { gamma: 0.2, ..Default::default() };
        assert_eq!(premise_verdict(-0.30, 0.44, 0.3, &th), Verdict::Conflicting);
        assert_eq!(premise_verdict(0.0, 0.0, 0.0, &Thresholds::default()), Verdict::Complementary);
        assert_eq!(premise_verdict(0.6, 0.1, 0.1, &Thresholds::default()), Verdict::Redundant);
        assert_eq!(premise_verdict(0.2, 0.1, 0.1, &Thresholds::default()), Verdict::Neutral);
    }

    fn score(a: &str, b: &str, corr: f64, mi: f64, ortho: f64) -> PairScore {
        PairScore {
            domains: (a.into(), b.into()),
            corr,
            mi,
            ortho,
            verdict: premise_verdict(corr, mi, ortho, &Thresholds::default()),
        }
    }

    fn report(pairs: Vec<PairScore>) -> ComplementarityReport {
        ComplementarityReport {
            domains: vec!["F".into(), "T".into(), "TF".into()],
            complementary_set: Vec::new(),
            pairs,
            best_pair: None,
            excluded: Vec::new(),
            thresholds: Thresholds::default(),
            bins: 16,
        }
    }

    #[test]
    fn best_pair_prefers_lower_mi() {
        let r = report(vec![score("T", "TF", 0.05, 0.40, 0.2), score("T", "F", 0.05, 0.41, 0.2)]);
        assert_eq!(select_best_pair(&r).unwrap(), ("T".into(), "TF".into()));
    }

    #[test]
    fn exact_tie_goes_to_first_names() {
        let r = report(vec![score("T", "TF", 0.05, 0.1, 0.1), score("F", "T", 0.05, 0.1, 0.1)]);
        assert_eq!(select_best_pair(&r).unwrap(), ("F".into(), "T".into()));
    }

    #[test]
    fn no_candidates_is_an_error() {
        let r = report(vec![score("T", "F", 0.9, 0.1, 0.1)]);
        assert!(matches!(select_best_pair(&r), Err(Error::NoComplementaryPair)));
        assert_eq!(lowest_score_pair(&r), Some(("T".into(), "F".into())));
    }
}
