//! Labeled 1D signal datasets: synthetic generation, image/CSV ingestion,
//! global normalization and patient-grouped splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One preprocessed signal with its label and grouping metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal1D {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub label: usize,
    pub patient_id: String,
    pub source_id: String,
}

impl Signal1D {
    pub fn new(
        samples: Vec<f64>,
        sample_rate: f64,
        label: usize,
        patient_id: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("signal has no samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("signal contains non-finite samples".into()));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::InvalidInput(format!("sample rate {sample_rate} must be positive")));
        }
        Ok(Self {
            samples,
            sample_rate,
            label,
            patient_id: patient_id.into(),
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A set of signals sharing one class vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub signals: Vec<Signal1D>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(signals: Vec<Signal1D>, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidInput("dataset needs at least one class".into()));
        }
        if let Some(s) = signals.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::InvalidInput(format!(
                "signal `{}` has label {} but only {} classes exist",
                s.source_id,
                s.label,
                class_names.len()
            )));
        }
        Ok(Self { signals, class_names })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.signals.iter().map(|s| s.label).collect()
    }

    /// n×C indicator matrix; each row sums to 1.
    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.labels(), self.n_classes())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.signals {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn patient_ids(&self) -> BTreeSet<String> {
        self.signals.iter().map(|s| s.patient_id.clone()).collect()
    }

    /// Signals stacked row-wise. All signals must share one length.
    pub fn signal_matrix(&self) -> Result<Array2<f64>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let len = self.signals[0].len();
        let mut m = Array2::zeros((n, len));
        for (i, s) in self.signals.iter().enumerate() {
            if s.len() != len {
                return Err(Error::InvalidInput(format!(
                    "signal `{}` has length {} but expected {len}",
                    s.source_id,
                    s.len()
                )));
            }
            m.row_mut(i).iter_mut().zip(&s.samples).for_each(|(d, v)| *d = *v);
        }
        Ok(m)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            signals: indices.iter().map(|&i| self.signals[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), n_classes));
    for (i, &l) in labels.iter().enumerate() {
        m[[i, l]] = 1.0;
    }
    m
}

// ---------------------------------------------------------------------------
// Image reduction

/// Bilinear resize with half-pixel centers and edge clamping (the OpenCV
/// `INTER_LINEAR` convention).
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let rows = interp_taps(in_h, out_h);
    let cols = interp_taps(in_w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// For each output coordinate: the two source indices and the weight of the second.
pub(crate) fn interp_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Resizes a grayscale image to `target_len`² and returns its row means.
pub fn image_to_signal(gray: &Array2<f64>, target_len: usize) -> Result<Vec<f64>> {
    let (h, w) = gray.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if target_len == 0 {
        return Err(Error::InvalidInput("target length must be positive".into()));
    }
    if gray.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("image contains non-finite intensities".into()));
    }
    let resized = resize_bilinear(gray, target_len, target_len);
    Ok(resized
        .rows()
        .into_iter()
        .map(|r| r.sum() / target_len as f64)
        .collect())
}

// ---------------------------------------------------------------------------
// Normalization and splitting

/// Divides every sample by the dataset-wide maximum absolute value.
pub fn minmax_normalize(dataset: &LabeledDataset) -> Result<LabeledDataset> {
    let max = dataset
        .signals
        .iter()
        .flat_map(|s| s.samples.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Err(Error::DegenerateInput("all samples are zero".into()));
    }
    let mut out = dataset.clone();
    for s in &mut out.signals {
        s.samples.iter_mut().for_each(|v| *v /= max);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub group_by_patient: bool,
    /// Apportion groups per class so every partition sees every class.
    #[serde(default)]
    pub stratify: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
            group_by_patient: true,
            stratify: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidInput("split fractions must be positive".into()));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` items over `weights`.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps lower indices first on equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Group counts per partition; every partition receives at least one group.
fn partition_counts(n_groups: usize, spec: &SplitSpec) -> Vec<usize> {
    let mut counts = apportion(n_groups, &[spec.train_frac, spec.val_frac, spec.test_frac]);
    for p in 0..3 {
        if counts[p] == 0 {
            let donor = (0..3).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
            counts[donor] -= 1;
            counts[p] += 1;
        }
    }
    counts
}

/// Splits into (train, val, test) so that no patient spans two partitions.
pub fn split_by_patient(
    dataset: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    // group key -> member indices; BTreeMap gives a seed-independent base order
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.signals.iter().enumerate() {
        let key = if spec.group_by_patient {
            s.patient_id.clone()
        } else {
            format!("{i:09}")
        };
        groups.entry(key).or_default().push(i);
    }
    if groups.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 groups to fill train/val/test, found {}",
            groups.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys: Vec<String> = groups.keys().cloned().collect();
    let strata: Vec<Vec<String>> = if spec.stratify {
        // a group's stratum is its most frequent label
        let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for k in &keys {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &groups[k] {
                *counts.entry(dataset.signals[i].label).or_default() += 1;
            }
            let label = counts
                .iter()
                .max_by_key(|(l, c)| (**c, usize::MAX - **l))
                .map(|(l, _)| *l)
                .unwrap();
            by_class.entry(label).or_default().push(k.clone());
        }
        by_class.into_values().collect()
    } else {
        vec![keys]
    };

    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let counts = if stratum.len() >= 3 {
            partition_counts(stratum.len(), spec)
        } else {
            apportion(stratum.len(), &[spec.train_frac, spec.val_frac, spec.test_frac])
        };
        let mut it = stratum.into_iter();
        for (p, &c) in counts.iter().enumerate() {
            for key in it.by_ref().take(c) {
                parts[p].extend(&groups[&key]);
            }
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
    ))
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// One Gaussian bump within a beat; `width` and `offset` are beat fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub amp: f64,
    pub width: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub name: String,
    pub beat_hz: f64,
    pub p: Wave,
    pub qrs: Wave,
    pub t: Wave,
}

impl ClassParams {
    fn with(name: &str, beat_hz: f64, amps: [f64; 3]) -> Self {
        Self {
            name: name.to_string(),
            beat_hz,
            p: Wave { amp: amps[0], width: 0.08, offset: 0.2 },
            qrs: Wave { amp: amps[1], width: 0.02, offset: 0.4 },
            t: Wave { amp: amps[2], width: 0.12, offset: 0.7 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub signals_per_patient: usize,
    pub length: usize,
    pub sample_rate: f64,
    pub classes: Vec<ClassParams>,
    /// Relative share of patients per class; uniform when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub baseline: f64,
    pub noise_sd: f64,
    /// Relative spread of per-patient amplitude and heart-rate factors.
    pub patient_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 40,
            signals_per_patient: 8,
            length: 256,
            sample_rate: 100.0,
            classes: vec![
                ClassParams::with("MI", 1.2, [0.15, 0.8, -0.3]),
                ClassParams::with("HistoryMI", 1.1, [0.12, 0.55, 0.15]),
                ClassParams::with("Abnormal", 1.7, [0.0, 1.2, 0.35]),
                ClassParams::with("Normal", 1.2, [0.15, 1.0, 0.3]),
            ],
            class_weights: None,
            baseline: 0.5,
            noise_sd: 0.05,
            patient_jitter: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 64 {
            return Err(Error::InvalidInput(format!("length {} < 64", self.length)));
        }
        if !(self.noise_sd >= 0.0) || !(self.patient_jitter >= 0.0) || self.patient_jitter >= 1.0 {
            return Err(Error::InvalidInput("noise_sd and patient_jitter must be in range".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::InvalidInput("sample_rate must be positive".into()));
        }
        if self.classes.is_empty() || self.n_patients == 0 || self.signals_per_patient == 0 {
            return Err(Error::InvalidInput("need classes, patients and signals".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes.len() || w.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::InvalidInput(
                    "class_weights must be positive, one per class".into(),
                ));
            }
        }
        for c in &self.classes {
            let widths = [c.p.width, c.qrs.width, c.t.width];
            if !(c.beat_hz > 0.0) || widths.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::InvalidInput(format!("class `{}` has invalid shape", c.name)));
            }
        }
        Ok(())
    }

    /// Patients per class.
    pub fn patients_per_class(&self) -> Vec<usize> {
        let uniform = vec![1.0; self.classes.len()];
        apportion(self.n_patients, self.class_weights.as_deref().unwrap_or(&uniform))
    }
}

fn bump(phase: f64, w: &Wave) -> f64 {
    let d = (phase - w.offset).rem_euclid(1.0);
    let d = d.min(1.0 - d);
    w.amp * (-0.5 * (d / w.width).powi(2)).exp()
}

/// Baseline plus per-beat P/QRS/T bumps plus white noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut signals = Vec::with_capacity(cfg.n_patients * cfg.signals_per_patient);
    let mut patient = 0usize;
    for (label, &count) in cfg.patients_per_class().iter().enumerate() {
        let class = &cfg.classes[label];
        for _ in 0..count {
            let j = cfg.patient_jitter;
            let amp_scale = 1.0 + rng.random_range(-j..=j);
            let rate_scale = 1.0 + rng.random_range(-j..=j);
            let phase0: f64 = rng.random();
            let template: Vec<f64> = (0..cfg.length)
                .map(|i| {
                    let t = i as f64 / cfg.sample_rate;
                    let phase = t * class.beat_hz * rate_scale + phase0;
                    cfg.baseline
                        + amp_scale * (bump(phase, &class.p) + bump(phase, &class.qrs) + bump(phase, &class.t))
                })
                .collect();
            let pid = format!("P{patient:04}");
            for k in 0..cfg.signals_per_patient {
                let samples = if cfg.noise_sd > 0.0 {
                    template.iter().map(|v| v + noise.sample(&mut rng)).collect()
                } else {
                    template.clone()
                };
                let sid = format!("{pid}-{k:03}");
                signals.push(Signal1D::new(samples, cfg.sample_rate, label, pid.clone(), sid)?);
            }
            patient += 1;
        }
    }
    LabeledDataset::new(signals, cfg.classes.iter().map(|c| c.name.clone()).collect())
}

// ---------------------------------------------------------------------------
// On-disk formats

/// Reads an 8-bit binary PGM (P5) as a matrix of intensities.
pub fn read_pgm(bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |m: &str| Error::InvalidInput(format!("PGM: {m}"));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("raster truncated"))?;
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| raster[r * w + c] as f64))
}

pub fn write_pgm(img: &Array2<f64>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

/// Parses `patient_id,label,s0,s1,...` rows.
pub fn parse_signal_csv(text: &str, sample_rate: f64, source: &str) -> Result<Vec<Signal1D>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let bad = |m: &str| Error::InvalidInput(format!("{source}:{}: {m}", line_no + 1));
        let pid = cols.next().ok_or_else(|| bad("missing patient id"))?.trim();
        let label = cols
            .next()
            .ok_or_else(|| bad("missing label"))?
            .trim()
            .parse::<usize>()
            .map_err(|_| bad("label is not an integer"))?;
        let samples = cols
            .map(|c| c.trim().parse::<f64>().map_err(|_| bad("sample is not a number")))
            .collect::<Result<Vec<_>>>()?;
        out.push(Signal1D::new(samples, sample_rate, label, pid, format!("{source}#{line_no}"))?);
    }
    Ok(out)
}

pub fn format_signal_csv(signals: &[Signal1D]) -> String {
    let mut s = String::new();
    for sig in signals {
        s.push_str(&sig.patient_id);
        s.push(',');
        s.push_str(&sig.label.to_string());
        for v in &sig.samples {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub sample_rate: f64,
    pub class_counts: Vec<usize>,
    pub total: usize,
    pub files: Vec<String>,
}

/// Writes one `<class>/signals.csv` per class plus `manifest.json`.
pub fn write_dataset_dir(dataset: &LabeledDataset, dir: &Path) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    let sample_rate = dataset.signals.first().map(|s| s.sample_rate).unwrap_or(1.0);
    for (label, name) in dataset.class_names.iter().enumerate() {
        let class_dir = dir.join(name);
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let members: Vec<Signal1D> = dataset
            .signals
            .iter()
            .filter(|s| s.label == label)
            .cloned()
            .collect();
        let path = class_dir.join("signals.csv");
        fs::write(&path, format_signal_csv(&members)).map_err(|e| Error::io(&path, e))?;
        files.push(format!("{name}/signals.csv"));
    }
    let manifest = DatasetManifest {
        class_names: dataset.class_names.clone(),
        sample_rate,
        class_counts: dataset.class_counts(),
        total: dataset.len(),
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a class-per-subdirectory dataset of CSV signal files and PGM images.
///
/// Class order comes from `manifest.json` when present, otherwise from the
/// sorted subdirectory names. Image files are named `<patient>_<rest>.pgm`;
/// labels of CSV rows must agree with their directory.
pub fn load_dataset_dir(dir: &Path, default_rate: f64, image_len: usize) -> Result<LabeledDataset> {
    let manifest_path = dir.join("manifest.json");
    let (class_names, sample_rate) = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        (m.class_names, m.sample_rate)
    } else {
        let mut names = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if entry.path().is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        (names, default_rate)
    };
    let mut signals = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let class_dir = dir.join(name);
        let mut paths: Vec<_> = fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for path in paths {
            let rel = format!("{name}/{}", path.file_name().unwrap().to_string_lossy());
            match path.extension().and_then(|e| e.to_str()) {
                Some("csv") => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    for s in parse_signal_csv(&text, sample_rate, &rel)? {
                        if s.label != label {
                            return Err(Error::InvalidInput(format!(
                                "{}: label {} inside class directory `{name}`",
                                s.source_id, s.label
                            )));
                        }
                        signals.push(s);
                    }
                }
                Some("pgm") => {
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    let img = read_pgm(&bytes)?;
                    let stem = path.file_stem().unwrap().to_string_lossy();
                    let pid = stem.split('_').next().unwrap_or(&stem).to_string();
                    let samples = image_to_signal(&img, image_len)?;
                    signals.push(Signal1D::new(samples, sample_rate, label, pid, rel)?);
                }
                _ => {}
            }
        }
    }
    LabeledDataset::new(signals, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(values: &[&[f64]]) -> LabeledDataset {
        let signals = values
            .iter()
            .enumerate()
            .map(|(i, v)| Signal1D::new(v.to_vec(), 1.0, 0, format!("p{i}"), format!("s{i}")).unwrap())
            .collect();
        LabeledDataset::new(signals, vec!["a".into()]).unwrap()
    }

    #[test]
    fn image_row_means_on_sized_input() {
        let img = array![[0.0, 2.0], [4.0, 6.0]];
        assert_eq!(image_to_signal(&img, 2).unwrap(), vec![1.0, 5.0]);
    }

    #[test]
    fn constant_image_gives_constant_signal() {
        let img = Array2::from_elem((5, 9), 3.25);
        let s = image_to_signal(&img, 7).unwrap();
        assert!(s.iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn empty_image_rejected() {
        let img = Array2::<f64>::zeros((0, 3));
        assert!(matches!(image_to_signal(&img, 4), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn normalize_divides_by_global_max() {
        let ds = tiny(&[&[0.0, 2.0], &[1.0, 4.0]]);
        let out = minmax_normalize(&ds).unwrap();
        assert_eq!(out.signals[0].samples, vec![0.0, 0.5]);
        assert_eq!(out.signals[1].samples, vec![0.25, 1.0]);
        let again = minmax_normalize(&out).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let ds = tiny(&[&[0.0, 0.0]]);
        assert!(matches!(minmax_normalize(&ds), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1]), vec![8, 1, 1]);
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
        assert_eq!(apportion(0, &[1.0, 2.0]), vec![0, 0]);
    }

    #[test]
    fn split_ten_patients() {
        let cfg = SynthConfig { n_patients: 10, signals_per_patient: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let (tr, va, te) = split_by_patient(&ds, &SplitSpec::default()).unwrap();
        assert_eq!(tr.patient_ids().len(), 8);
        assert_eq!(va.patient_ids().len(), 1);
        assert_eq!(te.patient_ids().len(), 1);
        assert_eq!(tr.len() + va.len() + te.len(), ds.len());
    }

    #[test]
    fn split_needs_three_patients() {
        let cfg = SynthConfig { n_patients: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(matches!(
            split_by_patient(&ds, &SplitSpec::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn stratified_split_covers_every_class() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        let spec = SplitSpec { stratify: true, seed: 3, ..Default::default() };
        let (tr, va, te) = split_by_patient(&ds, &spec).unwrap();
        for part in [&tr, &va, &te] {
            assert!(part.class_counts().iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let spec = SplitSpec { train_frac: 0.5, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn noiseless_patient_signals_identical() {
        let cfg = SynthConfig { noise_sd: 0.0, n_patients: 4, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.signals[0].patient_id, ds.signals[1].patient_id);
        assert_eq!(ds.signals[0].samples, ds.signals[1].samples);
    }

    #[test]
    fn synthetic_is_pure_in_config() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: cfg.seed + 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn patients_hold_one_class() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for s in &ds.signals {
            let l = *seen.entry(s.patient_id.clone()).or_insert(s.label);
            assert_eq!(l, s.label);
        }
    }

    #[test]
    fn larger_qrs_gives_larger_peak_to_peak() {
        let mut cfg = SynthConfig { noise_sd: 0.0, patient_jitter: 0.0, n_patients: 2, ..Default::default() };
        cfg.classes.truncate(2);
        cfg.classes[1] = cfg.classes[0].clone();
        cfg.classes[1].name = "big".into();
        cfg.classes[1].qrs.amp *= 2.0;
        let ds = generate_synthetic(&cfg).unwrap();
        let p2p = |l: usize| {
            let s = ds.signals.iter().find(|s| s.label == l).unwrap();
            let max = s.samples.iter().cloned().fold(f64::MIN, f64::max);
            let min = s.samples.iter().cloned().fold(f64::MAX, f64::min);
            max - min
        };
        assert!(p2p(1) > p2p(0));
    }

    #[test]
    fn default_classes_have_distinct_variance() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        let mut means = vec![0.0; 4];
        let counts = ds.class_counts();
        for s in &ds.signals {
            let m = s.samples.iter().sum::<f64>() / s.len() as f64;
            let v = s.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64;
            means[s.label] += v / counts[s.label] as f64;
        }
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((means[i] - means[j]).abs() > 1e-3, "{means:?}");
            }
        }
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        let oh = ds.one_hot();
        assert_eq!(oh.dim(), (ds.len(), 4));
        assert!(oh.rows().into_iter().all(|r| r.sum() == 1.0));
    }

    #[test]
    fn pgm_round_trip() {
        let img = Array2::from_shape_fn((3, 5), |(r, c)| (r * 40 + c * 7) as f64);
        let bytes = write_pgm(&img);
        assert_eq!(read_pgm(&bytes).unwrap(), img);
        assert!(read_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(read_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn pgm_header_comments_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x0a\x14";
        assert_eq!(read_pgm(bytes).unwrap(), array![[10.0, 20.0]]);
    }

    #[test]
    fn csv_parse_errors_name_the_line() {
        let err = parse_signal_csv("p1,0,1,2\np2,x,1\n", 1.0, "f.csv").unwrap_err();
        assert!(err.to_string().contains("f.csv:2"));
    }
}
