//! Band-pass preprocessing and the three signal-domain transforms.
//!
//! All transforms are pure functions of their inputs. The FFT is backed by
//! `rustfft`; the band-pass is a zero-phase spectral mask with raised-cosine
//! edges, and scalograms come from an analytic Morlet CWT evaluated in the
//! frequency domain.

use std::f64::consts::PI;
use std::fmt;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{interp_taps, resize_bilinear, LabeledDataset, Signal1D};

/// Representation space a feature matrix was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    Time,
    Frequency,
    TimeFrequency,
    Deep,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Domain::Time => "time",
            Domain::Frequency => "frequency",
            Domain::TimeFrequency => "time_frequency",
            Domain::Deep => "deep",
        };
        f.write_str(s)
    }
}

/// n×d per-sample features tagged with their domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub domain: Domain,
    pub feature_names: Option<Vec<String>>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, domain: Domain) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!("feature matrix is {n}x{d}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature matrix has non-finite entries".into()));
        }
        Ok(Self { data, domain, feature_names: None })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} feature names for {} columns",
                names.len(),
                self.ncols()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select(Axis(0), idx),
            domain: self.domain,
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.feature_names
            .clone()
            .unwrap_or_else(|| (0..self.ncols()).map(|j| format!("f{j}")).collect())
    }

    /// Header row of feature names, then one row per sample.
    pub fn to_csv(&self) -> String {
        let mut s = self.names().join(",");
        s.push('\n');
        for row in self.data.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, domain: Domain) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty feature CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut values = Vec::new();
        let mut n = 0;
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("row {}: bad number `{c}`", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} cells, header has {}",
                    i + 1,
                    row.len(),
                    header.len()
                )));
            }
            values.extend(row);
            n += 1;
        }
        let data = Array2::from_shape_vec((n, header.len()), values)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        FeatureMatrix::new(data, domain)?.with_names(header)
    }
}

// ---------------------------------------------------------------------------
// Band-pass

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub transition_hz: f64,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        Self { low_hz: 0.5, high_hz: 45.0, transition_hz: 0.25 }
    }
}

impl BandpassSpec {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let nyquist = sample_rate / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(Error::InvalidInput(format!(
                "band {}–{} Hz does not fit inside (0, {nyquist}) Hz",
                self.low_hz, self.high_hz
            )));
        }
        if !(self.transition_hz > 0.0) {
            return Err(Error::InvalidInput("transition width must be positive".into()));
        }
        Ok(())
    }

    /// Mask gain at frequency `f` (Hz, nonnegative). Unit inside the band,
    /// raised-cosine tapers just outside each edge, zero elsewhere and at DC.
    pub fn gain(&self, f: f64) -> f64 {
        let tw = self.transition_hz;
        if f <= 0.0 {
            0.0
        } else if f >= self.low_hz && f <= self.high_hz {
            1.0
        } else if f < self.low_hz && f > self.low_hz - tw {
            0.5 * (1.0 - (PI * (f - (self.low_hz - tw)) / tw).cos())
        } else if f > self.high_hz && f < self.high_hz + tw {
            0.5 * (1.0 + (PI * (f - self.high_hz) / tw).cos())
        } else {
            0.0
        }
    }
}

fn forward_fft(buf: &mut [Complex<f64>]) {
    FftPlanner::new().plan_fft_forward(buf.len()).process(buf);
}

fn inverse_fft(buf: &mut [Complex<f64>]) {
    FftPlanner::new().plan_fft_inverse(buf.len()).process(buf);
    let n = buf.len() as f64;
    buf.iter_mut().for_each(|c| *c /= n);
}

/// Zero-phase spectral band-pass over the signal's own length.
pub fn bandpass_samples(samples: &[f64], sample_rate: f64, spec: &BandpassSpec) -> Result<Vec<f64>> {
    spec.validate(sample_rate)?;
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    forward_fft(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c *= spec.gain(bin as f64 * sample_rate / n as f64);
    }
    inverse_fft(&mut buf);
    Ok(buf.iter().map(|c| c.re).collect())
}

pub fn bandpass(signal: &Signal1D, spec: &BandpassSpec) -> Result<Signal1D> {
    let samples = bandpass_samples(&signal.samples, signal.sample_rate, spec)?;
    Ok(Signal1D { samples, ..signal.clone() })
}

// ---------------------------------------------------------------------------
// Frequency features

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Magnitudes of the `fft_bins`-point DFT of the zero-padded or truncated
/// signal, keeping the non-redundant half `fft_bins/2 + 1`.
pub fn fft_features(samples: &[f64], fft_bins: usize) -> Result<Vec<f64>> {
    if fft_bins < 2 {
        return Err(Error::InvalidInput(format!("fft_bins {fft_bins} < 2")));
    }
    let mut buf = vec![Complex::new(0.0, 0.0); fft_bins];
    for (b, &v) in buf.iter_mut().zip(samples) {
        b.re = v;
    }
    forward_fft(&mut buf);
    Ok(buf[..fft_bins / 2 + 1].iter().map(|c| c.norm()).collect())
}

/// Column means and population standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    /// 0 marks a constant column, which is centered but not scaled.
    pub sds: Vec<f64>,
}

pub const SD_FLOOR: f64 = 1e-12;

impl Standardizer {
    pub fn fit(data: &Array2<f64>) -> Result<Self> {
        let n = data.nrows();
        if n < 2 {
            return Err(Error::InvalidInput("standardization needs at least 2 rows".into()));
        }
        let mut means = Vec::with_capacity(data.ncols());
        let mut sds = Vec::with_capacity(data.ncols());
        for col in data.columns() {
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            means.push(m);
            sds.push(if sd < SD_FLOOR { 0.0 } else { sd });
        }
        Ok(Self { means, sds })
    }

    pub fn transform(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.means.len() {
            return Err(Error::InvalidInput(format!(
                "standardizer fitted on {} columns, got {}",
                self.means.len(),
                data.ncols()
            )));
        }
        let mut out = data.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, sd) = (self.means[j], self.sds[j]);
            col.mapv_inplace(|v| if sd == 0.0 { v - m } else { (v - m) / sd });
        }
        Ok(out)
    }
}

pub fn standardize(m: &FeatureMatrix) -> Result<(FeatureMatrix, Vec<f64>, Vec<f64>)> {
    let s = Standardizer::fit(&m.data)?;
    let data = s.transform(&m.data)?;
    Ok((
        FeatureMatrix { data, domain: m.domain, feature_names: m.feature_names.clone() },
        s.means,
        s.sds,
    ))
}

// ---------------------------------------------------------------------------
// Time features

pub const TIME_FEATURES: [&str; 5] = ["mean", "variance", "peak_to_peak", "skewness", "kurtosis"];

/// [mean, variance, peak-to-peak, skewness, excess kurtosis] of one window.
/// Higher moments of a zero-variance window are 0.
pub fn window_moments(w: &[f64]) -> [f64; 5] {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let (skew, kurt) = if var < SD_FLOOR * SD_FLOOR {
        (0.0, 0.0)
    } else {
        let m3 = w.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let m4 = w.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        (m3 / var.powf(1.5), m4 / (var * var) - 3.0)
    };
    [mean, var, max - min, skew, kurt]
}

/// Window moments concatenated over windows; a trailing partial window is dropped.
pub fn time_features(samples: &[f64], window_len: usize, hop: usize) -> Result<Vec<f64>> {
    if window_len == 0 || window_len > samples.len() {
        return Err(Error::InvalidInput(format!(
            "window length {window_len} does not fit a signal of {} samples",
            samples.len()
        )));
    }
    if hop == 0 {
        return Err(Error::InvalidInput("hop must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_len <= samples.len() {
        out.extend(window_moments(&samples[start..start + window_len]));
        start += hop;
    }
    Ok(out)
}

pub fn time_feature_matrix(dataset: &LabeledDataset, window_len: usize, hop: usize) -> Result<FeatureMatrix> {
    let rows = dataset
        .signals
        .iter()
        .map(|s| time_features(&s.samples, window_len, hop))
        .collect::<Result<Vec<_>>>()?;
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("signals of unequal length".into()));
    }
    let data = Array2::from_shape_vec((rows.len(), d), rows.concat())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let names = (0..d / 5)
        .flat_map(|w| TIME_FEATURES.iter().map(move |f| format!("w{w}_{f}")))
        .collect();
    FeatureMatrix::new(data, Domain::Time)?.with_names(names)
}

// ---------------------------------------------------------------------------
// Scalograms

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalogramSpec {
    pub n_scales: usize,
    pub out_rows: usize,
    pub out_cols: usize,
    pub min_hz: f64,
    pub max_hz: f64,
    pub omega0: f64,
    /// Divide by the per-scalogram maximum.
    pub normalize: bool,
}

impl Default for ScalogramSpec {
    fn default() -> Self {
        Self {
            n_scales: 32,
            out_rows: 32,
            out_cols: 32,
            min_hz: 0.5,
            max_hz: 45.0,
            omega0: 6.0,
            normalize: true,
        }
    }
}

/// Scale × time CWT magnitude. Row 0 is the lowest pseudo-frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalogram {
    pub power: Array2<f64>,
    pub scales_hz: Vec<f64>,
    pub signal_ref: String,
}

impl Scalogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.power.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// 8-bit PGM with high frequencies at the top.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.power.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let mut flipped = self.power.clone();
        flipped.invert_axis(Axis(0));
        crate::ingest::write_pgm(&flipped.mapv(|v| v * scale))
    }
}

/// Log-spaced pseudo-frequencies spanning `[min_hz, max_hz]`, clipped to Nyquist.
pub fn scale_frequencies(spec: &ScalogramSpec, sample_rate: f64) -> Vec<f64> {
    let hi = spec.max_hz.min(sample_rate / 2.0);
    let (la, lb) = (spec.min_hz.ln(), hi.ln());
    let n = spec.n_scales;
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// |CWT| at each pseudo-frequency, full time resolution (freqs × len).
///
/// The analytic Morlet is applied in the frequency domain as
/// `2·exp(-(s·ω − ω0)²/2)` for ω > 0, with scale `s = ω0 / (2π f)`. A
/// sinusoid of amplitude `a` at frequency `f` therefore has magnitude `a` at
/// the row whose pseudo-frequency is `f`.
pub fn cwt_magnitude(samples: &[f64], sample_rate: f64, freqs: &[f64], omega0: f64) -> Array2<f64> {
    let n = samples.len();
    let m = next_pow2(2 * n);
    let mut spectrum = vec![Complex::new(0.0, 0.0); m];
    for (c, &v) in spectrum.iter_mut().zip(samples) {
        c.re = v;
    }
    forward_fft(&mut spectrum);
    let mut out = Array2::zeros((freqs.len(), n));
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for (row, &f) in freqs.iter().enumerate() {
        let s = omega0 / (2.0 * PI * f);
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if k == 0 || k >= m.div_ceil(2) {
                Complex::new(0.0, 0.0)
            } else {
                let omega = 2.0 * PI * k as f64 * sample_rate / m as f64;
                spectrum[k] * (2.0 * (-0.5 * (s * omega - omega0).powi(2)).exp())
            };
        }
        inverse_fft(&mut buf);
        for (t, c) in buf[..n].iter().enumerate() {
            out[[row, t]] = c.norm();
        }
    }
    out
}

pub fn scalogram(signal: &Signal1D, spec: &ScalogramSpec) -> Result<Scalogram> {
    if spec.n_scales < 2 || spec.out_rows < 2 || spec.out_cols < 2 {
        return Err(Error::InvalidInput("scalogram needs at least 2 scales and a 2x2 output".into()));
    }
    if signal.len() < 8 {
        return Err(Error::InvalidInput(format!("signal of {} samples is too short", signal.len())));
    }
    if !(spec.min_hz > 0.0 && spec.min_hz < spec.max_hz.min(signal.sample_rate / 2.0)) {
        return Err(Error::InvalidInput("scalogram frequency range is empty".into()));
    }
    let freqs = scale_frequencies(spec, signal.sample_rate);
    let full = cwt_magnitude(&signal.samples, signal.sample_rate, &freqs, spec.omega0);
    let mut power = resize_bilinear(&full, spec.out_rows, spec.out_cols);
    let scales_hz = interp_taps(freqs.len(), spec.out_rows)
        .into_iter()
        .map(|(a, b, w)| (freqs[a].ln() * (1.0 - w) + freqs[b].ln() * w).exp())
        .collect();
    if spec.normalize {
        let max = power.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            power.mapv_inplace(|v| v / max);
        }
    }
    Ok(Scalogram { power, scales_hz, signal_ref: signal.source_id.clone() })
}

// ---------------------------------------------------------------------------
// Domain views

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    /// Defaults to the next power of two at or above the signal length.
    #[serde(default)]
    pub fft_bins: Option<usize>,
    #[serde(default)]
    pub scalogram: ScalogramSpec,
}


/// Row-aligned views of one dataset.
#[derive(Debug, Clone)]
pub struct DomainViews {
    pub time: FeatureMatrix,
    pub frequency: FeatureMatrix,
    pub time_frequency: Vec<Scalogram>,
}

impl DomainViews {
    pub fn len(&self) -> usize {
        self.time.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds all three views. The frequency standardizer is fitted here unless
/// one (fitted on a training partition) is supplied.
pub fn build_domain_views(
    dataset: &LabeledDataset,
    cfg: &ViewConfig,
    scaler: Option<&Standardizer>,
) -> Result<(DomainViews, Standardizer)> {
    let time = FeatureMatrix::new(dataset.signal_matrix()?, Domain::Time)?;
    let bins = cfg.fft_bins.unwrap_or_else(|| next_pow2(time.ncols()));
    let rows = dataset
        .signals
        .par_iter()
        .map(|s| fft_features(&s.samples, bins))
        .collect::<Result<Vec<_>>>()?;
    let d = bins / 2 + 1;
    let raw = Array2::from_shape_vec((rows.len(), d), rows.concat())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let fitted = match scaler {
        Some(s) => s.clone(),
        None => Standardizer::fit(&raw)?,
    };
    let names = (0..d).map(|k| format!("bin{k}")).collect();
    let frequency = FeatureMatrix::new(fitted.transform(&raw)?, Domain::Frequency)?.with_names(names)?;
    let time_frequency = dataset
        .signals
        .par_iter()
        .map(|s| scalogram(s, &cfg.scalogram))
        .collect::<Result<Vec<_>>>()?;
    Ok((DomainViews { time, frequency, time_frequency }, fitted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(samples: Vec<f64>, fs: f64) -> Signal1D {
        Signal1D::new(samples, fs, 0, "p", "s").unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        assert_eq!(fft_features(&[1.0, 0.0, 0.0, 0.0], 4).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_is_pure_dc() {
        let m = fft_features(&[2.5; 4], 4).unwrap();
        assert!((m[0] - 10.0).abs() < 1e-12 && m[1].abs() < 1e-12 && m[2].abs() < 1e-12);
    }

    #[test]
    fn fft_bins_below_two_rejected() {
        assert!(fft_features(&[1.0], 1).is_err());
    }

    #[test]
    fn constant_signal_bandpasses_to_zero() {
        let out = bandpass(&sig(vec![3.0; 200], 100.0), &BandpassSpec::default()).unwrap();
        assert!(out.samples.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn band_above_nyquist_rejected() {
        let err = bandpass(&sig(vec![1.0; 64], 80.0), &BandpassSpec::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn gain_profile() {
        let b = BandpassSpec::default();
        assert_eq!(b.gain(0.0), 0.0);
        assert_eq!(b.gain(10.0), 1.0);
        assert_eq!(b.gain(45.0), 1.0);
        assert_eq!(b.gain(46.0), 0.0);
        let mid = b.gain(45.125);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_point_standardization() {
        let m = FeatureMatrix::new(ndarray::array![[1.0, 5.0], [3.0, 5.0]], Domain::Frequency).unwrap();
        let (z, means, sds) = standardize(&m).unwrap();
        assert_eq!(z.data, ndarray::array![[-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(means, vec![2.0, 5.0]);
        assert_eq!(sds, vec![1.0, 0.0]);
    }

    #[test]
    fn hand_computed_window() {
        let f = window_moments(&[0.0, 1.0, 0.0, -1.0]);
        assert_eq!(&f[..3], &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn constant_window_moments() {
        assert_eq!(window_moments(&[2.0; 6]), [2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_longer_than_signal_rejected() {
        assert!(time_features(&[1.0, 2.0], 3, 1).is_err());
        assert!(time_features(&[1.0, 2.0], 2, 0).is_err());
    }

    #[test]
    fn partial_trailing_window_dropped() {
        let f = time_features(&[1.0; 10], 4, 4).unwrap();
        assert_eq!(f.len(), 10);
    }

    #[test]
    fn zero_signal_zero_scalogram() {
        let s = scalogram(&sig(vec![0.0; 64], 100.0), &ScalogramSpec::default()).unwrap();
        assert!(s.power.iter().all(|&v| v == 0.0));
        assert_eq!(s.power.dim(), (32, 32));
    }

    #[test]
    fn scalogram_frequencies_monotone_and_clipped() {
        let spec = ScalogramSpec::default();
        let f = scale_frequencies(&spec, 60.0);
        assert!((f[0] - 0.5).abs() < 1e-12);
        assert!((f.last().unwrap() - 30.0).abs() < 1e-9);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn feature_csv_round_trip() {
        let m = FeatureMatrix::new(ndarray::array![[0.1, -2.0], [1e-7, 3.5]], Domain::Deep).unwrap();
        let back = FeatureMatrix::from_csv(&m.to_csv(), Domain::Deep).unwrap();
        assert_eq!(back.data, m.data);
        assert_eq!(back.names(), vec!["f0", "f1"]);
    }
}
