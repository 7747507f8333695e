//! Frame-level MFCC features for the GMM baseline.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::envelope::{read_envelope, write_envelope};
use crate::error::{Error, Result};

pub const FEATURE_FORMAT: &str = "clrsel-features";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub mel_bands: usize,
    pub cepstra: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            mel_bands: 23,
            cepstra: 13,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// `T x D` features; row t starts at sample `t * hop`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f64>,
    pub frame_len: usize,
    pub hop: usize,
}

/// Number of frames for `len` samples, or `None` if the signal is shorter
/// than one frame.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> Option<usize> {
    (len >= frame_len && frame_len > 0 && hop > 0).then(|| 1 + (len - frame_len) / hop)
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Split into Hamming-windowed frames.
pub fn frame_signal(samples: &[f32], frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if hop == 0 || frame_len == 0 {
        return Err(Error::Config("frame length and hop must be >= 1".into()));
    }
    let count = frame_count(samples.len(), frame_len, hop).ok_or(Error::EmptyFeature {
        len: samples.len(),
        frame_len,
    })?;
    let window = hamming(frame_len);
    Ok((0..count)
        .map(|t| {
            samples[t * hop..t * hop + frame_len]
                .iter()
                .zip(&window)
                .map(|(&x, &w)| x as f64 * w)
                .collect()
        })
        .collect())
}

/// One-sided power spectrum via a zero-padded FFT.
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    nfft: usize,
}

impl PowerSpectrum {
    pub fn new(nfft: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(nfft),
            nfft,
        }
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    /// `|X_k|^2` for k in `0..=nfft/2`.
    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.nfft)
            .collect();
        self.fft.process(&mut buf);
        buf[..=self.nfft / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist,
/// `bands x (nfft/2 + 1)`.
pub fn mel_filterbank(bands: usize, nfft: usize, sample_rate: u32) -> Array2<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let bins = nfft / 2 + 1;
    Array2::from_shape_fn((bands, bins), |(m, k)| {
        let f = k as f64 * sample_rate as f64 / nfft as f64;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f <= mid {
            (f - lo) / (mid - lo)
        } else if f > mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    })
}

/// Orthonormal DCT-II of `x`, first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(m, &v)| v * (PI * k as f64 * (m as f64 + 0.5) / n).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Log mel energies (before the DCT), one row per frame.
pub fn log_mel(utt: &Utterance, config: &FeatureConfig) -> Result<Array2<f64>> {
    let frame_len = config.frame_len(utt.sample_rate);
    let hop = config.hop(utt.sample_rate);
    let frames = frame_signal(&utt.samples, frame_len, hop)?;
    let spectrum = PowerSpectrum::new(frame_len.next_power_of_two());
    let bank = mel_filterbank(config.mel_bands, spectrum.nfft(), utt.sample_rate);
    let mut out = Array2::zeros((frames.len(), config.mel_bands));
    for (t, frame) in frames.iter().enumerate() {
        let power = ndarray::Array1::from(spectrum.compute(frame));
        let energies = bank.dot(&power);
        for (m, e) in energies.iter().enumerate() {
            out[[t, m]] = e.max(config.log_floor).ln();
        }
    }
    Ok(out)
}

/// Power spectrum, mel filterbank, log, DCT-II; then per-utterance mean
/// normalization of every coefficient.
pub fn mfcc_lite(utt: &Utterance, config: &FeatureConfig) -> Result<FeatureMatrix> {
    if config.cepstra == 0 || config.cepstra > config.mel_bands {
        return Err(Error::Config(format!(
            "cepstra must be in 1..={}, got {}",
            config.mel_bands, config.cepstra
        )));
    }
    let logmel = log_mel(utt, config)?;
    let mut frames = Array2::zeros((logmel.nrows(), config.cepstra));
    for (t, row) in logmel.outer_iter().enumerate() {
        let c = dct2(row.as_slice().unwrap(), config.cepstra);
        frames.row_mut(t).assign(&ndarray::Array1::from(c));
    }
    let mean = frames.mean_axis(Axis(0)).unwrap();
    frames -= &mean;
    Ok(FeatureMatrix {
        frames,
        frame_len: config.frame_len(utt.sample_rate),
        hop: config.hop(utt.sample_rate),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DumpHeader {
    format: String,
    version: u32,
    shape: [usize; 2],
    frame_len: usize,
    hop: usize,
    config: FeatureConfig,
}

pub fn write_features(path: &Path, features: &FeatureMatrix, config: &FeatureConfig) -> Result<()> {
    let header = DumpHeader {
        format: FEATURE_FORMAT.into(),
        version: FEATURE_VERSION,
        shape: [features.frames.nrows(), features.frames.ncols()],
        frame_len: features.frame_len,
        hop: features.hop,
        config: config.clone(),
    };
    let values: Vec<f32> = features.frames.iter().map(|&v| v as f32).collect();
    write_envelope(path, &header, [values.as_slice()])
}

pub fn read_features(path: &Path) -> Result<(FeatureMatrix, FeatureConfig)> {
    let (header, payload): (DumpHeader, _) = read_envelope(path, FEATURE_FORMAT, FEATURE_VERSION)?;
    let frames = Array2::from_shape_vec(header.shape, payload.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((
        FeatureMatrix {
            frames,
            frame_len: header.frame_len,
            hop: header.hop,
        },
        header.config,
    ))
}
