//! Utterances, JSON-lines manifests, 16-bit WAV I/O and the synthetic
//! multi-domain corpus generator.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// One audio segment, the unit of selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Amplitudes in [-1, 1].
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub domain: Option<String>,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub duration_s: f64,
    #[serde(default)]
    pub domain: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id {:?}", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domain_of(&self, id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .and_then(|e| e.domain.as_deref())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Read a JSON-lines manifest. Blank lines are ignored; entries keep file order.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Manifest::new(entries)
}

/// Load every manifest entry's audio. Relative paths resolve against
/// `base`; all files must share one sample rate.
pub fn load_utterances(manifest: &Manifest, base: &Path) -> Result<Vec<Utterance>> {
    let mut out: Vec<Utterance> = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let path = if e.path.is_absolute() {
            e.path.clone()
        } else {
            base.join(&e.path)
        };
        let mut utt = read_audio(&path)?;
        if let Some(first) = out.first() {
            if first.sample_rate != utt.sample_rate {
                return Err(Error::Validation(format!(
                    "{} has sample rate {} but {} has {}",
                    e.id, utt.sample_rate, first.id, first.sample_rate
                )));
            }
        }
        utt.id = e.id.clone();
        utt.domain = e.domain.clone();
        out.push(utt);
    }
    Ok(out)
}

/// Read a mono 16-bit PCM WAV file; samples are scaled by 1/32768.
pub fn read_audio(path: &Path) -> Result<Utterance> {
    let unsupported = |reason: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| unsupported(e.to_string()))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Utterance {
        id,
        samples,
        sample_rate: spec.sample_rate,
        domain: None,
    })
}

pub fn write_wav(path: &Path, utt: &Utterance) -> Result<()> {
    std::fs::write(path, encode_wav(utt)?).map_err(|e| Error::io(path, e))
}

/// The bytes `write_wav` would write.
pub fn encode_wav(utt: &Utterance) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: utt.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| Error::Validation(format!("{}: cannot encode WAV: {e}", utt.id));
    let mut buf = std::io::Cursor::new(Vec::new());
    let mut w = hound::WavWriter::new(&mut buf, spec).map_err(wrap)?;
    for &x in &utt.samples {
        let v = (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)?;
    Ok(buf.into_inner())
}

/// Generative recipe for one synthetic domain: colored noise through a
/// two-pole resonator, plus a harmonic comb, under a slow amplitude envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub resonance_hz: f64,
    /// Pole radius of the resonator, in (0, 1).
    pub resonance_radius: f64,
    /// One-pole coloring of the excitation noise, in (-1, 1). 0 is white.
    pub noise_color: f64,
    pub f0_hz: f64,
    pub harmonics: usize,
    pub harmonic_decay: f64,
    /// Comb level relative to the noise (both unit RMS before mixing).
    pub harmonic_gain: f64,
    pub modulation_hz: f64,
}

impl DomainSpec {
    /// `count` recipes drawn from `seed`, spread across the band so that
    /// resonances and pitches do not overlap. Named "A", "B", ...
    pub fn defaults(count: usize, sample_rate: u32, seed: u64) -> Vec<DomainSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nyquist = sample_rate as f64 / 2.0;
        let mut pitch_slots: Vec<usize> = (0..count).collect();
        pitch_slots.shuffle(&mut rng);
        (0..count)
            .map(|i| {
                let slot = (i as f64 + rng.gen_range(0.3..0.7)) / count as f64;
                let pitch = (pitch_slots[i] as f64 + rng.gen_range(0.3..0.7)) / count as f64;
                DomainSpec {
                    name: domain_name(i),
                    resonance_hz: nyquist * (0.08 + 0.8 * slot),
                    resonance_radius: rng.gen_range(0.88..0.97),
                    noise_color: rng.gen_range(-0.6..0.9),
                    f0_hz: 80.0 + 260.0 * pitch,
                    harmonics: rng.gen_range(3..10),
                    harmonic_decay: rng.gen_range(0.5..0.9),
                    harmonic_gain: rng.gen_range(0.4..1.2),
                    modulation_hz: rng.gen_range(2.0..7.0),
                }
            })
            .collect()
    }
}

fn domain_name(i: usize) -> String {
    let mut name = String::new();
    let mut n = i;
    loop {
        name.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    name
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: Vec<DomainSpec>,
    pub utterances_per_domain: usize,
    pub duration_range_s: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
    /// Prepended to every generated id, so corpora drawn from the same
    /// domains with different seeds do not collide.
    #[serde(default)]
    pub id_prefix: String,
}

impl SynthSpec {
    pub fn new(domains: usize, utterances_per_domain: usize, duration_range_s: (f64, f64), seed: u64) -> Self {
        Self {
            domains: DomainSpec::defaults(domains, DEFAULT_SAMPLE_RATE, seed),
            utterances_per_domain,
            duration_range_s,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed,
            id_prefix: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range_s;
        if self.domains.is_empty() {
            return Err(Error::Config("synthetic corpus needs at least one domain".into()));
        }
        if self.utterances_per_domain == 0 {
            return Err(Error::Config("utterances_per_domain must be > 0".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid duration range ({lo}, {hi})")));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        if (lo * self.sample_rate as f64).round() < 1.0 {
            return Err(Error::Config("minimum duration is shorter than one sample".into()));
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate domain name {:?}", d.name)));
            }
            if !(d.resonance_radius > 0.0 && d.resonance_radius < 1.0) || d.noise_color.abs() >= 1.0 {
                return Err(Error::Config(format!("domain {:?} has an unstable filter", d.name)));
            }
        }
        Ok(())
    }
}

/// Generate a balanced corpus; the manifest points at `<id>.wav`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Vec<Utterance>, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.duration_range_s;
    let mut utterances = Vec::with_capacity(spec.domains.len() * spec.utterances_per_domain);
    for domain in &spec.domains {
        for i in 0..spec.utterances_per_domain {
            let dur = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let n = (dur * spec.sample_rate as f64).round() as usize;
            utterances.push(Utterance {
                id: format!("{}{}-{i:04}", spec.id_prefix, domain.name),
                samples: render(domain, n, spec.sample_rate, &mut rng),
                sample_rate: spec.sample_rate,
                domain: Some(domain.name.clone()),
            });
        }
    }
    let manifest = Manifest::new(
        utterances
            .iter()
            .map(|u| ManifestEntry {
                id: u.id.clone(),
                path: PathBuf::from(format!("{}.wav", u.id)),
                duration_s: u.duration_s(),
                domain: u.domain.clone(),
            })
            .collect(),
    )?;
    Ok((utterances, manifest))
}

fn render(d: &DomainSpec, n: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let fs = rate as f64;
    let a1 = 2.0 * d.resonance_radius * (TAU * d.resonance_hz / fs).cos();
    let a2 = -d.resonance_radius * d.resonance_radius;
    let mut noise = Vec::with_capacity(n);
    let (mut w, mut y1, mut y2) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        w = e + d.noise_color * w;
        let y = w + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        noise.push(y);
    }
    normalize_rms(&mut noise);

    let f0 = d.f0_hz * rng.gen_range(0.97..1.03);
    let partials: Vec<(f64, f64, f64)> = (1..=d.harmonics)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < fs / 2.0)
        .enumerate()
        .map(|(h, f)| (f, d.harmonic_decay.powi(h as i32), rng.gen_range(0.0..TAU)))
        .collect();
    let mut comb: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            partials
                .iter()
                .map(|&(f, amp, phase)| amp * (TAU * f * t + phase).sin())
                .sum()
        })
        .collect();
    normalize_rms(&mut comb);

    let mod_phase = rng.gen_range(0.0..TAU);
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.6 + 0.4 * (TAU * d.modulation_hz * t + mod_phase).sin();
            env * (noise[i] + d.harmonic_gain * comb[i])
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    x.into_iter().map(|v| v as f32).collect()
}

fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Replace the audio with white noise of the same RMS (clipped to [-1, 1]).
pub fn noise_swap(utt: &mut Utterance, seed: u64) {
    let rms = (utt.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
        / utt.samples.len().max(1) as f64)
        .sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &mut utt.samples {
        let e: f64 = rng.sample(StandardNormal);
        *s = (e * rms).clamp(-1.0, 1.0) as f32;
    }
}
