//! Synthetic speech and noise, SNR-controlled mixing and mixture manifests.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{load_wav, save_wav, Waveform};

pub const SNR_RANGE_DB: (f64, f64) = (-10.0, 15.0);
/// Frames quieter than this (relative to the squared peak) are not active.
pub const ACTIVE_THRESHOLD_DB: f64 = -40.0;
pub const PEAK_LIMIT: f64 = 0.99;
pub const SOURCE_PEAK: f64 = 0.5;
/// Mixing grid: clean and scaled noise are rounded to multiples of this so
/// their sum is exact.
const MIX_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

fn active_frame_len(sample_rate: u32) -> usize {
    (sample_rate as usize / 100).max(1)
}

/// Mean square over 10 ms frames whose mean square is within 40 dB of the
/// squared peak amplitude; `None` for an all-zero signal.
pub fn active_power(x: &[f64], sample_rate: u32) -> Option<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    let floor = peak * peak * 10f64.powf(ACTIVE_THRESHOLD_DB / 10.0);
    let (mut energy, mut count) = (0.0, 0usize);
    for frame in x.chunks(active_frame_len(sample_rate)) {
        let e: f64 = frame.iter().map(|v| v * v).sum();
        if e / frame.len() as f64 >= floor {
            energy += e;
            count += frame.len();
        }
    }
    (count > 0).then(|| energy / count as f64)
}

/// A clean/noise/noisy triple after mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub clean: Waveform,
    /// The noise as it appears in `noisy`.
    pub noise: Waveform,
    pub noisy: Waveform,
    /// Gain applied to the raw noise before any peak rescale.
    pub gain: f64,
    /// Common factor applied to all three (1 when no rescale was needed).
    pub peak_scale: f64,
}

fn quantize(v: f64) -> f64 {
    (v / MIX_QUANTUM).round() * MIX_QUANTUM
}

/// Mixes `noise` into `clean` at `snr_db` (active-sample powers), then scales
/// all three signals down together if the mixture peak exceeds 0.99.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidConfig(format!("snr_db = {snr_db}")));
    }
    if clean.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!(
            "clean has {} samples, noise {}",
            clean.len(),
            noise.len()
        )));
    }
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::ConfigMismatch(format!(
            "clean at {} Hz, noise at {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    let px = active_power(&clean.samples, clean.sample_rate).ok_or_else(|| Error::SilentInput("clean".into()))?;
    let pd = active_power(&noise.samples, noise.sample_rate).ok_or_else(|| Error::SilentInput("noise".into()))?;
    let gain = (px / (pd * 10f64.powf(snr_db / 10.0))).sqrt();
    let x: Vec<f64> = clean.samples.iter().map(|v| quantize(*v)).collect();
    let d: Vec<f64> = noise.samples.iter().map(|v| quantize(gain * v)).collect();
    let mut y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rate = clean.sample_rate;
    let mut out = Mixture {
        clean: Waveform { samples: x, sample_rate: rate },
        noise: Waveform { samples: d, sample_rate: rate },
        noisy: Waveform { samples: Vec::new(), sample_rate: rate },
        gain,
        peak_scale: 1.0,
    };
    if peak > PEAK_LIMIT {
        let s = PEAK_LIMIT / peak;
        out.peak_scale = s;
        for v in out.clean.samples.iter_mut().chain(out.noise.samples.iter_mut()).chain(y.iter_mut()) {
            *v *= s;
        }
    }
    out.noisy.samples = y;
    Ok(out)
}

/// SNR in dB between two signals using active-sample powers.
pub fn realized_snr_db(clean: &[f64], noise: &[f64], sample_rate: u32) -> Option<f64> {
    Some(10.0 * (active_power(clean, sample_rate)? / active_power(noise, sample_rate)?).log10())
}

fn check_duration(duration_s: f64, min: f64) -> Result<()> {
    if !(duration_s >= min) || !duration_s.is_finite() {
        return Err(Error::InvalidConfig(format!("duration {duration_s} s (minimum {min} s)")));
    }
    Ok(())
}

fn peak_normalize(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

fn raised_cosine(t: f64) -> f64 {
    0.5 - 0.5 * (PI * t.clamp(0.0, 1.0)).cos()
}

/// Vowel-like resonance gain at `f` for formants `(centre, bandwidth)`.
fn formant_gain(f: f64, formants: &[(f64, f64); 3]) -> f64 {
    formants
        .iter()
        .map(|(c, bw)| {
            let x = (f - c) / bw;
            1.0 / (1.0 + x * x)
        })
        .sum::<f64>()
}

/// Speech-like test signal: a harmonic stack on a drifting 100-300 Hz
/// fundamental, shaped by moving formants and a -6 dB/octave tilt, with
/// 2-6 Hz syllabic modulation and silent gaps; peak 0.5.
pub fn gen_synthetic_speech(seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    check_duration(duration_s, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let n = (duration_s * fs).round() as usize;
    let f0_base = rng.random_range(120.0..240.0);
    let drift_rate = rng.random_range(0.2..0.8);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let am_rate = rng.random_range(2.5..5.5);
    let am_phase = rng.random_range(0.0..2.0 * PI);

    // Formant targets change once per syllable.
    let syllable = 1.0 / am_rate;
    let n_syl = (duration_s / syllable).ceil() as usize + 2;
    let vowels: Vec<[(f64, f64); 3]> = (0..n_syl)
        .map(|_| {
            [
                (rng.random_range(300.0..850.0), 90.0),
                (rng.random_range(900.0..2300.0), 130.0),
                (rng.random_range(2300.0..3200.0), 180.0),
            ]
        })
        .collect();

    // Silent gaps: roughly one 100-250 ms pause per 0.8 s.
    let mut gaps = Vec::new();
    let mut t = rng.random_range(0.3..0.8);
    while t < duration_s - 0.2 {
        let len = rng.random_range(0.1..0.25);
        gaps.push((t, t + len));
        t += len + rng.random_range(0.5..1.0);
    }
    let gap_gain = |t: f64| {
        let ramp = 0.02;
        gaps.iter().fold(1.0f64, |g, &(a, b)| {
            if t <= a - ramp || t >= b + ramp {
                g
            } else if t < a {
                g * raised_cosine((a - t) / ramp)
            } else if t > b {
                g * raised_cosine((t - b) / ramp)
            } else {
                0.0
            }
        })
    };

    let max_harmonics = (0.45 * fs / 100.0) as usize;
    let mut phases = vec![0.0f64; max_harmonics];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let f0 = (f0_base * (1.0 + 0.15 * (2.0 * PI * drift_rate * t + drift_phase).sin())).clamp(100.0, 300.0);
        let pos = t / syllable;
        let k = (pos.floor() as usize).min(n_syl - 2);
        let w = raised_cosine(pos - pos.floor());
        let formants: [(f64, f64); 3] = std::array::from_fn(|j| {
            let (a, b) = (vowels[k][j], vowels[k + 1][j]);
            (a.0 + w * (b.0 - a.0), a.1)
        });
        let am = (2.0 * PI * am_rate * t + am_phase).sin().max(0.0).powf(0.7);
        let env = am * gap_gain(t);
        let mut v = 0.0;
        for (h, phase) in phases.iter_mut().enumerate() {
            let f = (h + 1) as f64 * f0;
            if f >= 0.45 * fs {
                break;
            }
            *phase = (*phase + 2.0 * PI * f / fs) % (2.0 * PI);
            v += formant_gain(f, &formants) / (h + 1) as f64 * phase.sin();
        }
        out.push(env * v);
    }
    Waveform::new(peak_normalize(out, SOURCE_PEAK), sample_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Modulated,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Modulated];
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Modulated => "modulated",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "modulated" => Ok(NoiseKind::Modulated),
            other => Err(Error::InvalidConfig(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// White noise shaped by `1/sqrt(f)` in the frequency domain (DC removed).
fn pink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut spec: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    for (k, c) in spec.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c = if bin == 0 { Complex64::new(0.0, 0.0) } else { *c / (bin as f64).sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|c| c.re).collect()
}

/// Slowly varying gain in [0.1, 1]: a sum of random sinusoids below 1 Hz.
fn slow_envelope(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let parts: Vec<(f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.1..1.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let s = parts.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() / parts.len() as f64;
            0.1 + 0.9 * (0.5 + 0.5 * s.clamp(-1.0, 1.0))
        })
        .collect()
}

/// Stationary white or pink noise, or white noise under a slow random gain;
/// peak 0.5.
pub fn gen_synthetic_noise(kind: NoiseKind, seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    check_duration(duration_s, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidConfig("noise duration rounds to zero samples".into()));
    }
    let x = match kind {
        NoiseKind::White => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::Pink => pink(&mut rng, n),
        NoiseKind::Modulated => {
            let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let env = slow_envelope(&mut rng, n, sample_rate as f64);
            white.iter().zip(&env).map(|(w, e)| w * e).collect()
        }
    };
    Waveform::new(peak_normalize(x, SOURCE_PEAK), sample_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixManifest {
    pub sample_rate: u32,
    pub records: Vec<MixRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

/// A loaded record.
#[derive(Clone, Debug)]
pub struct Triple {
    pub id: String,
    pub clean: Waveform,
    pub noise: Waveform,
    pub snr_db: f64,
}

impl MixManifest {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for r in &self.records {
            if !r.snr_db.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite snr in {}", r.clean.display())));
            }
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a manifest; the sample rate is taken from the first clean file.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: MixRecord = serde_json::from_str(&line)?;
            if !r.snr_db.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite snr in {}", r.clean.display())));
            }
            records.push(r);
        }
        let first = records.first().ok_or_else(|| Error::EmptyCorpus(format!("{} has no records", path.display())))?;
        let sample_rate = hound::WavReader::open(root.join(&first.clean))?.spec().sample_rate;
        Ok(Self {
            sample_rate,
            records,
            root,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MixRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Loads the audio of every record in `split`.
    pub fn load(&self, split: Split) -> Result<Vec<Triple>> {
        self.split(split)
            .map(|r| {
                let clean = load_wav(&self.root.join(&r.clean))?;
                let noise = load_wav(&self.root.join(&r.noise))?;
                for w in [&clean, &noise] {
                    if w.sample_rate != self.sample_rate {
                        return Err(Error::ConfigMismatch(format!(
                            "{} is at {} Hz, manifest at {} Hz",
                            r.clean.display(),
                            w.sample_rate,
                            self.sample_rate
                        )));
                    }
                }
                Ok(Triple {
                    id: r.clean.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    clean,
                    noise,
                    snr_db: r.snr_db,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub utterances: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

/// Sizes of the train/valid/test splits for `n` sources (70/20/10).
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let valid = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// Generates paired speech and noise sources, assigns each pair to a split,
/// draws an SNR per pair and writes WAVs plus `manifest.jsonl` under `root`.
pub fn build_dataset(config: &DatasetConfig) -> Result<MixManifest> {
    if config.utterances == 0 {
        return Err(Error::EmptyCorpus("zero utterances requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    std::fs::create_dir_all(config.root.join("clean"))?;
    std::fs::create_dir_all(config.root.join("noise"))?;
    let mut order: Vec<usize> = (0..config.utterances).collect();
    order.shuffle(&mut rng);
    let (train, valid, _) = split_counts(config.utterances);
    let mut splits = vec![Split::Test; config.utterances];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    let mut records = Vec::with_capacity(config.utterances);
    for (i, split) in splits.into_iter().enumerate() {
        let seed: u64 = rng.random();
        let snr_db = rng.random_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1);
        let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
        let clean = gen_synthetic_speech(seed, config.duration_s, config.sample_rate)?;
        let noise = gen_synthetic_noise(kind, seed ^ 0x9e37_79b9_7f4a_7c15, config.duration_s, config.sample_rate)?;
        let clean_path = PathBuf::from(format!("clean/utt_{i:04}.wav"));
        let noise_path = PathBuf::from(format!("noise/{kind}_{i:04}.wav"));
        save_wav(&clean, &config.root.join(&clean_path))?;
        save_wav(&noise, &config.root.join(&noise_path))?;
        records.push(MixRecord {
            clean: clean_path,
            noise: noise_path,
            snr_db,
            split,
            seed,
        });
    }
    let manifest = MixManifest {
        sample_rate: config.sample_rate,
        records,
        root: config.root.clone(),
    };
    manifest.write_jsonl(&config.root.join("manifest.jsonl"))?;
    Ok(manifest)
}
