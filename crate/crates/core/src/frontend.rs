//! Waveform I/O and the convolutional STFT / inverse STFT.
//!
//! The transform is written as framing followed by a matrix product with fixed
//! DFT-basis kernels, which is a strided 1-D convolution. The same basis
//! matrices drive both the plain functions here and the differentiable versions
//! used inside the models ([`StftBasis::stft_var`], [`StftBasis::istft_var`]).

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use dccrn_autograd::{Graph, Tensor, Var};
use ndarray::{Array2, ArrayD, IxDyn, LinalgScalar};
use num_complex::Complex;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types the front-end runs in.
pub trait Sample: Float + FromPrimitive + LinalgScalar + Debug + Send + Sync + 'static {}
impl Sample for f32 {}
impl Sample for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T = f64> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Sample> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::UnsupportedFormat("non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannelCount(spec.channels));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {format:?} samples (PCM16 or float32 only)"
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono PCM16; samples are clipped to `[-1, 1 - 2^-15]` first.
pub fn save_wav(waveform: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    if waveform.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::UnsupportedFormat("non-finite samples".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in &waveform.samples {
        writer.write_sample(quantize_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn quantize_pcm16(sample: f64) -> i16 {
    let clipped = sample.clamp(-1.0, 1.0 - 1.0 / 32768.0);
    (clipped * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Square root of a Hann window sampled at half-sample offsets, so no
    /// coefficient is zero and the overlap-add envelope is invertible at the
    /// signal edges.
    SqrtHann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl StftConfig {
    /// 25 ms frames, 6.25 ms hop, 512-point FFT at 16 kHz.
    pub fn paper() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 512,
            frame_len: 400,
            hop: 100,
            window: WindowKind::SqrtHann,
        }
    }

    /// Smaller transform for fast experiments.
    pub fn desk() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 256,
            frame_len: 256,
            hop: 64,
            window: WindowKind::SqrtHann,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len || self.frame_len > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "need 0 < hop <= frame_len <= fft_size, got {self:?}"
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::InvalidConfig("fft_size must be even".into()));
        }
        if self.frame_len % self.hop != 0 {
            return Err(Error::InvalidConfig(
                "frame_len must be a multiple of hop for constant overlap-add".into(),
            ));
        }
        Ok(())
    }

    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(Error::SignalTooShort {
                len,
                frame_len: self.frame_len,
            });
        }
        Ok((len - self.frame_len).div_ceil(self.hop) + 1)
    }

    /// Samples covered by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.frame_len
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        match self.window {
            WindowKind::SqrtHann => (0..self.frame_len)
                .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n).sin())
                .collect(),
        }
    }
}

/// Complex time-frequency matrix, `bins x frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T = f64> {
    pub data: Array2<Complex<T>>,
    pub config: StftConfig,
}

impl<T: Sample> ComplexSpectrogram<T> {
    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Analysis/synthesis kernels for one [`StftConfig`].
#[derive(Clone, Debug)]
pub struct StftBasis {
    pub config: StftConfig,
    /// `[frame_len, 2F]`: windowed cosine kernels then negated sine kernels.
    pub analysis: Array2<f64>,
    /// `[2F, frame_len]`: one-sided inverse DFT times the synthesis window.
    pub synthesis: Array2<f64>,
}

impl StftBasis {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let n = config.fft_size;
        let bins = config.bins();
        let window = config.window();
        let mut analysis = Array2::zeros((config.frame_len, 2 * bins));
        let mut synthesis = Array2::zeros((2 * bins, config.frame_len));
        for (i, &w) in window.iter().enumerate() {
            for k in 0..bins {
                let phase = 2.0 * std::f64::consts::PI * ((k * i) % n) as f64 / n as f64;
                let (s, c) = phase.sin_cos();
                analysis[[i, k]] = w * c;
                analysis[[i, bins + k]] = -w * s;
                let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                synthesis[[k, i]] = weight * c * w / n as f64;
                synthesis[[bins + k, i]] = -weight * s * w / n as f64;
            }
        }
        Ok(Self {
            config,
            analysis,
            synthesis,
        })
    }

    /// Overlap-added squared synthesis window over `len` samples from `frames` frames.
    pub fn envelope(&self, frames: usize) -> Vec<f64> {
        let window = self.config.window();
        let mut env = vec![0.0; self.config.covered_len(frames)];
        for t in 0..frames {
            for (i, w) in window.iter().enumerate() {
                env[t * self.config.hop + i] += w * w;
            }
        }
        env
    }

    /// Differentiable analysis of `[B, N]` waveforms into `[B, 2, F-1, T]`
    /// (real and imaginary channel, DC bin dropped).
    pub fn stft_var(&self, g: &Graph, wave: Var) -> Result<Var> {
        let shape = g.shape(wave);
        let (batch, len) = (shape[0], shape[1]);
        let frames = self.config.num_frames(len)?;
        let covered = self.config.covered_len(frames);
        let wave = if covered > len {
            g.pad(wave, 1, 0, covered - len)
        } else {
            wave
        };
        let bins = self.config.bins();
        let framed = g.frame(wave, self.config.frame_len, self.config.hop);
        let framed = g.reshape(framed, &[batch * frames, self.config.frame_len]);
        let basis = g.constant(self.analysis.clone().into_dyn());
        let spec = g.matmul(framed, basis);
        let spec = g.reshape(spec, &[batch, frames, 2, bins]);
        let spec = g.permute(spec, &[0, 2, 3, 1]);
        Ok(g.slice(spec, 2, 1, bins))
    }

    /// Differentiable synthesis of `[B, 2, F-1, T]` back to `[B, out_len]`
    /// with a zero DC bin reinserted.
    pub fn istft_var(&self, g: &Graph, spec: Var, out_len: usize) -> Result<Var> {
        let shape = g.shape(spec);
        let bins = self.config.bins();
        if shape.len() != 4 || shape[1] != 2 || shape[2] != bins - 1 {
            return Err(Error::ConfigMismatch(format!(
                "spectrogram tensor {shape:?} does not match {bins} bins"
            )));
        }
        let (batch, frames) = (shape[0], shape[3]);
        let spec = g.pad(spec, 2, 1, 0);
        let spec = g.permute(spec, &[0, 3, 1, 2]);
        let spec = g.reshape(spec, &[batch * frames, 2 * bins]);
        let basis = g.constant(self.synthesis.clone().into_dyn());
        let frames_t = g.matmul(spec, basis);
        let frames_t = g.reshape(frames_t, &[batch, frames, self.config.frame_len]);
        let summed = g.overlap_add(frames_t, self.config.hop);
        let env = self.envelope(frames);
        let covered = env.len();
        let inv = ArrayD::from_shape_vec(IxDyn(&[1, covered]), env.iter().map(|e| 1.0 / e).collect())
            .expect("envelope shape");
        let wave = g.mul(summed, g.constant(inv));
        Ok(if out_len <= covered {
            g.slice(wave, 1, 0, out_len)
        } else {
            g.pad(wave, 1, 0, out_len - covered)
        })
    }
}

/// Windowed one-sided DFT of every frame. The tail is zero-padded up to a
/// whole number of hops.
pub fn conv_stft<T: Sample>(waveform: &Waveform<T>, config: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    let basis = StftBasis::new(*config)?;
    let frames = config.num_frames(waveform.len())?;
    let bins = config.bins();
    let covered = config.covered_len(frames);
    let mut padded = waveform.samples.clone();
    padded.resize(covered, T::zero());

    let mut framed = Array2::<T>::zeros((frames, config.frame_len));
    for t in 0..frames {
        for i in 0..config.frame_len {
            framed[[t, i]] = padded[t * config.hop + i];
        }
    }
    let kernels = basis.analysis.mapv(|v| T::from_f64(v).unwrap());
    let prod = framed.dot(&kernels);
    let data = Array2::from_shape_fn((bins, frames), |(k, t)| Complex::new(prod[[t, k]], prod[[t, bins + k]]));
    Ok(ComplexSpectrogram { data, config: *config })
}

/// Overlap-add synthesis normalised by the window envelope, trimmed or
/// zero-padded to `out_len`.
pub fn conv_istft<T: Sample>(spec: &ComplexSpectrogram<T>, config: &StftConfig, out_len: usize) -> Result<Waveform<T>> {
    if spec.config != *config {
        return Err(Error::ConfigMismatch(format!(
            "spectrogram was produced with {:?}, synthesis asked for {config:?}",
            spec.config
        )));
    }
    let bins = config.bins();
    if spec.bins() != bins {
        return Err(Error::ConfigMismatch(format!(
            "{} bins, expected {bins}",
            spec.bins()
        )));
    }
    let basis = StftBasis::new(*config)?;
    let frames = spec.frames();
    let mut stacked = Array2::<T>::zeros((frames, 2 * bins));
    for t in 0..frames {
        for k in 0..bins {
            stacked[[t, k]] = spec.data[[k, t]].re;
            stacked[[t, bins + k]] = spec.data[[k, t]].im;
        }
    }
    let kernels = basis.synthesis.mapv(|v| T::from_f64(v).unwrap());
    let time = stacked.dot(&kernels);
    let env = basis.envelope(frames);
    let mut out = vec![T::zero(); env.len()];
    for t in 0..frames {
        for i in 0..config.frame_len {
            let k = t * config.hop + i;
            out[k] = out[k] + time[[t, i]];
        }
    }
    for (o, e) in out.iter_mut().zip(&env) {
        *o = *o / T::from_f64(*e).unwrap();
    }
    out.resize(out_len, T::zero());
    Waveform::new(out, config.sample_rate)
}

/// Converts a spectrogram to the `[1, 2, F-1, T]` model layout (DC dropped).
pub fn spectrogram_to_tensor(spec: &ComplexSpectrogram) -> Tensor {
    let (bins, frames) = spec.data.dim();
    ArrayD::from_shape_fn(IxDyn(&[1, 2, bins - 1, frames]), |d| {
        let c = spec.data[[d[2] + 1, d[3]]];
        if d[1] == 0 {
            c.re
        } else {
            c.im
        }
    })
}

/// Inverse of [`spectrogram_to_tensor`] for batch item `item`; the DC bin is zero.
pub fn tensor_to_spectrogram(t: &Tensor, item: usize, config: StftConfig) -> Result<ComplexSpectrogram> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 2 || s[2] + 1 != config.bins() {
        return Err(Error::ConfigMismatch(format!(
            "tensor {s:?} is not a [B, 2, F-1, T] spectrogram for {} bins",
            config.bins()
        )));
    }
    let data = Array2::from_shape_fn((s[2] + 1, s[3]), |(k, f)| {
        if k == 0 {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(t[[item, 0, k - 1, f]], t[[item, 1, k - 1, f]])
        }
    });
    Ok(ComplexSpectrogram { data, config })
}

const DUMP_MAGIC: &[u8; 4] = b"CSPG";

/// Debug dump: 16-byte header (magic, F, T, flags as little-endian u32) then
/// `f32` (re, im) pairs in row-major `F x T` order.
pub fn write_spectrogram_dump<W: Write>(spec: &ComplexSpectrogram, flags: u32, mut out: W) -> Result<()> {
    let (bins, frames) = spec.data.dim();
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&(bins as u32).to_le_bytes())?;
    out.write_all(&(frames as u32).to_le_bytes())?;
    out.write_all(&flags.to_le_bytes())?;
    for c in spec.data.iter() {
        out.write_all(&(c.re as f32).to_le_bytes())?;
        out.write_all(&(c.im as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dump back as `(data, flags)`.
pub fn read_spectrogram_dump<R: Read>(mut input: R) -> Result<(Array2<Complex<f32>>, u32)> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != DUMP_MAGIC {
        return Err(Error::UnsupportedFormat("not a spectrogram dump".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (bins, frames, flags) = (word(4), word(8), word(12) as u32);
    let mut raw = vec![0u8; bins * frames * 8];
    input.read_exact(&mut raw)?;
    let values: Vec<Complex<f32>> = raw
        .chunks_exact(8)
        .map(|c| {
            Complex::new(
                f32::from_le_bytes(c[..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..].try_into().unwrap()),
            )
        })
        .collect();
    let data = Array2::from_shape_vec((bins, frames), values)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok((data, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn rel_err<T: Sample>(a: &[T], b: &[T]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (*x - *y).to_f64().unwrap().powi(2)).sum();
        let den: f64 = a.iter().map(|x| x.to_f64().unwrap().powi(2)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn round_trip_reconstructs_in_both_precisions() {
        for cfg in [StftConfig::paper(), StftConfig::desk()] {
            let x = Waveform::new(noise(16_000, 1), 16_000).unwrap();
            let spec = conv_stft(&x, &cfg).unwrap();
            let y = conv_istft(&spec, &cfg, x.len()).unwrap();
            assert!(rel_err(&x.samples, &y.samples) < 1e-6);

            let x32 = Waveform::new(x.samples.iter().map(|&v| v as f32).collect(), 16_000).unwrap();
            let spec = conv_stft(&x32, &cfg).unwrap();
            let y32 = conv_istft(&spec, &cfg, x32.len()).unwrap();
            assert!(rel_err(&x32.samples, &y32.samples) < 1e-3);
        }
    }

    #[test]
    fn frame_count_matches_framing_arithmetic() {
        let cfg = StftConfig::paper();
        assert_eq!(cfg.num_frames(32_000).unwrap(), 317);
        assert_eq!(cfg.num_frames(400).unwrap(), 1);
        assert_eq!(cfg.num_frames(401).unwrap(), 2);
        assert!(matches!(
            cfg.num_frames(399),
            Err(Error::SignalTooShort { len: 399, frame_len: 400 })
        ));
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::desk();
        let x = Waveform::new(vec![0.0; 1000], 16_000).unwrap();
        let spec = conv_stft(&x, &cfg).unwrap();
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
        let y = conv_istft(&spec, &cfg, 1000).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_at_bin_centre_peaks_at_that_bin() {
        let cfg = StftConfig::paper();
        let k = 37;
        let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        let x: Vec<f64> = (0..8000)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 16_000.0).cos())
            .collect();
        let spec = conv_stft(&Waveform::new(x, 16_000).unwrap(), &cfg).unwrap();
        for t in 1..spec.frames() - 1 {
            let col = spec.data.column(t);
            let peak = (0..col.len())
                .max_by(|&a, &b| col[a].norm().partial_cmp(&col[b].norm()).unwrap())
                .unwrap();
            assert_eq!(peak, k, "frame {t}");
        }
    }

    #[test]
    fn centred_impulse_gives_flat_magnitude() {
        let cfg = StftConfig::paper();
        let mut x = vec![0.0; cfg.frame_len];
        let centre = cfg.frame_len / 2;
        x[centre] = 1.0;
        let spec = conv_stft(&Waveform::new(x, 16_000).unwrap(), &cfg).unwrap();
        let w = cfg.window()[centre];
        for c in spec.data.column(0) {
            assert!((c.norm() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn one_frame_matches_direct_dft_and_parseval() {
        let cfg = StftConfig::desk();
        let x = noise(cfg.frame_len, 5);
        let spec = conv_stft(&Waveform::new(x.clone(), 16_000).unwrap(), &cfg).unwrap();
        let w = cfg.window();
        let n = cfg.fft_size;
        let mut energy_time = 0.0;
        for i in 0..cfg.frame_len {
            energy_time += (w[i] * x[i]).powi(2);
        }
        let mut energy_freq = 0.0;
        for k in 0..cfg.bins() {
            let mut direct = Complex::new(0.0, 0.0);
            for i in 0..cfg.frame_len {
                let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                direct += Complex::new(ph.cos(), ph.sin()) * (w[i] * x[i]);
            }
            assert!((direct - spec.data[[k, 0]]).norm() < 1e-10);
            let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            energy_freq += weight * direct.norm_sqr() / n as f64;
        }
        assert!((energy_time - energy_freq).abs() < 1e-10 * energy_time);
    }

    #[test]
    fn synthesis_rejects_foreign_config() {
        let x = Waveform::new(noise(2000, 2), 16_000).unwrap();
        let spec = conv_stft(&x, &StftConfig::desk()).unwrap();
        assert!(matches!(
            conv_istft(&spec, &StftConfig::paper(), 2000),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn wav_scaling_clipping_and_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![2.0, -3.0, 32767.0 / 32768.0, 0.0], 16_000).unwrap();
        save_wav(&w, &path).unwrap();
        let mut reader = hound::WavReader::open(&path).unwrap();
        let raw: Vec<i16> = reader.samples::<i16>().map(|s| s.unwrap()).collect();
        assert_eq!(raw, vec![32767, -32768, 32767, 0]);
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);

        let one_second = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        save_wav(&one_second, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), 16_000);
        assert!(back.samples.iter().all(|&v| v == 0.0));

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 48_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        let err = load_wav(&stereo).unwrap_err();
        assert!(err.to_string().contains("unsupported channel count"));
    }

    #[test]
    fn float_wav_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(0.25f32).unwrap();
        writer.write_sample(-0.5f32).unwrap();
        writer.finalize().unwrap();
        assert_eq!(load_wav(&path).unwrap().samples, vec![0.25, -0.5]);
    }

    #[test]
    fn dump_round_trip() {
        let x = Waveform::new(noise(1000, 3), 16_000).unwrap();
        let spec = conv_stft(&x, &StftConfig::desk()).unwrap();
        let mut buf = Vec::new();
        write_spectrogram_dump(&spec, 1, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + spec.data.len() * 8);
        let (data, flags) = read_spectrogram_dump(&buf[..]).unwrap();
        assert_eq!(flags, 1);
        assert_eq!(data.dim(), spec.data.dim());
        assert_eq!(data[[3, 2]].re, spec.data[[3, 2]].re as f32);
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let cfg = StftConfig::desk();
        let basis = StftBasis::new(cfg).unwrap();
        let x = noise(1234, 9);
        let spec = conv_stft(&Waveform::new(x.clone(), 16_000).unwrap(), &cfg).unwrap();
        let g = Graph::new();
        let wave = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, x.len()]), x.clone()).unwrap());
        let s = basis.stft_var(&g, wave).unwrap();
        let expected = spectrogram_to_tensor(&spec);
        assert!((&*g.value(s) - &expected).iter().all(|d| d.abs() < 1e-12));
        let back = basis.istft_var(&g, s, x.len()).unwrap();
        // DC was dropped, so compare against the DC-free plain synthesis.
        let mut no_dc = spec.clone();
        no_dc.data.row_mut(0).fill(Complex::new(0.0, 0.0));
        let plain = conv_istft(&no_dc, &cfg, x.len()).unwrap();
        let got = g.value(back);
        for (a, b) in got.iter().zip(&plain.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
