//! Intelligibility (STOI), rational resampling and corpus evaluation reports.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{mix_at_snr, Triple};
use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::losses::si_snr;

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase rational resampler with a Kaiser-windowed sinc kernel.
///
/// The kernel runs at `up * rate_in`: passband edge 0.46 and stopband edge
/// 0.5 of the lower of the two Nyquist rates, 90 dB stopband attenuation.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub rate_in: u32,
    pub rate_out: u32,
    up: usize,
    down: usize,
    /// Centred kernel, `2 * half + 1` taps, DC gain `up`.
    kernel: Vec<f64>,
    half: usize,
}

pub const RESAMPLER_ATTENUATION_DB: f64 = 90.0;

impl Resampler {
    pub fn new(rate_in: u32, rate_out: u32) -> Result<Self> {
        if rate_in == 0 || rate_out == 0 {
            return Err(Error::InvalidConfig("sample rates must be positive".into()));
        }
        let g = gcd(rate_in as usize, rate_out as usize);
        let (up, down) = (rate_out as usize / g, rate_in as usize / g);
        // Normalised to the upsampled rate (cycles per sample).
        let nyquist = 0.5 / up.max(down) as f64;
        let (pass, stop) = (0.92 * nyquist, nyquist);
        let cutoff = 0.5 * (pass + stop);
        let width = stop - pass;
        let a = RESAMPLER_ATTENUATION_DB;
        let beta = 0.1102 * (a - 8.7);
        let half = ((a - 8.0) / (2.285 * 2.0 * PI * width) / 2.0).ceil() as usize;
        let m = 2 * half;
        let mut kernel: Vec<f64> = (0..=m)
            .map(|n| {
                let t = n as f64 - half as f64;
                let r = 2.0 * n as f64 / m as f64 - 1.0;
                let window = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
                2.0 * cutoff * sinc(2.0 * cutoff * t) * window
            })
            .collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|h| *h *= up as f64 / sum);
        Ok(Self {
            rate_in,
            rate_out,
            up,
            down,
            kernel,
            half,
        })
    }

    /// Output has `ceil(len * up / down)` samples; sample `i` sits at input
    /// time `i * down / up`.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let n_out = (x.len() * self.up).div_ceil(self.down);
        let (up, half) = (self.up as isize, self.half as isize);
        (0..n_out)
            .map(|i| {
                // Kernel index k = half + i*down - n*up must lie in [0, 2*half].
                let centre = i as isize * self.down as isize + half;
                let n_lo = ((centre - 2 * half).max(0) + up - 1) / up;
                let n_hi = (centre / up).min(x.len() as isize - 1);
                let mut acc = 0.0;
                let mut n = n_lo;
                while n <= n_hi {
                    acc += x[n as usize] * self.kernel[(centre - n * up) as usize];
                    n += 1;
                }
                acc
            })
            .collect()
    }
}

pub const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Symmetric Hann window without its zero end points.
fn hann_interior(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (n + 1) as f64).cos()).collect()
}

/// One-third-octave band edges as FFT bin ranges `[lo, hi)`.
fn third_octave_bins() -> Vec<(usize, usize)> {
    let freqs: Vec<f64> = (0..=STOI_FFT / 2).map(|k| k as f64 * STOI_RATE as f64 / STOI_FFT as f64).collect();
    let nearest = |f: f64| {
        let mut best = 0;
        for (k, v) in freqs.iter().enumerate() {
            if (v - f).powi(2) < (freqs[best] - f).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Frame starts `0, hop, ...` strictly below `len - frame`.
fn frame_starts(len: usize, frame: usize, hop: usize) -> Vec<usize> {
    if len <= frame {
        return Vec::new();
    }
    (0..len - frame).step_by(hop).collect()
}

/// Drops frames of both signals where the reference is more than 40 dB below
/// its loudest frame, then overlap-adds the kept (windowed) frames.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = hann_interior(STOI_FRAME);
    let starts = frame_starts(x.len(), STOI_FRAME, hop);
    let energy_db: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..STOI_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy_db)
        .filter(|(_, e)| max - STOI_DYN_RANGE_DB - **e < 0.0)
        .map(|(s, _)| *s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (kept.len() - 1) * hop + STOI_FRAME;
    let (mut xo, mut yo) = (vec![0.0; len], vec![0.0; len]);
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xo[j * hop + i] += w[i] * x[s + i];
            yo[j * hop + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// One-third-octave band magnitudes, `[band][frame]`.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let w = hann_interior(STOI_FRAME);
    let fft = FftPlanner::new().plan_fft_forward(STOI_FFT);
    let starts = frame_starts(x.len(), STOI_FRAME, STOI_FRAME / 2);
    let mut out = vec![Vec::with_capacity(starts.len()); bands.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_FFT];
    for &s in &starts {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..STOI_FRAME {
            buf[i] = Complex64::new(w[i] * x[s + i], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            out[b].push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `degraded` against `clean`,
/// clamped to `[0, 1]`. Inputs at any rate are resampled to 10 kHz.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::ShapeMismatch(format!(
            "clean has {} samples, degraded {}",
            clean.len(),
            degraded.len()
        )));
    }
    if clean.sample_rate != degraded.sample_rate {
        return Err(Error::ConfigMismatch("clean and degraded sample rates differ".into()));
    }
    if clean.samples.iter().all(|v| *v == 0.0) {
        return Err(Error::SilentInput("STOI reference".into()));
    }
    let (x, y) = if clean.sample_rate == STOI_RATE {
        (clean.samples.clone(), degraded.samples.clone())
    } else {
        let r = Resampler::new(clean.sample_rate, STOI_RATE)?;
        (r.process(&clean.samples), r.process(&degraded.samples))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let bands = third_octave_bins();
    let xb = band_envelopes(&x, &bands);
    let yb = band_envelopes(&y, &bands);
    let frames = xb[0].len();
    if frames < STOI_SEGMENT {
        return Err(Error::SignalTooShort {
            len: frames,
            frame_len: STOI_SEGMENT,
        });
    }
    let clip = 1.0 + 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let segments = frames - STOI_SEGMENT + 1;
    for m in STOI_SEGMENT..=frames {
        for (xs, ys) in xb.iter().zip(&yb) {
            let xs = &xs[m - STOI_SEGMENT..m];
            let ys = &ys[m - STOI_SEGMENT..m];
            let alpha = norm(xs) / (norm(ys) + eps);
            let yp: Vec<f64> = ys.iter().zip(xs).map(|(yv, xv)| (alpha * yv).min(xv * clip)).collect();
            let centre = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| a - mean).collect::<Vec<f64>>()
            };
            let (yc, xc) = (centre(&yp), centre(xs));
            let (ny, nx) = (norm(&yc) + eps, norm(&xc) + eps);
            total += yc.iter().zip(&xc).map(|(a, b)| (a / ny) * (b / nx)).sum::<f64>();
        }
    }
    Ok((total / (segments * STOI_BANDS) as f64).clamp(0.0, 1.0))
}

/// One evaluated utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub snr_db: f64,
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub stoi_noisy: f64,
    pub stoi_enhanced: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub count: usize,
    pub snr_db: f64,
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub stoi_noisy: f64,
    pub stoi_enhanced: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: &str = "id,snr_db,si_sdr_noisy,si_sdr_enhanced,stoi_noisy,stoi_enhanced";

impl EvalReport {
    /// Arithmetic means over rows.
    pub fn aggregate(&self) -> EvalAggregate {
        let n = self.rows.len();
        let mean = |f: fn(&EvalRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalAggregate {
            count: n,
            snr_db: mean(|r| r.snr_db),
            si_sdr_noisy: mean(|r| r.si_sdr_noisy),
            si_sdr_enhanced: mean(|r| r.si_sdr_enhanced),
            stoi_noisy: mean(|r| r.stoi_noisy),
            stoi_enhanced: mean(|r| r.stoi_enhanced),
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            if r.id.contains(',') || r.id.contains('\n') {
                return Err(Error::InvalidConfig(format!("utterance id {:?} cannot be written as CSV", r.id)));
            }
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.id, r.snr_db, r.si_sdr_noisy, r.si_sdr_enhanced, r.stoi_noisy, r.stoi_enhanced
            )?;
        }
        Ok(())
    }

    pub fn save(&self, csv: &Path, json_aggregate: Option<&Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv)?))?;
        if let Some(path) = json_aggregate {
            std::fs::write(path, serde_json::to_string_pretty(&self.aggregate())?)?;
        }
        Ok(())
    }
}

/// Mixes each triple at its SNR, runs `enhance` on the mixture and scores
/// noisy and enhanced signals against the (mixed) clean reference.
pub fn evaluate_triples<F>(triples: &[Triple], mut enhance: F) -> Result<EvalReport>
where
    F: FnMut(&Triple, &Waveform, &Waveform) -> Result<Waveform>,
{
    if triples.is_empty() {
        return Err(Error::EmptyCorpus("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(triples.len());
    for t in triples {
        let mix = mix_at_snr(&t.clean, &t.noise, t.snr_db)?;
        let enhanced = enhance(t, &mix.noisy, &mix.clean)?;
        if enhanced.len() != mix.noisy.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: enhanced has {} samples, noisy {}",
                t.id,
                enhanced.len(),
                mix.noisy.len()
            )));
        }
        rows.push(EvalRow {
            id: t.id.clone(),
            snr_db: t.snr_db,
            si_sdr_noisy: si_snr(&mix.clean.samples, &mix.noisy.samples)?,
            si_sdr_enhanced: si_snr(&mix.clean.samples, &enhanced.samples)?,
            stoi_noisy: stoi(&mix.clean, &mix.noisy)?,
            stoi_enhanced: stoi(&mix.clean, &enhanced)?,
        });
    }
    Ok(EvalReport { rows })
}
