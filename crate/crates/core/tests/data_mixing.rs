use std::collections::HashSet;

use dccrn_vae::data::{
    build_dataset, gen_synthetic_noise, gen_synthetic_speech, mix_at_snr, DatasetConfig, MixManifest, NoiseKind, Split,
};
use dccrn_vae::frontend::Waveform;
use proptest::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

const FS: u32 = 16_000;

fn alternating(amplitude: f64, n: usize) -> Waveform {
    Waveform::new((0..n).map(|i| if i % 2 == 0 { amplitude } else { -amplitude }).collect(), FS).unwrap()
}

/// Power spectrum |X_k|^2 for k in 0..=n/2.
fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf[..=x.len() / 2].iter().map(|c| c.norm_sqr()).collect()
}

fn band_density(ps: &[f64], n: usize, lo: f64, hi: f64) -> f64 {
    let hz = FS as f64 / n as f64;
    let bins: Vec<f64> = (0..ps.len())
        .filter(|k| (*k as f64 * hz) >= lo && (*k as f64 * hz) < hi)
        .map(|k| ps[k])
        .collect();
    bins.iter().sum::<f64>() / bins.len() as f64
}

fn db(v: f64) -> f64 {
    10.0 * v.log10()
}

/// Mean square over 10 ms frames within 40 dB of the squared peak.
fn active_power_oracle(x: &[f64]) -> f64 {
    let peak2 = x.iter().map(|v| v * v).fold(0.0, f64::max);
    let frames: Vec<&[f64]> = x.chunks(160).collect();
    let kept: Vec<&&[f64]> = frames
        .iter()
        .filter(|f| f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64 >= peak2 * 1e-4)
        .collect();
    let n: usize = kept.iter().map(|f| f.len()).sum();
    kept.iter().flat_map(|f| f.iter()).map(|v| v * v).sum::<f64>() / n as f64
}

#[test]
fn plug_in_gain() {
    let m = mix_at_snr(&alternating(2.0, 800), &alternating(1.0, 800), 10.0).unwrap();
    assert!((m.gain - 0.4f64.sqrt()).abs() < 1e-12);
    assert!((m.gain - 0.6325).abs() < 1e-4);
    assert!(m.peak_scale < 1.0);
}

fn relative_change(m: &dccrn_vae::data::Mixture, x: &Waveform) -> f64 {
    let err: f64 = m.noisy.samples.iter().zip(&x.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    err / x.samples.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn high_snr_leaves_clean_almost_untouched() {
    let d = gen_synthetic_noise(NoiseKind::White, 2, 1.0, FS).unwrap();
    // Fully active clean signal: the active and overall powers coincide, so
    // the relative change is 10^(-60/20) up to rounding.
    let tone = Waveform::new((0..16_000).map(|i| 0.4 * (0.05 * i as f64).sin()).collect(), FS).unwrap();
    let m = mix_at_snr(&tone, &d, 60.0).unwrap();
    assert!(relative_change(&m, &tone) <= 1e-3 * (1.0 + 1e-9));
    // Speech has pauses, so its overall power sits below its active power.
    let x = gen_synthetic_speech(1, 1.0, FS).unwrap();
    let m = mix_at_snr(&x, &d, 70.0).unwrap();
    assert_eq!(m.peak_scale, 1.0);
    assert!(relative_change(&m, &x) <= 1e-3);
}

#[test]
fn mixing_is_exactly_invertible_without_rescale() {
    let x = gen_synthetic_speech(3, 1.0, FS).unwrap();
    let d = gen_synthetic_noise(NoiseKind::Pink, 4, 1.0, FS).unwrap();
    let m = mix_at_snr(&x, &d, 5.0).unwrap();
    assert_eq!(m.peak_scale, 1.0);
    for ((y, n), c) in m.noisy.samples.iter().zip(&m.noise.samples).zip(&m.clean.samples) {
        assert_eq!(y - n, *c);
    }
}

#[test]
fn peak_rescale_is_joint_and_bounded() {
    let x = gen_synthetic_speech(5, 1.0, FS).unwrap();
    let d = gen_synthetic_noise(NoiseKind::Modulated, 6, 1.0, FS).unwrap();
    let m = mix_at_snr(&x, &d, -10.0).unwrap();
    assert!(m.peak_scale < 1.0);
    let peak = m.noisy.samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!((peak - 0.99).abs() < 1e-12);
    let ratio = m.clean.samples.iter().zip(&x.samples).find(|(_, b)| b.abs() > 0.1).map(|(a, b)| a / b).unwrap();
    assert!((ratio - m.peak_scale).abs() < 1e-9);
}

#[test]
fn synthetic_speech_is_seeded_and_peak_normalised() {
    let a = gen_synthetic_speech(9, 1.0, FS).unwrap();
    assert_eq!(a, gen_synthetic_speech(9, 1.0, FS).unwrap());
    assert_ne!(a, gen_synthetic_speech(10, 1.0, FS).unwrap());
    assert_eq!(a.len(), 16_000);
    let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - 0.5).abs() < 1e-12);
    assert!(gen_synthetic_speech(1, 0.4, FS).is_err());
}

#[test]
fn synthetic_speech_energy_is_mostly_below_4khz() {
    for seed in 0..5 {
        let x = gen_synthetic_speech(seed, 2.0, FS).unwrap();
        let ps = power_spectrum(&x.samples);
        let n = x.len();
        let below: f64 = ps.iter().enumerate().filter(|(k, _)| (*k * FS as usize) < 4000 * n).map(|(_, p)| p).sum();
        let total: f64 = ps.iter().sum();
        assert!(below / total >= 0.8, "seed {seed}: {}", below / total);
    }
}

#[test]
fn synthetic_speech_has_syllabic_modulation_and_gaps() {
    for seed in 0..5 {
        let x = gen_synthetic_speech(seed, 4.0, FS).unwrap();
        // 100 Hz frame-RMS envelope, mean removed.
        let env: Vec<f64> = x.samples.chunks(160).map(|f| (f.iter().map(|v| v * v).sum::<f64>() / 160.0).sqrt()).collect();
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        let centred: Vec<f64> = env.iter().map(|v| v - mean).collect();
        let ps = power_spectrum(&centred);
        let hz = 100.0 / centred.len() as f64;
        let (peak_bin, _) = ps
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(k, _)| *k as f64 * hz <= 20.0)
            .fold((0, 0.0), |best, (k, p)| if *p > best.1 { (k, *p) } else { best });
        let peak_hz = peak_bin as f64 * hz;
        assert!((2.0..=6.0).contains(&peak_hz), "seed {seed}: modulation peak at {peak_hz} Hz");
        // At least one 50 ms stretch of true silence.
        assert!(x.samples.windows(800).step_by(80).any(|w| w.iter().all(|v| *v == 0.0)), "seed {seed}");
    }
}

#[test]
fn white_noise_has_flat_octave_densities() {
    let x = gen_synthetic_noise(NoiseKind::White, 11, 10.0, FS).unwrap();
    let ps = power_spectrum(&x.samples);
    let n = x.len();
    let bands: Vec<f64> = (0..6).map(|k| db(band_density(&ps, n, 125.0 * 2f64.powi(k), 250.0 * 2f64.powi(k)))).collect();
    let mean = bands.iter().sum::<f64>() / bands.len() as f64;
    assert!(bands.iter().all(|b| (b - mean).abs() < 1.0), "{bands:?}");
}

#[test]
fn pink_noise_falls_3db_per_octave() {
    let x = gen_synthetic_noise(NoiseKind::Pink, 12, 10.0, FS).unwrap();
    let ps = power_spectrum(&x.samples);
    let n = x.len();
    let edges = [100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6000.0];
    // Density at octave k relative to the -3 dB/octave line through the first band.
    let first = db(band_density(&ps, n, edges[0], edges[1]));
    for k in 1..edges.len() - 1 {
        let d = db(band_density(&ps, n, edges[k], edges[k + 1]));
        let octaves = ((edges[k] * edges[k + 1]).sqrt() / (edges[0] * edges[1]).sqrt()).log2();
        let expected = first - 3.0103 * octaves;
        assert!((d - expected).abs() < 1.0, "band {k}: {d} vs {expected}");
    }
}

#[test]
fn modulated_noise_level_varies_slowly() {
    let x = gen_synthetic_noise(NoiseKind::Modulated, 13, 4.0, FS).unwrap();
    assert_eq!(x, gen_synthetic_noise(NoiseKind::Modulated, 13, 4.0, FS).unwrap());
    let rms: Vec<f64> = x.samples.chunks(1600).map(|f| (f.iter().map(|v| v * v).sum::<f64>() / 1600.0).sqrt()).collect();
    let (lo, hi) = rms.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!(db(hi * hi / (lo * lo)) > 6.0);
}

#[test]
fn dataset_splits_snrs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = DatasetConfig {
        root: dir.path().join("a"),
        utterances: 100,
        duration_s: 0.5,
        sample_rate: FS,
        seed: 21,
    };
    let m = build_dataset(&config).unwrap();
    let count = |s| m.split(s).count();
    assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (70, 20, 10));
    assert!(m.records.iter().all(|r| (-10.0..=15.0).contains(&r.snr_db)));
    let mut seen = HashSet::new();
    for r in &m.records {
        assert!(seen.insert(r.clean.clone()) && seen.insert(r.noise.clone()));
    }

    let again = build_dataset(&DatasetConfig {
        root: dir.path().join("b"),
        ..config.clone()
    })
    .unwrap();
    assert_eq!(again.records, m.records);
    let text = |d: &str| std::fs::read(dir.path().join(d).join("manifest.jsonl")).unwrap();
    assert_eq!(text("a"), text("b"));

    let read = MixManifest::read_jsonl(&config.root.join("manifest.jsonl")).unwrap();
    assert_eq!(read.records, m.records);
    assert_eq!(read.sample_rate, FS);
    let test = read.load(Split::Test).unwrap();
    assert_eq!(test.len(), 10);
    assert_eq!(test[0].clean.len(), 8000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn realized_snr_matches_request(seed in 0u64..500, snr in -10.0f64..15.0, kind in 0usize..3) {
        let x = gen_synthetic_speech(seed, 0.6, FS).unwrap();
        let d = gen_synthetic_noise(NoiseKind::ALL[kind], seed + 1, 0.6, FS).unwrap();
        let m = mix_at_snr(&x, &d, snr).unwrap();
        let realized = db(active_power_oracle(&m.clean.samples) / active_power_oracle(&m.noise.samples));
        prop_assert!((realized - snr).abs() < 0.01, "{realized} vs {snr}");
    }
}
