//! Built-in verification: finite-difference gradient checks of every layer
//! and model, and quick invariant self-tests.

use dccrn_autograd::{Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cgauss::{kl_analytic, kl_sampled, sample_many, sample_var, standard_prior, CgdParams};
use crate::data::{active_power, gen_synthetic_noise, gen_synthetic_speech, mix_at_snr, NoiseKind};
use crate::error::Result;
use crate::eval::stoi;
use crate::frontend::{conv_istft, conv_stft, StftConfig, Waveform};
use crate::losses::{si_snr, si_snr_projection};
use crate::models::{is_encoder_param, DccrnVae, ModelConfig, CLEAN};
use crate::nn::{
    grad_check, probe_projection, ComplexBatchNorm, ComplexConv2d, ComplexConvTranspose2d, ComplexLinear, ComplexLstm,
    GradCheckOptions, GradCheckReport, Lstm, Mode, ParamStore, Prelu, Session, TimeCrop,
};
use crate::train::{Checkpoint, Dtype, Profile, TrainConfig, Trainer};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Checks `layer` with respect to its parameters and the `input` entry.
fn layer_case(
    store: &ParamStore,
    opts: &GradCheckOptions,
    f: &dyn Fn(&Session, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check(
        store,
        &store.param_names(),
        |s| Ok(probe_projection(s.g, f(s, s.param("input")?)?, 3)),
        opts,
    )
}

/// Gradient checks of each complex layer, the real LSTM, and the full
/// desk-profile clean encoder and decoder. Model cases sample
/// `model_entries` entries per parameter array.
pub fn gradient_suite(model_entries: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();

    let conv = ComplexConv2d::new("conv", 2, 3, (5, 2), (2, 1));
    let mut store = ParamStore::new();
    conv.init(&mut store, &mut rng);
    store.insert("input", rand_tensor(&mut rng, &[2, 4, 8, 5]));
    out.push(("complex conv".into(), layer_case(&store, &opts, &|s, x| conv.forward(s, x))?));

    let convt = ComplexConvTranspose2d::new("convt", 2, 2, (5, 2), (2, 1), TimeCrop::End);
    let mut store = ParamStore::new();
    convt.init(&mut store, &mut rng);
    store.insert("input", rand_tensor(&mut rng, &[2, 4, 4, 5]));
    out.push((
        "complex transposed conv".into(),
        layer_case(&store, &opts, &|s, x| convt.forward(s, x, 8))?,
    ));

    let bn = ComplexBatchNorm::new("bn", 2);
    let mut store = ParamStore::new();
    bn.init(&mut store);
    store.insert("input", rand_tensor(&mut rng, &[3, 4, 3, 4]));
    store.insert("bn.gamma_ri", ArrayD::from_elem(IxDyn(&[2]), 0.3));
    store.insert("bn.beta_re", ArrayD::from_elem(IxDyn(&[2]), -0.2));
    out.push((
        "complex batch norm".into(),
        layer_case(&store, &opts, &|s, x| bn.forward(s, x, Mode::Train))?,
    ));

    let prelu = Prelu::new("prelu", 2);
    let mut store = ParamStore::new();
    prelu.init(&mut store);
    let input = rand_tensor(&mut rng, &[2, 4, 3, 3]).mapv(|v| if v.abs() < 0.1 { v + 0.2 * v.signum() } else { v });
    store.insert("input", input);
    out.push(("prelu".into(), layer_case(&store, &opts, &|s, x| prelu.forward(s, x))?));

    let lin = ComplexLinear::new("lin", 4, 3);
    let mut store = ParamStore::new();
    lin.init(&mut store, &mut rng);
    store.insert("input", rand_tensor(&mut rng, &[5, 8]));
    out.push(("complex linear".into(), layer_case(&store, &opts, &|s, x| lin.forward(s, x))?));

    let clstm = ComplexLstm::new("clstm", 3, 4);
    let mut store = ParamStore::new();
    clstm.init(&mut store, &mut rng);
    store.insert("input", rand_tensor(&mut rng, &[2, 6, 6]));
    out.push(("complex lstm".into(), layer_case(&store, &opts, &|s, x| clstm.forward(s, x))?));

    let lstm = Lstm::new("lstm", 5, 1);
    let mut store = ParamStore::new();
    lstm.init(&mut store, &mut rng);
    store.insert("input", rand_tensor(&mut rng, &[2, 6, 5]));
    out.push(("real lstm".into(), layer_case(&store, &opts, &|s, x| lstm.forward(s, x))?));

    let model = DccrnVae::new(ModelConfig::desk())?;
    let store = model.init(&mut rng);
    let x = rand_tensor(&mut rng, &[2, 2, model.config.input_freq(), 4]);
    let shape = [2, 4, model.config.latent_dim];
    let (n_re, n_im) = (rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape));
    let model_opts = GradCheckOptions {
        max_entries_per_param: Some(model_entries),
        ..GradCheckOptions::default()
    };
    let names = store.param_names();
    let encoder: Vec<String> = names.iter().filter(|n| is_encoder_param(n, CLEAN)).cloned().collect();
    let decoder: Vec<String> = names
        .iter()
        .filter(|n| n.starts_with("cvae.dec") || n.starts_with("cvae.proj"))
        .cloned()
        .collect();
    for (label, names, decode) in [("full encoder", encoder, false), ("full decoder", decoder, true)] {
        let report = grad_check(
            &store,
            &names,
            |s| {
                let g = s.g;
                let enc = model.encode_clean(s, g.constant(x.clone()), Mode::Train)?;
                let p = &enc.posterior;
                if !decode {
                    let all = g.concat(&[p.mu_re, p.mu_im, p.sigma, p.delta_re, p.delta_im], 2);
                    return Ok(probe_projection(g, all, 9));
                }
                let z = sample_var(g, p, g.constant(n_re.clone()), g.constant(n_im.clone()));
                let out = model.decode_clean(s, z, &enc.skips, Mode::Train)?;
                Ok(probe_projection(g, out, 9))
            },
            &model_opts,
        )?;
        out.push((label.into(), report));
    }
    Ok(out)
}

/// Outcome of one invariant family.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
}

impl FamilyResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            total: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, label: &str, ok: bool) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(label.to_string());
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

/// Fast invariant checks grouped by family; runs in a few seconds.
pub fn selftest() -> Result<Vec<FamilyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut results = Vec::new();

    let mut f = FamilyResult::new("stft reconstruction");
    for config in [StftConfig::paper(), StftConfig::desk()] {
        let x = Waveform::new((0..16_000).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), 16_000)?;
        let y = conv_istft(&conv_stft(&x, &config)?, &config, x.len())?;
        f.check(&format!("fft {}", config.fft_size), rel_err(&x.samples, &y.samples) < 1e-6);
    }
    results.push(f);

    let mut f = FamilyResult::new("complex gaussian");
    let p = CgdParams {
        mu: ndarray::Array2::from_elem((1, 1), Complex64::new(1.0, 2.0)),
        sigma: ndarray::Array2::from_elem((1, 1), 2.0),
        delta: ndarray::Array2::from_elem((1, 1), Complex64::new(0.5, 0.5)),
    };
    let noise = ndarray::Array4::from_shape_simple_fn((20_000, 1, 1, 2), || rng.sample::<f64, _>(StandardNormal));
    let z = sample_many(&p, &noise)?;
    let n = z.len() as f64;
    let mean = z.iter().sum::<Complex64>() / n;
    let var = z.iter().map(|v| (v - p.mu[[0, 0]]).norm_sqr()).sum::<f64>() / n;
    let pseudo = z.iter().map(|v| (v - p.mu[[0, 0]]).powi(2)).sum::<Complex64>() / n;
    f.check("mean", (mean - p.mu[[0, 0]]).norm() < 0.06);
    f.check("variance", (var / 2.0 - 1.0).abs() < 0.05);
    f.check("pseudo-covariance", (pseudo - p.delta[[0, 0]]).norm() < 0.1);
    let prior = standard_prior(1, 1);
    let q = CgdParams {
        mu: ndarray::Array2::from_elem((1, 1), Complex64::new(1.0, 0.0)),
        sigma: ndarray::Array2::from_elem((1, 1), 2.0),
        delta: ndarray::Array2::from_elem((1, 1), Complex64::new(0.0, 0.0)),
    };
    let exact = 2.0 - 2f64.ln();
    f.check("analytic kl", (kl_analytic(&q, &prior)? - exact).abs() < 1e-12);
    let est = kl_sampled(&q, &prior, 20_000, &mut rng)?;
    f.check("sampled kl", (est.value - exact).abs() < 4.0 * est.stderr);
    results.push(f);

    let mut f = FamilyResult::new("si-sdr");
    f.check("hand example", si_snr_projection(&[1.0, 0.0], &[1.0, 1.0])?.abs() < 1e-7);
    let x: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect();
    let scaled: Vec<f64> = y.iter().map(|v| 7.5 * v).collect();
    f.check("scale invariance", (si_snr(&x, &y)? - si_snr(&x, &scaled)?).abs() < 1e-6);
    // The guard is absolute, so the cap is 80 dB for a unit-energy reference.
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let norm = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    let unit: Vec<f64> = x.iter().map(|v| (v - mean) / norm).collect();
    f.check("identity cap", (si_snr(&unit, &unit)? - 80.0).abs() < 1e-6);
    f.check("silent reference", si_snr(&[0.0; 8], &x[..8]).is_err());
    results.push(f);

    let mut f = FamilyResult::new("mixing and stoi");
    let clean = gen_synthetic_speech(1, 1.5, 16_000)?;
    let noise = gen_synthetic_noise(NoiseKind::White, 2, 1.5, 16_000)?;
    let mut last = -1.0;
    for snr in [-5.0, 5.0, 15.0] {
        let m = mix_at_snr(&clean, &noise, snr)?;
        let pc = active_power(&m.clean.samples, 16_000).unwrap_or(0.0);
        let pn = active_power(&m.noise.samples, 16_000).unwrap_or(1.0);
        f.check(&format!("realized snr {snr}"), (10.0 * (pc / pn).log10() - snr).abs() < 0.01);
        let s = stoi(&m.clean, &m.noisy)?;
        f.check(&format!("stoi rises at {snr} dB"), s > last);
        last = s;
    }
    f.check("stoi self", stoi(&clean, &clean)? >= 0.999);
    results.push(f);

    let mut f = FamilyResult::new("checkpoint");
    let mut cfg = TrainConfig::new(Profile::Desk);
    cfg.seed = 3;
    let trainer = Trainer::new(cfg)?;
    let ckpt = trainer.checkpoint();
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes, Dtype::F64)?;
    let back = Checkpoint::read_from(bytes.as_slice())?;
    f.check("round trip", back == ckpt);
    f.check("shape check", back.check_against(&trainer.model).is_ok());
    results.push(f);

    Ok(results)
}
