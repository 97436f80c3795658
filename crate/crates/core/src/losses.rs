//! Training objectives: SI-SNR, the stage-1 VAE loss, the latent loss of the
//! noisy encoder and the least-squares adversarial pair.
//!
//! Graph versions (`*_var`) average over the batch and are what training
//! differentiates; plain versions work on single items.

use std::collections::BTreeMap;
use std::io::Write;

use dccrn_autograd::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cgauss::{kl_sampled, log_density_var, sample_var, CgdParams, CgdVars};
use crate::error::{Error, Result};

/// Added to the residual energy before the ratio.
pub const SI_SNR_GUARD: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 0.25;

/// A loss value with its named parts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// Graph loss: the differentiable total plus named scalar parts.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub components: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.scalar(self.total),
            components: self
                .components
                .iter()
                .map(|(n, v)| (n.to_string(), g.scalar(*v)))
                .collect(),
        }
    }
}

fn centred(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// Scale-invariant SNR of `estimate` against `reference`, in dB, after
/// removing the mean of both.
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    si_snr_projection(&centred(reference), &centred(estimate))
}

/// The projection ratio `|t|^2 / (|e - t|^2 + guard)` in dB with
/// `t = (<e, r> / |r|^2) r`, on the signals as given.
pub fn si_snr_projection(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::SilentInput("reference has no energy after mean removal".into()));
    }
    let scale = reference.iter().zip(estimate).map(|(a, b)| a * b).sum::<f64>() / energy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for (a, b) in reference.iter().zip(estimate) {
        let t = scale * a;
        target += t * t;
        residual += (b - t) * (b - t);
    }
    Ok(10.0 * (target / (residual + SI_SNR_GUARD)).log10())
}

fn check_lengths(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

/// Per-item SI-SNR in dB of `[B, N]` waveforms, shape `[B]`.
pub fn si_snr_var(g: &Graph, reference: Var, estimate: Var) -> Result<Var> {
    let shape = g.shape(reference);
    if shape.len() != 2 || g.shape(estimate) != shape {
        return Err(Error::ShapeMismatch(format!(
            "reference {shape:?} vs estimate {:?}",
            g.shape(estimate)
        )));
    }
    let centre = |x: Var| g.sub(x, g.mean_axes(x, &[1]));
    let r = centre(reference);
    let e = centre(estimate);
    let energy = g.sum_axes(g.square(r), &[1]);
    if g.value(energy).iter().any(|v| *v == 0.0) {
        return Err(Error::SilentInput("a reference waveform in the batch has no energy after mean removal".into()));
    }
    let scale = g.div(g.sum_axes(g.mul(r, e), &[1]), energy);
    let target = g.mul(scale, r);
    let residual = g.sub(e, target);
    let ratio = g.div(
        g.sum_axes(g.square(target), &[1]),
        g.add_scalar(g.sum_axes(g.square(residual), &[1]), SI_SNR_GUARD),
    );
    let db = g.scale(g.ln(ratio), 10.0 / std::f64::consts::LN_10);
    Ok(g.reshape(db, &[shape[0]]))
}

/// Standard circular prior broadcastable against `[B, T, L]` parameters.
pub fn prior_vars(g: &Graph, frames: usize, latent: usize) -> CgdVars {
    let zeros = || g.constant(Tensor::zeros(ndarray::IxDyn(&[1, frames, latent])));
    CgdVars {
        mu_re: zeros(),
        mu_im: zeros(),
        sigma: g.constant(Tensor::ones(ndarray::IxDyn(&[1, frames, latent]))),
        delta_re: zeros(),
        delta_im: zeros(),
    }
}

/// `KL(posterior || prior) - mean SI-SNR(target, recon)`, with the KL
/// estimated from the single draw given by `noise`.
pub fn stage1_loss_var(
    g: &Graph,
    posterior: &CgdVars,
    noise: (Var, Var),
    recon: Var,
    target: Var,
) -> Result<LossTerms> {
    let s = g.shape(posterior.mu_re);
    let prior = prior_vars(g, s[1], s[2]);
    let (z_re, z_im) = sample_var(g, posterior, noise.0, noise.1);
    let lp = log_density_var(g, posterior, z_re, z_im);
    let kl = batch_sum(g, g.sub(lp, log_density_var(g, &prior, z_re, z_im)));
    let snr = g.mean(si_snr_var(g, target, recon)?);
    Ok(LossTerms {
        total: g.sub(kl, snr),
        components: vec![("kl", kl), ("si_snr", snr)],
    })
}

/// Sum over all elements divided by the batch size.
fn batch_sum(g: &Graph, x: Var) -> Var {
    let b = g.shape(x)[0] as f64;
    g.scale(g.sum(x), 1.0 / b)
}

/// `KL(q_y || p_x) - alpha KL(q_y || p_d) + sum_levels mean((r_x - r_yx)^2)`.
///
/// Both divergences are measured from the noisy-encoder posterior `q_y` and
/// share the draw given by `noise`.
#[allow(clippy::too_many_arguments)]
pub fn latent_loss_var(
    g: &Graph,
    q_y: &CgdVars,
    p_x: &CgdVars,
    p_d: &CgdVars,
    noise: (Var, Var),
    r_x: &[Var],
    r_yx: &[Var],
    alpha: f64,
) -> Result<LossTerms> {
    if alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} must be non-negative")));
    }
    let qs = g.shape(q_y.mu_re);
    for p in [p_x, p_d] {
        if g.shape(p.mu_re) != qs {
            return Err(Error::ShapeMismatch(format!("posterior {:?} vs {qs:?}", g.shape(p.mu_re))));
        }
    }
    let (z_re, z_im) = sample_var(g, q_y, noise.0, noise.1);
    let lq = log_density_var(g, q_y, z_re, z_im);
    let kl_x = batch_sum(g, g.sub(lq, log_density_var(g, p_x, z_re, z_im)));
    let kl_d = batch_sum(g, g.sub(lq, log_density_var(g, p_d, z_re, z_im)));
    let residual = residual_var(g, r_x, r_yx)?;
    let kl = g.sub(kl_x, g.scale(kl_d, alpha));
    Ok(LossTerms {
        total: g.add(kl, residual),
        components: vec![("kl_q_y_p_x", kl_x), ("kl_q_y_p_d", kl_d), ("kl", kl), ("residual", residual)],
    })
}

/// Sum over levels of the mean squared difference (real and imaginary parts).
pub fn residual_var(g: &Graph, r_x: &[Var], r_yx: &[Var]) -> Result<Var> {
    if r_x.len() != r_yx.len() || r_x.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} skip levels", r_x.len(), r_yx.len())));
    }
    let mut total: Option<Var> = None;
    for (a, b) in r_x.iter().zip(r_yx) {
        if g.shape(*a) != g.shape(*b) {
            return Err(Error::ShapeMismatch(format!("skip {:?} vs {:?}", g.shape(*a), g.shape(*b))));
        }
        let level = g.mean(g.square(g.sub(*a, *b)));
        total = Some(match total {
            Some(t) => g.add(t, level),
            None => level,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `mean (D(fake) - 1)^2 - mean SI-SNR(target, recon)`; `d_fake` is `[B]`.
pub fn gan_generator_loss_var(g: &Graph, d_fake: Var, recon: Var, target: Var) -> Result<LossTerms> {
    let adv = g.mean(g.square(g.add_scalar(d_fake, -1.0)));
    let snr = g.mean(si_snr_var(g, target, recon)?);
    Ok(LossTerms {
        total: g.sub(adv, snr),
        components: vec![("adv", adv), ("si_snr", snr)],
    })
}

/// `mean D(fake)^2 + mean (D(real) - 1)^2`.
pub fn gan_discriminator_loss_var(g: &Graph, d_fake: Var, d_real: Var) -> LossTerms {
    let fake = g.mean(g.square(d_fake));
    let real = g.mean(g.square(g.add_scalar(d_real, -1.0)));
    LossTerms {
        total: g.add(fake, real),
        components: vec![("fake", fake), ("real", real)],
    }
}

/// Stage-1 loss of one item with the KL averaged over `n_samples` draws.
pub fn stage1_loss<R: Rng + ?Sized>(
    posterior: &CgdParams,
    recon: &[f64],
    target: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    posterior.validate()?;
    let (l, t) = posterior.dims();
    let kl = kl_sampled(posterior, &crate::cgauss::standard_prior(l, t), n_samples, rng)?.value;
    let snr = si_snr(target, recon)?;
    Ok(LossBreakdown {
        total: kl - snr,
        components: [("kl".to_string(), kl), ("si_snr".to_string(), snr)].into(),
    })
}

/// Latent loss of one item; skip levels are `[2C, F, T]` arrays.
#[allow(clippy::too_many_arguments)]
pub fn latent_loss<R: Rng + ?Sized>(
    q_y: &CgdParams,
    p_x: &CgdParams,
    p_d: &CgdParams,
    r_x: &[Tensor],
    r_yx: &[Tensor],
    alpha: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let g = Graph::new();
    let (l, t) = q_y.dims();
    let (q, px, pd) = (q_y.to_vars(&g), p_x.to_vars(&g), p_d.to_vars(&g));
    let wrap = |ts: &[Tensor]| -> Vec<Var> { ts.iter().map(|x| g.constant(x.clone().insert_axis(ndarray::Axis(0)))).collect() };
    let (rx, ryx) = (wrap(r_x), wrap(r_yx));
    if p_x.dims() != (l, t) || p_d.dims() != (l, t) {
        return Err(Error::ShapeMismatch("posterior dimensions differ".into()));
    }
    // The n draws are stacked on the batch axis, so the batch mean is the
    // Monte Carlo average.
    let noise = |rng: &mut R| {
        let n = Tensor::from_shape_simple_fn(ndarray::IxDyn(&[n_samples, t, l]), || rng.sample(rand_distr::StandardNormal));
        g.constant(n)
    };
    let (n_re, n_im) = (noise(rng), noise(rng));
    let tile = |v: Var| g.concat(&vec![v; n_samples], 0);
    let tile_all = |p: &CgdVars| CgdVars {
        mu_re: tile(p.mu_re),
        mu_im: tile(p.mu_im),
        sigma: tile(p.sigma),
        delta_re: tile(p.delta_re),
        delta_im: tile(p.delta_im),
    };
    let terms = latent_loss_var(&g, &tile_all(&q), &tile_all(&px), &tile_all(&pd), (n_re, n_im), &rx, &ryx, alpha)?;
    Ok(terms.breakdown(&g))
}

/// Generator loss from a score and one waveform pair.
pub fn gan_generator_loss(d_fake: f64, recon: &[f64], target: &[f64]) -> Result<LossBreakdown> {
    let adv = (d_fake - 1.0).powi(2);
    let snr = si_snr(target, recon)?;
    Ok(LossBreakdown {
        total: adv - snr,
        components: [("adv".to_string(), adv), ("si_snr".to_string(), snr)].into(),
    })
}

pub fn gan_discriminator_loss(d_fake: f64, d_real: f64) -> LossBreakdown {
    let fake = d_fake * d_fake;
    let real = (d_real - 1.0).powi(2);
    LossBreakdown {
        total: fake + real,
        components: [("fake".to_string(), fake), ("real".to_string(), real)].into(),
    }
}

/// CSV loss log with rows `step,stage,component,value`; `total` is written
/// as its own component.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "step,stage,component,value")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, step: u64, stage: u8, loss: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{step},{stage},total,{}", loss.total)?;
        for (name, value) in &loss.components {
            writeln!(self.out, "{step},{stage},{name},{value}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
