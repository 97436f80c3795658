//! The clean and noise VAEs, the noisy-speech encoder and the discriminator.
//!
//! All models consume spectrogram tensors `[B, 2, F-1, T]` (DC bin dropped)
//! and keep complex feature maps channel-stacked (see [`crate::nn`]).

use dccrn_autograd::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cgauss::{make_cgd_var, CgdParams, CgdVars};
use crate::error::{Error, Result};
use crate::frontend::StftConfig;
use crate::nn::{
    ComplexBatchNorm, ComplexConv2d, ComplexConvTranspose2d, ComplexLinear, ComplexLstm, Lstm, Mode, ParamStore,
    Prelu, Session, TimeCrop,
};

pub const CLEAN: &str = "cvae";
pub const NOISE: &str = "nvae";
pub const NOISY: &str = "nsvae";
pub const DISC: &str = "disc";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stft: StftConfig,
    /// Complex output channels of each encoder level.
    pub channels: Vec<usize>,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub lstm_units: usize,
    pub latent_dim: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            stft: StftConfig::paper(),
            channels: vec![32, 64, 128, 128, 256, 256],
            kernel: (5, 2),
            stride: (2, 1),
            lstm_units: 128,
            latent_dim: 128,
        }
    }

    pub fn desk() -> Self {
        Self {
            stft: StftConfig::desk(),
            channels: vec![4, 4, 8, 8, 16, 16],
            kernel: (5, 2),
            stride: (2, 1),
            lstm_units: 32,
            latent_dim: 16,
        }
    }

    /// Frequency rows seen by the first encoder level.
    pub fn input_freq(&self) -> usize {
        self.stft.bins() - 1
    }

    /// Frequency rows after each level.
    pub fn level_freqs(&self) -> Vec<usize> {
        let mut f = self.input_freq();
        self.channels
            .iter()
            .map(|_| {
                f /= self.stride.0;
                f
            })
            .collect()
    }

    /// Complex features per frame entering the LSTM.
    pub fn bottleneck_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.level_freqs().last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("need at least one level with positive channels".into()));
        }
        if self.lstm_units == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("lstm_units and latent_dim must be positive".into()));
        }
        if self.stride.1 != 1 {
            return Err(Error::InvalidConfig("time stride must be 1".into()));
        }
        let total = self.stride.0.pow(self.channels.len() as u32);
        if self.input_freq() % total != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} frequency rows are not divisible by {total}",
                self.input_freq()
            )));
        }
        Ok(())
    }
}

/// Concatenates two complex feature maps along the channel axis.
fn complex_concat(g: &Graph, a: Var, b: Var) -> Var {
    let (ca, cb) = (g.shape(a)[1] / 2, g.shape(b)[1] / 2);
    g.concat(
        &[
            g.slice(a, 1, 0, ca),
            g.slice(b, 1, 0, cb),
            g.slice(a, 1, ca, 2 * ca),
            g.slice(b, 1, cb, 2 * cb),
        ],
        1,
    )
}

/// `[B, 2C, F, T] -> [B, T, 2 C F]` with the real block first.
fn to_sequence(g: &Graph, x: Var) -> Var {
    let s = g.shape(x);
    let (b, c, f, t) = (s[0], s[1] / 2, s[2], s[3]);
    let x = g.reshape(x, &[b, 2, c * f, t]);
    let x = g.permute(x, &[0, 3, 1, 2]);
    g.reshape(x, &[b, t, 2 * c * f])
}

fn check_input(cfg: &ModelConfig, g: &Graph, x: Var) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 2 || s[2] != cfg.input_freq() {
        return Err(Error::ConfigMismatch(format!(
            "spectrogram tensor {s:?} does not match the model profile ({} frequency rows)",
            cfg.input_freq()
        )));
    }
    Ok(())
}

/// Conv, batch norm and PReLU per level.
#[derive(Clone, Debug)]
struct ConvStack {
    convs: Vec<ComplexConv2d>,
    norms: Vec<ComplexBatchNorm>,
    acts: Vec<Prelu>,
}

impl ConvStack {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut acts = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(ComplexConv2d::new(format!("{prefix}.enc{i}.conv"), in_ch, c, cfg.kernel, cfg.stride));
            norms.push(ComplexBatchNorm::new(format!("{prefix}.enc{i}.bn"), c));
            acts.push(Prelu::new(format!("{prefix}.enc{i}.act"), c));
            in_ch = c;
        }
        Self { convs, norms, acts }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for ((c, n), a) in self.convs.iter().zip(&self.norms).zip(&self.acts) {
            c.init(store, rng);
            n.init(store);
            a.init(store);
        }
    }

    /// Output of every level.
    fn forward(&self, s: &Session, x: Var, mode: Mode) -> Result<Vec<Var>> {
        let mut levels = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for ((c, n), a) in self.convs.iter().zip(&self.norms).zip(&self.acts) {
            h = a.forward(s, n.forward(s, c.forward(s, h)?, mode)?)?;
            levels.push(h);
        }
        Ok(levels)
    }
}

/// Posterior parameters (`[B, T, L]` each) and per-level skip features.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub posterior: CgdVars,
    pub skips: Vec<Var>,
}

/// Plain-array encoder result for one batch item.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub posterior: CgdParams,
    /// `[2C, F, T]` per level.
    pub skips: Vec<Tensor>,
}

impl EncoderVars {
    pub fn to_output(&self, g: &Graph, item: usize) -> EncoderOutput {
        EncoderOutput {
            posterior: CgdParams::from_vars(g, &self.posterior, item),
            skips: self
                .skips
                .iter()
                .map(|v| g.value(*v).index_axis(ndarray::Axis(0), item).to_owned())
                .collect(),
        }
    }
}

/// Convolutional encoder, complex LSTM and the three posterior heads.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
    stack: ConvStack,
    lstm: ComplexLstm,
    mu: ComplexLinear,
    sigma: ComplexLinear,
    delta: ComplexLinear,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let (units, latent) = (cfg.lstm_units, cfg.latent_dim);
        Self {
            cfg: cfg.clone(),
            stack: ConvStack::new(prefix, cfg),
            lstm: ComplexLstm::new(&format!("{prefix}.lstm"), cfg.bottleneck_dim(), units),
            mu: ComplexLinear::new(format!("{prefix}.head_mu"), units, latent),
            sigma: ComplexLinear::new(format!("{prefix}.head_sigma"), units, latent),
            delta: ComplexLinear::new(format!("{prefix}.head_delta"), units, latent),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stack.init(store, rng);
        self.lstm.init(store, rng);
        self.mu.init(store, rng);
        self.sigma.init(store, rng);
        self.delta.init(store, rng);
    }

    pub fn forward(&self, s: &Session, spec: Var, mode: Mode) -> Result<EncoderVars> {
        let g = s.g;
        check_input(&self.cfg, g, spec)?;
        let (b, t) = (g.shape(spec)[0], g.shape(spec)[3]);
        let skips = self.stack.forward(s, spec, mode)?;
        let seq = to_sequence(g, *skips.last().expect("at least one level"));
        let h = self.lstm.forward(s, seq)?;
        let rows = g.reshape(h, &[b * t, 2 * self.cfg.lstm_units]);
        let l = self.cfg.latent_dim;
        let split = |v: Var| {
            let re = g.reshape(g.slice(v, 1, 0, l), &[b, t, l]);
            let im = g.reshape(g.slice(v, 1, l, 2 * l), &[b, t, l]);
            (re, im)
        };
        let (mu_re, mu_im) = split(self.mu.forward(s, rows)?);
        let (sigma_raw, _) = split(self.sigma.forward(s, rows)?);
        let (delta_re, delta_im) = split(self.delta.forward(s, rows)?);
        Ok(EncoderVars {
            posterior: make_cgd_var(g, mu_re, mu_im, sigma_raw, delta_re, delta_im),
            skips,
        })
    }
}

/// Latent projection and transposed-convolution levels with skip inputs.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: ModelConfig,
    proj: ComplexLinear,
    deconvs: Vec<ComplexConvTranspose2d>,
    norms: Vec<ComplexBatchNorm>,
    acts: Vec<Prelu>,
}

impl Decoder {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let n = cfg.channels.len();
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        let mut acts = Vec::new();
        // Built deepest level first.
        for i in (0..n).rev() {
            let out = if i == 0 { 1 } else { cfg.channels[i - 1] };
            deconvs.push(ComplexConvTranspose2d::new(
                format!("{prefix}.dec{i}.deconv"),
                2 * cfg.channels[i],
                out,
                cfg.kernel,
                cfg.stride,
                TimeCrop::End,
            ));
            if i > 0 {
                norms.push(ComplexBatchNorm::new(format!("{prefix}.dec{i}.bn"), out));
                acts.push(Prelu::new(format!("{prefix}.dec{i}.act"), out));
            }
        }
        Self {
            cfg: cfg.clone(),
            proj: ComplexLinear::new(format!("{prefix}.proj"), cfg.latent_dim, cfg.bottleneck_dim()),
            deconvs,
            norms,
            acts,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.proj.init(store, rng);
        for d in &self.deconvs {
            d.init(store, rng);
        }
        for (n, a) in self.norms.iter().zip(&self.acts) {
            n.init(store);
            a.init(store);
        }
    }

    /// Latent `(z_re, z_im)` of shape `[B, T, L]` plus skips to `[B, 2, F-1, T]`.
    pub fn forward(&self, s: &Session, z_re: Var, z_im: Var, skips: &[Var], mode: Mode) -> Result<Var> {
        let g = s.g;
        let cfg = &self.cfg;
        let n = cfg.channels.len();
        if skips.len() != n {
            return Err(Error::ShapeMismatch(format!("{} skip maps for {n} levels", skips.len())));
        }
        let zs = g.shape(z_re);
        if zs.len() != 3 || zs[2] != cfg.latent_dim || g.shape(z_im) != zs {
            return Err(Error::ShapeMismatch(format!("latent {zs:?}, expected [B, T, {}]", cfg.latent_dim)));
        }
        let (b, t) = (zs[0], zs[1]);
        let freqs = cfg.level_freqs();
        let (c_last, f_last) = (cfg.channels[n - 1], freqs[n - 1]);
        let rows = g.reshape(g.concat(&[z_re, z_im], 2), &[b * t, 2 * cfg.latent_dim]);
        let h = self.proj.forward(s, rows)?;
        let h = g.reshape(h, &[b, t, 2, c_last, f_last]);
        let h = g.permute(h, &[0, 2, 3, 4, 1]);
        let mut h = g.reshape(h, &[b, 2 * c_last, f_last, t]);
        for (k, deconv) in self.deconvs.iter().enumerate() {
            let level = n - 1 - k;
            let skip = skips[level];
            if g.shape(skip) != g.shape(h) {
                return Err(Error::ShapeMismatch(format!(
                    "skip at level {level} is {:?}, decoder state is {:?}",
                    g.shape(skip),
                    g.shape(h)
                )));
            }
            let out_freq = if level == 0 { cfg.input_freq() } else { freqs[level - 1] };
            h = deconv.forward(s, complex_concat(g, h, skip), out_freq)?;
            if level > 0 {
                h = self.acts[k].forward(s, self.norms[k].forward(s, h, mode)?)?;
            }
        }
        Ok(h)
    }
}

/// Encoder stack followed by a one-unit real LSTM; the score is the time
/// average of its output.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: ModelConfig,
    stack: ConvStack,
    lstm: Lstm,
}

impl Discriminator {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            stack: ConvStack::new(prefix, cfg),
            lstm: Lstm::new(format!("{prefix}.lstm"), 2 * cfg.bottleneck_dim(), 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stack.init(store, rng);
        self.lstm.init(store, rng);
    }

    /// Raw score per batch item, `[B]`.
    pub fn forward(&self, s: &Session, spec: Var, mode: Mode) -> Result<Var> {
        let g = s.g;
        check_input(&self.cfg, g, spec)?;
        let b = g.shape(spec)[0];
        let levels = self.stack.forward(s, spec, mode)?;
        let seq = to_sequence(g, *levels.last().expect("at least one level"));
        let h = self.lstm.forward(s, seq)?;
        Ok(g.reshape(g.mean_axes(h, &[1, 2]), &[b]))
    }
}

/// One VAE: encoder plus decoder.
#[derive(Clone, Debug)]
pub struct Vae {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            encoder: Encoder::new(prefix, cfg),
            decoder: Decoder::new(prefix, cfg),
        }
    }
}

/// The full system: clean and noise VAEs, noisy encoder and discriminator,
/// with disjoint parameter groups prefixed `cvae.`, `nvae.`, `nsvae.`, `disc.`.
#[derive(Clone, Debug)]
pub struct DccrnVae {
    pub config: ModelConfig,
    pub clean: Vae,
    pub noise: Vae,
    pub noisy: Encoder,
    pub disc: Discriminator,
}

impl DccrnVae {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            clean: Vae::new(CLEAN, &config),
            noise: Vae::new(NOISE, &config),
            noisy: Encoder::new(NOISY, &config),
            disc: Discriminator::new(DISC, &config),
            config,
        })
    }

    /// Fresh parameters for every group, drawn in a fixed group order.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.clean.encoder.init(&mut store, rng);
        self.clean.decoder.init(&mut store, rng);
        self.noise.encoder.init(&mut store, rng);
        self.noise.decoder.init(&mut store, rng);
        self.noisy.init(&mut store, rng);
        self.disc.init(&mut store, rng);
        store
    }

    pub fn encode_clean(&self, s: &Session, spec: Var, mode: Mode) -> Result<EncoderVars> {
        self.clean.encoder.forward(s, spec, mode)
    }

    pub fn encode_noise(&self, s: &Session, spec: Var, mode: Mode) -> Result<EncoderVars> {
        self.noise.encoder.forward(s, spec, mode)
    }

    pub fn encode_noisy(&self, s: &Session, spec: Var, mode: Mode) -> Result<EncoderVars> {
        self.noisy.forward(s, spec, mode)
    }

    pub fn decode_clean(&self, s: &Session, z: (Var, Var), skips: &[Var], mode: Mode) -> Result<Var> {
        self.clean.decoder.forward(s, z.0, z.1, skips, mode)
    }

    pub fn decode_noise(&self, s: &Session, z: (Var, Var), skips: &[Var], mode: Mode) -> Result<Var> {
        self.noise.decoder.forward(s, z.0, z.1, skips, mode)
    }

    pub fn discriminate(&self, s: &Session, spec: Var, mode: Mode) -> Result<Var> {
        self.disc.forward(s, spec, mode)
    }
}

/// Whether a parameter name belongs to the group with `prefix` (e.g. `"cvae"`).
pub fn in_group(name: &str, prefix: &str) -> bool {
    name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.'
}

/// Clean/noise encoder parameters (convolutions, norms, LSTM and heads), i.e.
/// everything in the VAE except its decoder.
pub fn is_encoder_param(name: &str, prefix: &str) -> bool {
    in_group(name, prefix) && !name[prefix.len() + 1..].starts_with("dec") && !name[prefix.len() + 1..].starts_with("proj")
}
