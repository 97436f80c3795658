//! Three-stage training, checkpoints and the enhancement path.
//!
//! Stage 1 fits the clean and noise VAEs. Stage 2 fits the noisy-speech
//! encoder against the frozen stage-1 encoders. Stage 3 fine-tunes the clean
//! decoder adversarially on latents and skips from the frozen noisy encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dccrn_autograd::{Graph, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgauss::{normal_noise, sample_var};
use crate::data::{mix_at_snr, MixManifest, Split, Triple};
use crate::error::{Error, Result};
use crate::frontend::{StftBasis, Waveform};
use crate::losses::{
    gan_discriminator_loss_var, gan_generator_loss_var, latent_loss_var, stage1_loss_var, LossBreakdown, LossLog,
    LossTerms, DEFAULT_ALPHA,
};
use crate::models::{in_group, is_encoder_param, DccrnVae, ModelConfig, CLEAN, DISC, NOISE, NOISY};
use crate::nn::{Mode, ParamStore, Session};

pub const CKPT_DIR_ENV: &str = "DCCRN_VAE_CKPT_DIR";
pub const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn model_config(self) -> ModelConfig {
        match self {
            Profile::Paper => ModelConfig::paper(),
            Profile::Desk => ModelConfig::desk(),
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Profile::Paper => 16,
            Profile::Desk => 8,
        }
    }

    /// Training crop in samples.
    pub fn default_crop_len(self) -> usize {
        match self {
            Profile::Paper => 32_000,
            Profile::Desk => 2048,
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::InvalidConfig(format!("unknown profile {s:?} (paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

/// Which stages a run covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSel {
    One,
    Two,
    Three,
    All,
}

impl StageSel {
    pub fn stages(self) -> Vec<u8> {
        match self {
            StageSel::One => vec![1],
            StageSel::Two => vec![2],
            StageSel::Three => vec![3],
            StageSel::All => vec![1, 2, 3],
        }
    }
}

impl FromStr for StageSel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSel::One),
            "2" => Ok(StageSel::Two),
            "3" => Ok(StageSel::Three),
            "all" => Ok(StageSel::All),
            _ => Err(Error::InvalidConfig(format!("unknown stage {s:?} (1, 2, 3 or all)"))),
        }
    }
}

impl fmt::Display for StageSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageSel::One => "1",
            StageSel::Two => "2",
            StageSel::Three => "3",
            StageSel::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub stage: StageSel,
    /// Optimizer steps per stage (stage 3: discriminator/generator pairs).
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub seed: u64,
    pub crop_len: usize,
    /// Save a checkpoint every this many steps (0: only at the end of a stage).
    pub ckpt_every: usize,
    pub manifest: Option<PathBuf>,
    pub ckpt_dir: PathBuf,
}

/// Keys accepted in config files and as overrides.
pub const CONFIG_KEYS: [&str; 11] = [
    "profile",
    "stage",
    "steps",
    "batch_size",
    "lr",
    "alpha",
    "seed",
    "crop_len",
    "ckpt.every",
    "data.manifest",
    "ckpt.dir",
];

impl TrainConfig {
    pub fn new(profile: Profile) -> Self {
        Self {
            profile,
            stage: StageSel::All,
            steps: 1000,
            batch_size: profile.default_batch_size(),
            lr: 1e-3,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            crop_len: profile.default_crop_len(),
            ckpt_every: 0,
            manifest: None,
            ckpt_dir: PathBuf::from("checkpoints"),
        }
    }

    /// Parses flat `key = value` lines; `#` starts a comment. A `profile`
    /// line resets the profile-dependent defaults, so it should come first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(Profile::Desk);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "profile" => {
                let p: Profile = value.parse()?;
                if p != self.profile {
                    self.profile = p;
                    self.batch_size = p.default_batch_size();
                    self.crop_len = p.default_crop_len();
                }
            }
            "stage" => self.stage = value.parse()?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "crop_len" => self.crop_len = num(key, value)?,
            "ckpt.every" => self.ckpt_every = num(key, value)?,
            "data.manifest" => self.manifest = Some(PathBuf::from(value)),
            "ckpt.dir" => self.ckpt_dir = PathBuf::from(value),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {key:?}; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha = {} must be non-negative", self.alpha)));
        }
        let stft = self.profile.model_config().stft;
        if self.crop_len < stft.frame_len {
            return Err(Error::InvalidConfig(format!(
                "crop_len = {} is shorter than one frame ({})",
                self.crop_len, stft.frame_len
            )));
        }
        Ok(())
    }

    pub fn stage_path(&self, stage: u8) -> PathBuf {
        self.ckpt_dir.join(format!("stage{stage}.ckpt"))
    }
}

/// Adam with per-parameter step counts, so groups can be updated separately.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: BTreeMap<String, u64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Clips `grads` jointly to global norm `max_norm`, then applies one step.
    /// Returns the norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
        let norm = grads.values().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                stage: 0,
                step: 0,
                detail: "gradient norm".into(),
            });
        }
        let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidConfig(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - BETA1.powi(*t as i32);
            let c2 = 1.0 - BETA2.powi(*t as i32);
            ndarray::Zip::from(&mut *param).and(&mut *m).and(&mut *v).and(grad).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
        Ok(norm)
    }
}

/// Array precision inside a checkpoint file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

/// ChaCha8 position, enough to continue the exact stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is 68 bits wide).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    stage: u8,
    step: u64,
    config: TrainConfig,
    model: ModelConfig,
    rng: RngState,
    adam_lr: f64,
    adam_t: BTreeMap<String, u64>,
    arrays: Vec<ArrayEntry>,
}

const CKPT_FORMAT: &str = "dccrn-vae-checkpoint-1";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Stage that produced this state (0 before any training).
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub rng: RngState,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    /// Named arrays in file order: parameters, buffers, Adam moments.
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.extend(self.store.params().map(|(n, t)| (format!("param/{n}"), t)));
        out.extend(self.store.buffers().map(|(n, t)| (format!("buffer/{n}"), t)));
        out.extend(self.adam.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
        out.extend(self.adam.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
        out
    }

    pub fn write_to<W: Write>(&self, mut out: W, dtype: Dtype) -> Result<()> {
        let arrays = self.arrays();
        let mut entries = Vec::with_capacity(arrays.len());
        let mut offset = 0u64;
        for (name, t) in &arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                offset,
                shape: t.shape().to_vec(),
                dtype,
            });
            offset += (t.len() * dtype.width()) as u64;
        }
        let index = CheckpointIndex {
            format: CKPT_FORMAT.into(),
            stage: self.stage,
            step: self.step,
            config: self.config.clone(),
            model: self.model.clone(),
            rng: self.rng.clone(),
            adam_lr: self.adam.lr,
            adam_t: self.adam.t.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&index)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset as usize);
        for (_, t) in &arrays {
            for v in t.iter() {
                match dtype {
                    Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: PathBuf::new(),
            reason,
        };
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 32 {
            return Err(bad(format!("implausible index length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        input.read_exact(&mut json)?;
        let index: CheckpointIndex = serde_json::from_slice(&json)?;
        if index.format != CKPT_FORMAT {
            return Err(bad(format!("unknown format {:?}", index.format)));
        }
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        let mut store = ParamStore::new();
        let mut adam = Adam::new(index.adam_lr);
        adam.t = index.adam_t.clone();
        for e in &index.arrays {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * e.dtype.width();
            let bytes = data
                .get(start..end)
                .ok_or_else(|| bad(format!("array {} runs past the end of the file", e.name)))?;
            let values: Vec<f64> = match e.dtype {
                Dtype::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values).expect("length matches shape");
            let (kind, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| bad(format!("unqualified array name {}", e.name)))?;
            match kind {
                "param" => store.insert(name, t),
                "buffer" => store.set_buffer(name, t),
                "adam.m" => {
                    adam.m.insert(name.to_string(), t);
                }
                "adam.v" => {
                    adam.v.insert(name.to_string(), t);
                }
                _ => return Err(bad(format!("unknown array kind in {}", e.name))),
            }
        }
        Ok(Self {
            stage: index.stage,
            step: index.step,
            config: index.config,
            model: index.model,
            rng: index.rng,
            store,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_as(path, Dtype::F64)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save_as(&self, path: &Path, dtype: Dtype) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f, dtype)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// Checks every array against a fresh store for `model`, naming the
    /// first missing, unexpected or mis-shaped one.
    pub fn check_against(&self, model: &DccrnVae) -> Result<()> {
        let reference = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        let pairs = [
            ("parameter", reference.params().collect::<Vec<_>>(), self.store.params().collect::<Vec<_>>()),
            ("buffer", reference.buffers().collect(), self.store.buffers().collect()),
        ];
        for (kind, want, have) in pairs {
            let have: BTreeMap<&String, &Tensor> = have.into_iter().collect();
            for (name, t) in &want {
                match have.get(name) {
                    None => return Err(Error::ShapeMismatch(format!("checkpoint lacks {kind} {name}"))),
                    Some(h) if h.shape() != t.shape() => {
                        return Err(Error::ShapeMismatch(format!(
                            "{kind} {name}: checkpoint shape {:?}, model expects {:?}",
                            h.shape(),
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
            let want: BTreeMap<&String, &Tensor> = want.into_iter().collect();
            if let Some(extra) = have.keys().find(|n| !want.contains_key(*n)) {
                return Err(Error::ShapeMismatch(format!("checkpoint has unexpected {kind} {extra}")));
            }
        }
        Ok(())
    }
}

/// Parameter groups updated by each stage.
pub fn stage_trains(stage: u8, name: &str) -> bool {
    match stage {
        1 => in_group(name, CLEAN) || in_group(name, NOISE),
        2 => in_group(name, NOISY),
        3 => is_clean_decoder(name) || in_group(name, DISC),
        _ => false,
    }
}

pub fn is_clean_decoder(name: &str) -> bool {
    in_group(name, CLEAN) && !is_encoder_param(name, CLEAN)
}

/// Aligned `(clean, noise, noisy)` training signals, mixed once up front.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub items: Vec<TrainItem>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub noisy: Vec<f64>,
    /// Mean square of `clean`, the reference for silent-crop rejection.
    pub clean_power: f64,
}

/// Crops whose clean power is below this fraction of the utterance's are redrawn.
const MIN_CROP_POWER: f64 = 0.05;
const CROP_ATTEMPTS: usize = 64;

/// `[B, N]` batches of each signal.
#[derive(Clone, Debug)]
pub struct Batch {
    pub clean: Tensor,
    pub noise: Tensor,
    pub noisy: Tensor,
}

impl TrainData {
    pub fn from_triples(triples: &[Triple]) -> Result<Self> {
        let first = triples
            .first()
            .ok_or_else(|| Error::EmptyCorpus("no training utterances".into()))?;
        let sample_rate = first.clean.sample_rate;
        let items = triples
            .iter()
            .map(|t| {
                let m = mix_at_snr(&t.clean, &t.noise, t.snr_db)?;
                let clean_power = m.clean.samples.iter().map(|v| v * v).sum::<f64>() / m.clean.len() as f64;
                Ok(TrainItem {
                    id: t.id.clone(),
                    clean: m.clean.samples,
                    noise: m.noise.samples,
                    noisy: m.noisy.samples,
                    clean_power,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, sample_rate })
    }

    pub fn from_manifest(path: &Path, split: Split) -> Result<Self> {
        let manifest = MixManifest::read_jsonl(path)?;
        let triples = manifest.load(split)?;
        if triples.is_empty() {
            return Err(Error::EmptyCorpus(format!("no {split:?} records in {}", path.display())));
        }
        Self::from_triples(&triples)
    }

    /// Random aligned crops of `crop` samples.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, crop: usize, rng: &mut R) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(Error::EmptyCorpus("no training utterances".into()));
        }
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..batch {
            let item = &self.items[rng.random_range(0..self.items.len())];
            if item.clean.len() < crop {
                return Err(Error::SignalTooShort {
                    len: item.clean.len(),
                    frame_len: crop,
                });
            }
            let mut start = 0;
            for _ in 0..CROP_ATTEMPTS {
                start = rng.random_range(0..=item.clean.len() - crop);
                let power = item.clean[start..start + crop].iter().map(|v| v * v).sum::<f64>() / crop as f64;
                if power >= MIN_CROP_POWER * item.clean_power {
                    break;
                }
            }
            for (dst, src) in out.iter_mut().zip([&item.clean, &item.noise, &item.noisy]) {
                dst.extend_from_slice(&src[start..start + crop]);
            }
        }
        let [clean, noise, noisy] =
            out.map(|v| ArrayD::from_shape_vec(IxDyn(&[batch, crop]), v).expect("batch shape"));
        Ok(Batch { clean, noise, noisy })
    }
}

/// Losses of one optimizer step (stage 3: one discriminator and one generator update).
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub stage: u8,
    /// 1-based step within the stage.
    pub step: u64,
    /// `(name, losses)`: `cvae`/`nvae` in stage 1, `latent` in stage 2,
    /// `disc` and `gen` in stage 3.
    pub losses: Vec<(String, LossBreakdown)>,
    pub grad_norms: Vec<f64>,
}

impl StepReport {
    pub fn loss(&self, name: &str) -> Option<&LossBreakdown> {
        self.losses.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }
}

/// Model, parameters, optimizer and RNG for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DccrnVae,
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub stage: u8,
    pub step: u64,
    basis: StftBasis,
    /// Update counts of stage 3 (discriminator, generator).
    pub updates: (u64, u64),
}

impl Trainer {
    /// Freshly initialised parameters for every group.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DccrnVae::new(config.profile.model_config())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let store = model.init(&mut rng);
        let basis = StftBasis::new(model.config.stft.clone())?;
        Ok(Self {
            adam: Adam::new(config.lr),
            config,
            model,
            store,
            rng,
            stage: 0,
            step: 0,
            basis,
            updates: (0, 0),
        })
    }

    /// Continues from `ckpt`; `config` supplies the run settings, while the
    /// model shape must match the checkpoint.
    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = DccrnVae::new(config.profile.model_config())?;
        ckpt.check_against(&model)?;
        let basis = StftBasis::new(model.config.stft.clone())?;
        let mut adam = ckpt.adam;
        adam.lr = config.lr;
        Ok(Self {
            config,
            model,
            store: ckpt.store,
            adam,
            rng: ckpt.rng.restore()?,
            stage: ckpt.stage,
            step: ckpt.step,
            basis,
            updates: (0, 0),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            step: self.step,
            config: self.config.clone(),
            model: self.model.config.clone(),
            rng: RngState::capture(&self.rng),
            store: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Moves to `stage` with a fresh optimizer. Stage `n > 1` requires the
    /// state to come from stage `n - 1`.
    pub fn begin_stage(&mut self, stage: u8) -> Result<()> {
        if !(1..=3).contains(&stage) {
            return Err(Error::InvalidConfig(format!("no stage {stage}")));
        }
        if stage > 1 && self.stage != stage - 1 {
            return Err(Error::MissingCheckpoint(format!(
                "stage {stage} needs a stage-{} checkpoint, state is from stage {}",
                stage - 1,
                self.stage
            )));
        }
        self.stage = stage;
        self.step = 0;
        self.updates = (0, 0);
        self.adam = Adam::new(self.config.lr);
        Ok(())
    }

    pub fn step(&mut self, data: &TrainData) -> Result<StepReport> {
        if data.sample_rate != self.model.config.stft.sample_rate {
            return Err(Error::ConfigMismatch(format!(
                "training data at {} Hz, model expects {} Hz",
                data.sample_rate, self.model.config.stft.sample_rate
            )));
        }
        let batch = data.sample_batch(self.config.batch_size, self.config.crop_len, &mut self.rng)?;
        self.step += 1;
        let report = match self.stage {
            1 => self.stage1_step(&batch),
            2 => self.stage2_step(&batch),
            3 => self.stage3_step(&batch),
            s => Err(Error::InvalidConfig(format!("call begin_stage before stepping (stage {s})"))),
        };
        report.map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite {
                stage: self.stage,
                step: self.step as usize,
                detail,
            },
            other => other,
        })
    }

    fn noise_pair(&mut self, g: &Graph, like: Var) -> (Var, Var) {
        let shape = g.shape(like);
        (normal_noise(g, &shape, &mut self.rng), normal_noise(g, &shape, &mut self.rng))
    }

    fn finite(&self, name: &str, l: &LossBreakdown) -> Result<()> {
        if l.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                stage: self.stage,
                step: self.step as usize,
                detail: format!("{name} loss {l:?}"),
            })
        }
    }

    /// Backpropagates `total`, applies Adam to the session's trainable
    /// parameters and folds in batch-norm statistics of `keep_stats` layers.
    fn apply(
        &mut self,
        g: &Graph,
        s: &Session,
        total: Var,
        keep_stats: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        let grads = s.gradients(&g.backward(total));
        let stats: Vec<_> = s.take_batch_stats().into_iter().filter(|(n, _)| keep_stats(n)).collect();
        let norm = self.adam.step(&mut self.store, &grads, CLIP_NORM)?;
        self.store.absorb_batch_stats(&stats)?;
        Ok(norm)
    }

    fn stage1_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let g = Graph::new();
        let store = self.store.clone();
        let s = Session::new(&g, &store, |n| stage_trains(1, n));
        let n = batch.clean.shape()[1];
        let mut total: Option<Var> = None;
        let mut losses = Vec::new();
        for (prefix, wave) in [(CLEAN, &batch.clean), (NOISE, &batch.noise)] {
            let wave = g.constant(wave.clone());
            let spec = self.basis.stft_var(&g, wave)?;
            let enc = if prefix == CLEAN {
                self.model.encode_clean(&s, spec, Mode::Train)?
            } else {
                self.model.encode_noise(&s, spec, Mode::Train)?
            };
            let noise = self.noise_pair(&g, enc.posterior.mu_re);
            let z = sample_var(&g, &enc.posterior, noise.0, noise.1);
            let recon = if prefix == CLEAN {
                self.model.decode_clean(&s, z, &enc.skips, Mode::Train)?
            } else {
                self.model.decode_noise(&s, z, &enc.skips, Mode::Train)?
            };
            let recon = self.basis.istft_var(&g, recon, n)?;
            let terms = stage1_loss_var(&g, &enc.posterior, noise, recon, wave)?;
            let breakdown = terms.breakdown(&g);
            self.finite(prefix, &breakdown)?;
            losses.push((prefix.to_string(), breakdown));
            total = Some(match total {
                Some(t) => g.add(t, terms.total),
                None => terms.total,
            });
        }
        let norm = self.apply(&g, &s, total.expect("two VAEs"), |n| stage_trains(1, n))?;
        Ok(StepReport {
            stage: 1,
            step: self.step,
            losses,
            grad_norms: vec![norm],
        })
    }

    fn latent_terms(&mut self, g: &Graph, s: &Session, batch: &Batch) -> Result<LossTerms> {
        let spec = |w: &Tensor| self.basis.stft_var(g, g.constant(w.clone()));
        let (sx, sd, sy) = (spec(&batch.clean)?, spec(&batch.noise)?, spec(&batch.noisy)?);
        let ex = self.model.encode_clean(s, sx, Mode::Eval)?;
        let ed = self.model.encode_noise(s, sd, Mode::Eval)?;
        let ey = self.model.encode_noisy(s, sy, Mode::Train)?;
        let noise = self.noise_pair(g, ey.posterior.mu_re);
        latent_loss_var(g, &ey.posterior, &ex.posterior, &ed.posterior, noise, &ex.skips, &ey.skips, self.config.alpha)
    }

    fn stage2_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let g = Graph::new();
        let store = self.store.clone();
        let s = Session::new(&g, &store, |n| stage_trains(2, n));
        let terms = self.latent_terms(&g, &s, batch)?;
        let breakdown = terms.breakdown(&g);
        self.finite("latent", &breakdown)?;
        let norm = self.apply(&g, &s, terms.total, |n| stage_trains(2, n))?;
        Ok(StepReport {
            stage: 2,
            step: self.step,
            losses: vec![("latent".into(), breakdown)],
            grad_norms: vec![norm],
        })
    }

    /// Clean-decoder output from a posterior draw of the frozen noisy encoder,
    /// as `(spectrogram, waveform)`.
    fn generate(&mut self, g: &Graph, s: &Session, batch: &Batch) -> Result<(Var, Var)> {
        let n = batch.noisy.shape()[1];
        let sy = self.basis.stft_var(g, g.constant(batch.noisy.clone()))?;
        let ey = self.model.encode_noisy(s, sy, Mode::Eval)?;
        let noise = self.noise_pair(g, ey.posterior.mu_re);
        let z = sample_var(g, &ey.posterior, noise.0, noise.1);
        let spec = self.model.decode_clean(s, z, &ey.skips, Mode::Train)?;
        // Resynthesise so the discriminator sees the same consistent spectra
        // as the waveform loss.
        let wave = self.basis.istft_var(g, spec, n)?;
        let spec = self.basis.stft_var(g, wave)?;
        Ok((spec, wave))
    }

    /// Scores `[fake; real]` in one train-mode pass, returned as `(fake, real)`.
    fn score_pair(&self, g: &Graph, s: &Session, fake: Var, real: Var) -> Result<(Var, Var)> {
        let b = g.shape(fake)[0];
        let scores = self.model.discriminate(s, g.concat(&[fake, real], 0), Mode::Train)?;
        Ok((g.slice(scores, 0, 0, b), g.slice(scores, 0, b, 2 * b)))
    }

    fn stage3_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let real_wave = batch.clean.clone();
        // Discriminator update: generator parameters are constants.
        let (disc, disc_norm) = {
            let g = Graph::new();
            let store = self.store.clone();
            let s = Session::new(&g, &store, |n| in_group(n, DISC));
            let (fake, _) = self.generate(&g, &s, batch)?;
            let real = self.basis.stft_var(&g, g.constant(real_wave.clone()))?;
            let (d_fake, d_real) = self.score_pair(&g, &s, fake, real)?;
            let terms = gan_discriminator_loss_var(&g, d_fake, d_real);
            let breakdown = terms.breakdown(&g);
            self.finite("disc", &breakdown)?;
            let norm = self.apply(&g, &s, terms.total, |n| in_group(n, DISC))?;
            (breakdown, norm)
        };
        self.updates.0 += 1;
        // Generator update: only the clean decoder is trainable.
        let (gen, gen_norm) = {
            let g = Graph::new();
            let store = self.store.clone();
            let s = Session::new(&g, &store, is_clean_decoder);
            let (fake, wave) = self.generate(&g, &s, batch)?;
            let target = g.constant(real_wave);
            let real = self.basis.stft_var(&g, target)?;
            let (d_fake, _) = self.score_pair(&g, &s, fake, real)?;
            let terms = gan_generator_loss_var(&g, d_fake, wave, target)?;
            let breakdown = terms.breakdown(&g);
            self.finite("gen", &breakdown)?;
            let norm = self.apply(&g, &s, terms.total, is_clean_decoder)?;
            (breakdown, norm)
        };
        self.updates.1 += 1;
        Ok(StepReport {
            stage: 3,
            step: self.step,
            losses: vec![("disc".into(), disc), ("gen".into(), gen)],
            grad_norms: vec![disc_norm, gen_norm],
        })
    }

    /// Runs the remaining steps of the current stage, logging every step and
    /// saving periodic and final checkpoints to `config.ckpt_dir`.
    pub fn run_current_stage<W: Write>(
        &mut self,
        data: &TrainData,
        mut log: Option<&mut LossLog<W>>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Checkpoint> {
        let path = self.config.stage_path(self.stage);
        while (self.step as usize) < self.config.steps {
            let report = match self.step(data) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    self.dump_diagnostics(&e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(log) = log.as_deref_mut() {
                for (name, l) in &report.losses {
                    log.record(report.step, report.stage, &prefixed(name, l))?;
                }
            }
            on_step(&report);
            if self.config.ckpt_every > 0 && report.step as usize % self.config.ckpt_every == 0 {
                self.checkpoint().save(&path)?;
            }
        }
        if let Some(log) = log {
            log.flush()?;
        }
        let ckpt = self.checkpoint();
        ckpt.save(&path)?;
        Ok(ckpt)
    }

    /// Writes the failing step's state next to the checkpoints; best effort.
    fn dump_diagnostics(&self, err: &Error) {
        let path = self
            .config
            .ckpt_dir
            .join(format!("nonfinite_stage{}_step{}.ckpt", self.stage, self.step));
        log::error!("{err}; dumping state to {}", path.display());
        if let Err(e) = self.checkpoint().save(&path) {
            log::error!("could not write diagnostic dump: {e}");
        }
    }
}

/// Prefixes component names with the model they belong to.
fn prefixed(name: &str, l: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        total: l.total,
        components: l.components.iter().map(|(k, v)| (format!("{name}.{k}"), *v)).collect(),
    }
}

/// Runs the stages selected by `config.stage`. Later stages start from the
/// previous stage's checkpoint in `config.ckpt_dir` unless it was produced
/// in this same run.
pub fn run_training<W: Write>(
    config: &TrainConfig,
    data: &TrainData,
    mut log: Option<&mut LossLog<W>>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Checkpoint> {
    let stages = config.stage.stages();
    let first = stages[0];
    let mut trainer = if first == 1 {
        Trainer::new(config.clone())?
    } else {
        let prev = config.stage_path(first - 1);
        if !prev.exists() {
            return Err(Error::MissingCheckpoint(format!(
                "missing stage-{} checkpoint at {}",
                first - 1,
                prev.display()
            )));
        }
        let ckpt = Checkpoint::load(&prev)?;
        if ckpt.stage != first - 1 {
            return Err(Error::MissingCheckpoint(format!(
                "missing stage-{} checkpoint: {} holds stage {}",
                first - 1,
                prev.display(),
                ckpt.stage
            )));
        }
        Trainer::from_checkpoint(config.clone(), ckpt)?
    };
    let mut last = None;
    for stage in stages {
        trainer.begin_stage(stage)?;
        log::info!("stage {stage}: {} steps", config.steps);
        last = Some(trainer.run_current_stage(data, log.as_deref_mut(), &mut on_step)?);
    }
    Ok(last.expect("at least one stage"))
}

/// Source of the latent and skips fed to the clean decoder at inference.
#[derive(Clone, Copy, Debug)]
pub enum EnhanceMode<'a> {
    /// Noisy-speech encoder on the mixture.
    Noisy,
    /// Clean encoder on the given reference (performance ceiling).
    Oracle(&'a Waveform),
}

/// Frozen model for inference.
pub struct Enhancer {
    pub model: DccrnVae,
    pub store: ParamStore,
    basis: StftBasis,
}

impl Enhancer {
    pub fn new(model: DccrnVae, store: ParamStore) -> Result<Self> {
        let basis = StftBasis::new(model.config.stft.clone())?;
        Ok(Self { model, store, basis })
    }

    /// Requires a checkpoint from stage 2 or later.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.stage < 2 {
            return Err(Error::MissingCheckpoint(format!(
                "enhancement needs a stage-2 or stage-3 checkpoint, got stage {}",
                ckpt.stage
            )));
        }
        let model = DccrnVae::new(ckpt.model.clone())?;
        ckpt.check_against(&model)?;
        Self::new(model, ckpt.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Clean-VAE autoencoding of `clean` (posterior mean, eval mode).
    pub fn reconstruct(&self, clean: &Waveform) -> Result<Waveform> {
        self.enhance(clean, EnhanceMode::Oracle(clean))
    }

    /// Decodes the posterior mean (no sampling); output length equals input length.
    pub fn enhance(&self, noisy: &Waveform, mode: EnhanceMode) -> Result<Waveform> {
        let rate = self.model.config.stft.sample_rate;
        if noisy.sample_rate != rate {
            return Err(Error::ConfigMismatch(format!(
                "input at {} Hz, model expects {rate} Hz",
                noisy.sample_rate
            )));
        }
        let source = match mode {
            EnhanceMode::Noisy => noisy,
            EnhanceMode::Oracle(clean) => {
                if clean.len() != noisy.len() || clean.sample_rate != rate {
                    return Err(Error::ShapeMismatch(format!(
                        "oracle reference has {} samples at {} Hz, input {} at {rate} Hz",
                        clean.len(),
                        clean.sample_rate,
                        noisy.len()
                    )));
                }
                clean
            }
        };
        let g = Graph::new();
        let s = Session::frozen(&g, &self.store);
        let n = source.len();
        let wave = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, n]), source.samples.clone()).expect("shape"));
        let spec = self.basis.stft_var(&g, wave)?;
        let enc = match mode {
            EnhanceMode::Noisy => self.model.encode_noisy(&s, spec, Mode::Eval)?,
            EnhanceMode::Oracle(_) => self.model.encode_clean(&s, spec, Mode::Eval)?,
        };
        let z = (enc.posterior.mu_re, enc.posterior.mu_im);
        let out = self.model.decode_clean(&s, z, &enc.skips, Mode::Eval)?;
        let out = self.basis.istft_var(&g, out, n)?;
        let samples: Vec<f64> = g.value(out).iter().copied().collect();
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: 0,
                step: 0,
                detail: "enhanced waveform".into(),
            });
        }
        Waveform::new(samples, rate)
    }
}

/// Config from an optional file, then the environment checkpoint directory,
/// then explicit `key=value` overrides (later wins).
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::new(Profile::Desk),
    };
    if let Ok(dir) = std::env::var(CKPT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.ckpt_dir = PathBuf::from(dir);
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_config_and_rejects_unknown_keys() {
        let cfg = TrainConfig::parse(
            "profile = paper\n# comment\nstage = 2\nsteps = 5 # trailing\nlr=0.002\ndata.manifest = m.jsonl\nckpt.dir = out\n",
        )
        .unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.stage, StageSel::Two);
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.manifest, Some(PathBuf::from("m.jsonl")));
        assert_eq!(cfg.ckpt_dir, PathBuf::from("out"));
        assert!(TrainConfig::parse("stepz = 4").is_err());
        assert!(TrainConfig::parse("steps = 0").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("profile = huge").is_err());
        assert!(TrainConfig::parse("steps").is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let mut adam = Adam::new(0.1);
        let grads: BTreeMap<String, Tensor> = [("w".to_string(), ndarray::arr1(&[3.0, -0.5]).into_dyn())].into();
        let norm = adam.step(&mut store, &grads, 5.0).unwrap();
        assert!((norm - (9.25f64).sqrt()).abs() < 1e-12);
        let w = store.get("w").unwrap();
        // Bias-corrected first step is lr * sign(g) up to epsilon.
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn clipping_rescales_to_global_norm() {
        let mut store = ParamStore::new();
        store.insert("a", ndarray::arr1(&[0.0]).into_dyn());
        store.insert("b", ndarray::arr1(&[0.0]).into_dyn());
        let mut adam = Adam::new(1.0);
        let grads: BTreeMap<String, Tensor> = [
            ("a".to_string(), ndarray::arr1(&[30.0]).into_dyn()),
            ("b".to_string(), ndarray::arr1(&[40.0]).into_dyn()),
        ]
        .into();
        assert_eq!(adam.step(&mut store, &grads, 5.0).unwrap(), 50.0);
        // m = 0.1 * clipped gradient (3, 4).
        assert!((adam.m["a"][0] - 0.3).abs() < 1e-12 && (adam.m["b"][0] - 0.4).abs() < 1e-12);
        let nan: BTreeMap<String, Tensor> = [("a".to_string(), ndarray::arr1(&[f64::NAN]).into_dyn())].into();
        assert!(matches!(adam.step(&mut store, &nan, 5.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..50 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }

    #[test]
    fn stage_groups() {
        let stages = |name: &str| (1..=3).filter(|s| stage_trains(*s, name)).collect::<Vec<u8>>();
        assert_eq!(stages("cvae.enc0.conv.w_re"), [1]);
        assert_eq!(stages("cvae.head_mu.w_re"), [1]);
        assert_eq!(stages("cvae.dec0.deconv.w_re"), [1, 3]);
        assert_eq!(stages("cvae.proj.w_re"), [1, 3]);
        assert_eq!(stages("nvae.dec0.deconv.w_re"), [1]);
        assert_eq!(stages("nsvae.lstm.w_ih"), [2]);
        assert_eq!(stages("disc.lstm.w_ih"), [3]);
    }
}
