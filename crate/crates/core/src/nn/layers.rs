use dccrn_autograd::{BnMode, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;

use super::store::{uniform, Mode, ParamStore, Session, BN_EPS};
use crate::error::{Error, Result};

fn check_channels(s: &Session, x: Var, axis: usize, expected: usize, what: &str) -> Result<Vec<usize>> {
    let shape = s.g.shape(x);
    if shape.len() <= axis || shape[axis] != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expected} on axis {axis}, got input {shape:?}"
        )));
    }
    Ok(shape)
}

/// Complex weight pair initialised from a fan-in scaled uniform, each part
/// shrunk by sqrt(2) so the complex weight has variance `1 / fan_in`.
fn init_complex<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
    let bound = (3.0 / fan_in as f64).sqrt() / std::f64::consts::SQRT_2;
    store.insert(format!("{name}.w_re"), uniform(rng, shape, bound));
    store.insert(format!("{name}.w_im"), uniform(rng, shape, bound));
}

fn init_bias(store: &mut ParamStore, name: &str, len: usize) {
    store.insert(format!("{name}.b_re"), ArrayD::zeros(IxDyn(&[len])));
    store.insert(format!("{name}.b_im"), ArrayD::zeros(IxDyn(&[len])));
}

/// `[b_re, b_im]` as a tensor broadcastable against `[B, 2C, F, T]`.
fn stacked_bias(s: &Session, name: &str, trailing: usize) -> Result<Var> {
    let b = s.g.concat(&[s.param(&format!("{name}.b_re"))?, s.param(&format!("{name}.b_im"))?], 0);
    let len = s.g.shape(b)[0];
    let mut shape = vec![1, len];
    shape.extend(std::iter::repeat_n(1, trailing));
    Ok(s.g.reshape(b, &shape))
}

/// Complex 2-D convolution over (frequency, time).
///
/// Frequency is padded symmetrically, time only on the left, so with kernel
/// `(5, 2)` and stride `(2, 1)` the frequency axis halves exactly and the
/// output at frame `t` sees only frames `<= t`.
#[derive(Clone, Debug)]
pub struct ComplexConv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad_freq: (usize, usize),
    pub pad_time_left: usize,
}

impl ComplexConv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        let lo = (kernel.0 - 1) / 2;
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_freq: (lo, kernel.0 - 1 - lo),
            pad_time_left: kernel.1 - 1,
        }
    }

    pub fn with_padding(mut self, pad_freq: (usize, usize), pad_time_left: usize) -> Self {
        self.pad_freq = pad_freq;
        self.pad_time_left = pad_time_left;
        self
    }

    pub fn output_hw(&self, f: usize, t: usize) -> (usize, usize) {
        let fp = f + self.pad_freq.0 + self.pad_freq.1;
        let tp = t + self.pad_time_left;
        ((fp - self.kernel.0) / self.stride.0 + 1, (tp - self.kernel.1) / self.stride.1 + 1)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let shape = [self.out_ch, self.in_ch, self.kernel.0, self.kernel.1];
        init_complex(store, &self.name, &shape, self.in_ch * self.kernel.0 * self.kernel.1, rng);
        init_bias(store, &self.name, self.out_ch);
    }

    /// `[B, 2 in_ch, F, T] -> [B, 2 out_ch, F', T']`.
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.g;
        check_channels(s, x, 1, 2 * self.in_ch, &self.name)?;
        let wr = s.param(&format!("{}.w_re", self.name))?;
        let wi = s.param(&format!("{}.w_im", self.name))?;
        // [[Wr, -Wi], [Wi, Wr]] over (output, input) channel blocks.
        let top = g.concat(&[wr, g.neg(wi)], 1);
        let bottom = g.concat(&[wi, wr], 1);
        let w = g.concat(&[top, bottom], 0);
        let mut x = x;
        if self.pad_freq != (0, 0) {
            x = g.pad(x, 2, self.pad_freq.0, self.pad_freq.1);
        }
        if self.pad_time_left > 0 {
            x = g.pad(x, 3, self.pad_time_left, 0);
        }
        let y = g.conv2d(x, w, self.stride);
        Ok(g.add(y, stacked_bias(s, &self.name, 2)?))
    }
}

/// Which end of the time axis a transposed convolution trims.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeCrop {
    /// Drop leading frames: the exact adjoint of a left-padded convolution.
    Start,
    /// Drop trailing frames: keeps the layer causal, as in the decoder.
    End,
}

/// Complex transposed convolution, the adjoint of [`ComplexConv2d`] with the
/// same kernel, stride and padding (when cropping at [`TimeCrop::Start`]).
#[derive(Clone, Debug)]
pub struct ComplexConvTranspose2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad_freq: (usize, usize),
    pub pad_time_left: usize,
    pub time_crop: TimeCrop,
}

impl ComplexConvTranspose2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        time_crop: TimeCrop,
    ) -> Self {
        let lo = (kernel.0 - 1) / 2;
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_freq: (lo, kernel.0 - 1 - lo),
            pad_time_left: kernel.1 - 1,
            time_crop,
        }
    }

    pub fn with_padding(mut self, pad_freq: (usize, usize), pad_time_left: usize) -> Self {
        self.pad_freq = pad_freq;
        self.pad_time_left = pad_time_left;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let shape = [self.in_ch, self.out_ch, self.kernel.0, self.kernel.1];
        // Each output position receives about kernel / stride contributions per input channel.
        let fan_in = (self.in_ch * self.kernel.0 * self.kernel.1 / (self.stride.0 * self.stride.1)).max(1);
        init_complex(store, &self.name, &shape, fan_in, rng);
        init_bias(store, &self.name, self.out_ch);
    }

    /// `[B, 2 in_ch, F, T] -> [B, 2 out_ch, out_freq, T']` where `T'` is the
    /// time length the matching convolution would have consumed.
    pub fn forward(&self, s: &Session, x: Var, out_freq: usize) -> Result<Var> {
        let g = s.g;
        let shape = check_channels(s, x, 1, 2 * self.in_ch, &self.name)?;
        let (f, t) = (shape[2], shape[3]);
        let wr = s.param(&format!("{}.w_re", self.name))?;
        let wi = s.param(&format!("{}.w_im", self.name))?;
        // [[Wr, Wi], [-Wi, Wr]] over (input, output) channel blocks.
        let top = g.concat(&[wr, wi], 1);
        let bottom = g.concat(&[g.neg(wi), wr], 1);
        let w = g.concat(&[top, bottom], 0);
        let plane_f = out_freq + self.pad_freq.0 + self.pad_freq.1;
        let t_out = (t - 1) * self.stride.1 + self.kernel.1 - self.pad_time_left;
        let plane_t = t_out + self.pad_time_left;
        if plane_f < (f - 1) * self.stride.0 + self.kernel.0 || (plane_f - self.kernel.0) / self.stride.0 + 1 != f {
            return Err(Error::ShapeMismatch(format!(
                "{}: {f} frequency rows cannot be upsampled to {out_freq}",
                self.name
            )));
        }
        let y = g.conv_transpose2d(x, w, self.stride, (plane_f, plane_t));
        let y = g.slice(y, 2, self.pad_freq.0, self.pad_freq.0 + out_freq);
        let y = match self.time_crop {
            TimeCrop::Start => g.slice(y, 3, self.pad_time_left, plane_t),
            TimeCrop::End => g.slice(y, 3, 0, t_out),
        };
        Ok(g.add(y, stacked_bias(s, &self.name, 2)?))
    }
}

/// Complex batch normalisation with full 2x2 whitening per channel.
#[derive(Clone, Debug)]
pub struct ComplexBatchNorm {
    pub name: String,
    pub channels: usize,
}

impl ComplexBatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        let ones = || Array1::<f64>::ones(c).into_dyn();
        let zeros = || Array1::<f64>::zeros(c).into_dyn();
        store.insert(format!("{}.gamma_rr", self.name), ones());
        store.insert(format!("{}.gamma_ri", self.name), zeros());
        store.insert(format!("{}.gamma_ii", self.name), ones());
        store.insert(format!("{}.beta_re", self.name), zeros());
        store.insert(format!("{}.beta_im", self.name), zeros());
        store.init_running_stats(&self.name, c);
    }

    pub fn forward(&self, s: &Session, x: Var, mode: Mode) -> Result<Var> {
        let shape = check_channels(s, x, 1, 2 * self.channels, &self.name)?;
        let p = |k: &str| s.param(&format!("{}.{k}", self.name));
        let bn_mode = match mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: train-mode statistics need a batch of at least two",
                        self.name
                    )));
                }
                BnMode::Train { eps: BN_EPS }
            }
            Mode::Eval => BnMode::Eval {
                stats: s.store().running_stats(&self.name)?,
                eps: BN_EPS,
            },
        };
        let (y, stats) = s
            .g
            .complex_batch_norm(x, p("gamma_rr")?, p("gamma_ri")?, p("gamma_ii")?, p("beta_re")?, p("beta_im")?, &bn_mode);
        if let Some(stats) = stats {
            s.record_batch_stats(&self.name, stats);
        }
        Ok(y)
    }
}

/// PReLU applied to real and imaginary parts with one shared slope per
/// complex channel.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub name: String,
    pub channels: usize,
}

impl Prelu {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.slope", self.name), Array1::from_elem(self.channels, 0.25).into_dyn());
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        check_channels(s, x, 1, 2 * self.channels, &self.name)?;
        let a = s.param(&format!("{}.slope", self.name))?;
        Ok(s.g.prelu(x, s.g.concat(&[a, a], 0)))
    }
}

/// Complex affine map on `[N, 2 in_dim]` rows (real block then imaginary block).
#[derive(Clone, Debug)]
pub struct ComplexLinear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ComplexLinear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        init_complex(store, &self.name, &[self.in_dim, self.out_dim], self.in_dim, rng);
        init_bias(store, &self.name, self.out_dim);
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.g;
        check_channels(s, x, 1, 2 * self.in_dim, &self.name)?;
        let wr = s.param(&format!("{}.w_re", self.name))?;
        let wi = s.param(&format!("{}.w_im", self.name))?;
        // Rows: real then imaginary input block; columns: real then imaginary output.
        let top = g.concat(&[wr, wi], 1);
        let bottom = g.concat(&[g.neg(wi), wr], 1);
        let w = g.concat(&[top, bottom], 0);
        Ok(g.add(g.matmul(x, w), stacked_bias(s, &self.name, 0)?))
    }
}

/// Real single-layer LSTM.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub units: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, input: usize, units: usize) -> Self {
        Self {
            name: name.into(),
            input,
            units,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.units as f64).sqrt();
        store.insert(format!("{}.w_ih", self.name), uniform(rng, &[self.input, 4 * self.units], bound));
        store.insert(format!("{}.w_hh", self.name), uniform(rng, &[self.units, 4 * self.units], bound));
        store.insert(format!("{}.bias", self.name), uniform(rng, &[4 * self.units], bound));
    }

    /// `[B, T, input] -> [B, T, units]`.
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        check_channels(s, x, 2, self.input, &self.name)?;
        let p = |k: &str| s.param(&format!("{}.{k}", self.name));
        Ok(s.g.lstm(x, p("w_ih")?, p("w_hh")?, p("bias")?))
    }
}

/// Complex LSTM from two real LSTMs `R` and `I`:
/// `out_re = R(x_re) - I(x_im)`, `out_im = R(x_im) + I(x_re)`.
#[derive(Clone, Debug)]
pub struct ComplexLstm {
    pub real: Lstm,
    pub imag: Lstm,
}

impl ComplexLstm {
    pub fn new(name: &str, input: usize, units: usize) -> Self {
        Self {
            real: Lstm::new(format!("{name}.real"), input, units),
            imag: Lstm::new(format!("{name}.imag"), input, units),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.real.init(store, rng);
        self.imag.init(store, rng);
    }

    /// `[B, T, 2 input]` (real block, imaginary block) `-> [B, T, 2 units]`.
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.g;
        let d = self.real.input;
        let shape = check_channels(s, x, 2, 2 * d, &self.real.name)?;
        let b = shape[0];
        // Both parts go through each LSTM in one batched call.
        let parts = g.concat(&[g.slice(x, 2, 0, d), g.slice(x, 2, d, 2 * d)], 0);
        let r = self.real.forward(s, parts)?;
        let i = self.imag.forward(s, parts)?;
        let out_re = g.sub(g.slice(r, 0, 0, b), g.slice(i, 0, b, 2 * b));
        let out_im = g.add(g.slice(r, 0, b, 2 * b), g.slice(i, 0, 0, b));
        Ok(g.concat(&[out_re, out_im], 2))
    }
}
