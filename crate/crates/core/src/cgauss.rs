//! Diagonal complex Gaussians with pseudo-covariance.
//!
//! Each latent element `z` with mean `mu`, covariance `sigma = E|z-mu|^2` and
//! pseudo-covariance `delta = E[(z-mu)^2]` is the real 2-D Gaussian over
//! `(Re z, Im z)` with covariance
//! `C = 0.5 [[sigma + Re delta, Im delta], [Im delta, sigma - Re delta]]`.
//!
//! The graph functions ([`make_cgd_var`], [`sample_var`], [`log_density_var`],
//! [`kl_sampled_var`]) are what training differentiates through. The plain
//! functions evaluate the same graphs on constants; [`kl_analytic`] is an
//! independent closed form used to check the sampled estimator.

use dccrn_autograd::{Graph, Tensor, Var};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-6;
/// Relative floor on `det C / (sigma^2 / 4) = 1 - |delta|^2 / sigma^2`.
pub const DET_FLOOR: f64 = 1e-9;
/// Keeps `|delta|` strictly below `sigma` even where `tanh` rounds to 1.
const DELTA_SHRINK: f64 = 1.0 - 1e-9;
const CHOL_EPS: f64 = 1e-9;

/// Per-element parameters, each `L x T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CgdParams {
    pub mu: Array2<Complex64>,
    pub sigma: Array2<f64>,
    pub delta: Array2<Complex64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Array2<Complex64>,
}

impl CgdParams {
    pub fn dims(&self) -> (usize, usize) {
        self.sigma.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.mu.dim() != dims || self.delta.dim() != dims {
            return Err(Error::ShapeMismatch(format!(
                "mu {:?}, sigma {:?}, delta {:?}",
                self.mu.dim(),
                dims,
                self.delta.dim()
            )));
        }
        for ((m, s), d) in self.mu.iter().zip(&self.sigma).zip(&self.delta) {
            if !(m.re.is_finite() && m.im.is_finite() && s.is_finite() && d.re.is_finite() && d.im.is_finite()) {
                return Err(Error::InvalidParams("non-finite entry".into()));
            }
            if *s <= 0.0 {
                return Err(Error::InvalidParams(format!("sigma = {s} is not positive")));
            }
            if d.norm() > *s * (1.0 + 1e-12) {
                return Err(Error::InvalidParams(format!("|delta| = {} exceeds sigma = {s}", d.norm())));
            }
        }
        Ok(())
    }

    /// `[1, T, L]` graph constants.
    pub fn to_vars(&self, g: &Graph) -> CgdVars {
        let t = |a: Array2<f64>| g.constant(a.t().as_standard_layout().into_owned().insert_axis(Axis(0)).into_dyn());
        CgdVars {
            mu_re: t(self.mu.mapv(|c| c.re)),
            mu_im: t(self.mu.mapv(|c| c.im)),
            sigma: t(self.sigma.clone()),
            delta_re: t(self.delta.mapv(|c| c.re)),
            delta_im: t(self.delta.mapv(|c| c.im)),
        }
    }

    /// Reads batch item `item` of `[B, T, L]` graph values back as `L x T`.
    pub fn from_vars(g: &Graph, vars: &CgdVars, item: usize) -> Self {
        let get = |v: Var| {
            let value = g.value(v);
            value.index_axis(Axis(0), item).t().to_owned().into_dimensionality().expect("[B, T, L]")
        };
        let join = |re: Array2<f64>, im: Array2<f64>| {
            ndarray::Zip::from(&re).and(&im).map_collect(|&a, &b| Complex64::new(a, b))
        };
        Self {
            mu: join(get(vars.mu_re), get(vars.mu_im)),
            sigma: get(vars.sigma),
            delta: join(get(vars.delta_re), get(vars.delta_im)),
        }
    }
}

/// Distribution parameters as graph nodes, all `[B, T, L]` (or broadcastable).
#[derive(Clone, Copy, Debug)]
pub struct CgdVars {
    pub mu_re: Var,
    pub mu_im: Var,
    pub sigma: Var,
    pub delta_re: Var,
    pub delta_im: Var,
}

/// Constrains raw head outputs: `sigma = softplus(s) + 1e-6`,
/// `delta = sigma * tanh(|r|) * r / |r|` (slightly shrunk so `|delta| < sigma`).
pub fn make_cgd_var(g: &Graph, mu_re: Var, mu_im: Var, sigma_raw: Var, delta_re_raw: Var, delta_im_raw: Var) -> CgdVars {
    let sigma = g.add_scalar(g.softplus(sigma_raw), SIGMA_FLOOR);
    let mag2 = g.add(g.square(delta_re_raw), g.square(delta_im_raw));
    let gain = g.mul(g.scale(sigma, DELTA_SHRINK), g.tanh_ratio(mag2));
    CgdVars {
        mu_re,
        mu_im,
        sigma,
        delta_re: g.mul(gain, delta_re_raw),
        delta_im: g.mul(gain, delta_im_raw),
    }
}

/// Lower Cholesky factor entries `(l11, l21, l22)` of `C`.
///
/// `l22` uses `d = det C / c11` written in closed form and the smoothed root
/// `d / sqrt(d + eps)`, which is exactly zero in the rank-one case `delta = sigma`.
fn cholesky_var(g: &Graph, p: &CgdVars) -> (Var, Var, Var) {
    let c11 = g.scale(g.add(p.sigma, p.delta_re), 0.5);
    let l11 = g.sqrt(g.add_scalar(c11, 1e-300));
    let l21 = g.div(g.scale(p.delta_im, 0.5), l11);
    let d = g.div(g.scale(det_times_four(g, p), 0.25), c11);
    let l22 = g.div(d, g.sqrt(g.add_scalar(d, CHOL_EPS)));
    (l11, l21, l22)
}

/// `4 det C = sigma^2 - |delta|^2`.
fn det_times_four(g: &Graph, p: &CgdVars) -> Var {
    let d2 = g.add(g.square(p.delta_re), g.square(p.delta_im));
    g.sub(g.square(p.sigma), d2)
}

/// Reparameterised draw `z = mu + L n` for standard normal `n = (n_re, n_im)`.
pub fn sample_var(g: &Graph, p: &CgdVars, noise_re: Var, noise_im: Var) -> (Var, Var) {
    let (l11, l21, l22) = cholesky_var(g, p);
    let z_re = g.add(p.mu_re, g.mul(l11, noise_re));
    let z_im = g.add(p.mu_im, g.add(g.mul(l21, noise_re), g.mul(l22, noise_im)));
    (z_re, z_im)
}

/// Elementwise log-density of `(z_re, z_im)`.
pub fn log_density_var(g: &Graph, p: &CgdVars, z_re: Var, z_im: Var) -> Var {
    let x = g.sub(z_re, p.mu_re);
    let y = g.sub(z_im, p.mu_im);
    let det4 = det_times_four(g, p);
    // v^T C^{-1} v with C^{-1} = adj(C) / det C.
    let c11 = g.add(p.sigma, p.delta_re);
    let c22 = g.sub(p.sigma, p.delta_re);
    let quad_num = g.sub(
        g.add(g.mul(c22, g.square(x)), g.mul(c11, g.square(y))),
        g.scale(g.mul(p.delta_im, g.mul(x, y)), 2.0),
    );
    let quad = g.scale(g.div(quad_num, det4), 2.0);
    let log_det = g.add_scalar(g.ln(det4), -(4.0f64).ln());
    let lp = g.add(g.scale(log_det, -0.5), g.scale(quad, -0.5));
    g.add_scalar(lp, -(2.0 * std::f64::consts::PI).ln())
}

/// One-sample KL estimate `log p(z) - log q(z)`, `z ~ p`, summed over all
/// axes but the first and averaged over the first (batch) axis.
pub fn kl_sampled_var(g: &Graph, p: &CgdVars, q: &CgdVars, noise_re: Var, noise_im: Var) -> Var {
    let (z_re, z_im) = sample_var(g, p, noise_re, noise_im);
    let diff = g.sub(log_density_var(g, p, z_re, z_im), log_density_var(g, q, z_re, z_im));
    let batch = g.shape(diff)[0] as f64;
    g.scale(g.sum(diff), 1.0 / batch)
}

/// Plain-array version of [`make_cgd_var`].
pub fn make_cgd(mu_raw: &Array2<Complex64>, sigma_raw: &Array2<f64>, delta_raw: &Array2<Complex64>) -> Result<CgdParams> {
    if mu_raw.dim() != sigma_raw.dim() || delta_raw.dim() != sigma_raw.dim() {
        return Err(Error::ShapeMismatch("raw head outputs differ in shape".into()));
    }
    let g = Graph::new();
    let c = |a: Array2<f64>| g.constant(a.t().as_standard_layout().into_owned().insert_axis(Axis(0)).into_dyn());
    let vars = make_cgd_var(
        &g,
        c(mu_raw.mapv(|v| v.re)),
        c(mu_raw.mapv(|v| v.im)),
        c(sigma_raw.clone()),
        c(delta_raw.mapv(|v| v.re)),
        c(delta_raw.mapv(|v| v.im)),
    );
    Ok(CgdParams::from_vars(&g, &vars, 0))
}

pub fn standard_prior(latent: usize, frames: usize) -> CgdParams {
    CgdParams {
        mu: Array2::zeros((latent, frames)),
        sigma: Array2::ones((latent, frames)),
        delta: Array2::zeros((latent, frames)),
    }
}

/// Graph constant of `[1, T, L]` standard normal noise components.
fn noise_constant(g: &Graph, noise: &Array4<f64>, part: usize) -> Var {
    // noise: [n, L, T, 2] -> [n, T, L]
    let v = noise.index_axis(Axis(3), part).permuted_axes([0, 2, 1]).as_standard_layout().into_owned();
    g.constant(v.into_dyn())
}

/// Draws one sample per leading index of `noise` (`[n, L, T, 2]`), giving `[n, L, T]`.
pub fn sample_many(params: &CgdParams, noise: &Array4<f64>) -> Result<Array3<Complex64>> {
    params.validate()?;
    let (l, t) = params.dims();
    let s = noise.shape();
    if s[1] != l || s[2] != t || s[3] != 2 {
        return Err(Error::ShapeMismatch(format!("noise {s:?} for parameters {l}x{t}")));
    }
    if params.delta.iter().zip(&params.sigma).any(|(d, s)| s + d.re <= 1e-12 * s) {
        return Err(Error::Degenerate(
            "delta = -sigma makes the first Cholesky pivot zero".into(),
        ));
    }
    let g = Graph::new();
    let p = params.to_vars(&g);
    let (z_re, z_im) = sample_var(&g, &p, noise_constant(&g, noise, 0), noise_constant(&g, noise, 1));
    let (re, im) = (g.value(z_re), g.value(z_im));
    Ok(Array3::from_shape_fn((s[0], l, t), |(n, i, j)| Complex64::new(re[[n, j, i]], im[[n, j, i]])))
}

/// Deterministic draw given per-element noise `[L, T, 2]`.
pub fn sample(params: &CgdParams, noise: &Array3<f64>) -> Result<LatentSample> {
    let noise = noise.clone().insert_axis(Axis(0));
    let z = sample_many(params, &noise)?.index_axis_move(Axis(0), 0);
    Ok(LatentSample { z })
}

fn check_density_floor(params: &CgdParams) -> Result<()> {
    for (d, s) in params.delta.iter().zip(&params.sigma) {
        let rel = 1.0 - d.norm_sqr() / (s * s);
        if rel < DET_FLOOR {
            return Err(Error::Degenerate(format!(
                "det C is {rel:e} of its circular value (floor {DET_FLOOR:e})"
            )));
        }
    }
    Ok(())
}

fn latent_constant(g: &Graph, z: &Array3<Complex64>, f: fn(&Complex64) -> f64) -> Var {
    let v = z.map(f).permuted_axes([0, 2, 1]).as_standard_layout().into_owned();
    g.constant(v.into_dyn())
}

/// Elementwise log-density for `[n, L, T]` points, returned as `[n, L, T]`.
pub fn log_density_many(params: &CgdParams, z: &Array3<Complex64>) -> Result<Array3<f64>> {
    params.validate()?;
    check_density_floor(params)?;
    let (l, t) = params.dims();
    let s = z.shape();
    if s[1] != l || s[2] != t {
        return Err(Error::ShapeMismatch(format!("points {s:?} for parameters {l}x{t}")));
    }
    let g = Graph::new();
    let p = params.to_vars(&g);
    let lp = log_density_var(&g, &p, latent_constant(&g, z, |c| c.re), latent_constant(&g, z, |c| c.im));
    let v = g.value(lp);
    Ok(Array3::from_shape_fn((s[0], l, t), |(n, i, j)| v[[n, j, i]]))
}

pub fn log_density(params: &CgdParams, z: &LatentSample) -> Result<Array2<f64>> {
    let z = z.z.clone().insert_axis(Axis(0));
    Ok(log_density_many(params, &z)?.index_axis_move(Axis(0), 0))
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// `(1/n) sum_k [log p(z_k) - log q(z_k)]` over `n` draws `z_k ~ p`, each draw
/// summed over all elements.
pub fn kl_sampled<R: Rng + ?Sized>(p: &CgdParams, q: &CgdParams, n_samples: usize, rng: &mut R) -> Result<KlEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("kl_sampled needs at least one sample".into()));
    }
    if p.dims() != q.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.dims(), q.dims())));
    }
    let (l, t) = p.dims();
    let noise = Array4::from_shape_simple_fn((n_samples, l, t, 2), || rng.sample::<f64, _>(StandardNormal));
    let z = sample_many(p, &noise)?;
    let lp = log_density_many(p, &z)?;
    let lq = log_density_many(q, &z)?;
    let per_draw: Vec<f64> = (&lp - &lq).sum_axis(Axis(2)).sum_axis(Axis(1)).to_vec();
    let n = n_samples as f64;
    let mean = per_draw.iter().sum::<f64>() / n;
    let var = if n_samples > 1 {
        per_draw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
    })
}

/// Exact KL through the equivalent real 2-D Gaussians, summed over elements.
pub fn kl_analytic(p: &CgdParams, q: &CgdParams) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p.dims() != q.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.dims(), q.dims())));
    }
    check_density_floor(q)?;
    let cov = |s: f64, d: Complex64| [[0.5 * (s + d.re), 0.5 * d.im], [0.5 * d.im, 0.5 * (s - d.re)]];
    let mut total = 0.0;
    for idx in 0..p.sigma.len() {
        let (i, j) = (idx / p.dims().1, idx % p.dims().1);
        let cp = cov(p.sigma[[i, j]], p.delta[[i, j]]);
        let cq = cov(q.sigma[[i, j]], q.delta[[i, j]]);
        let det_p = cp[0][0] * cp[1][1] - cp[0][1] * cp[1][0];
        let det_q = cq[0][0] * cq[1][1] - cq[0][1] * cq[1][0];
        if det_p <= 0.0 {
            return Err(Error::Degenerate("KL from a singular distribution is infinite".into()));
        }
        let inv_q = [
            [cq[1][1] / det_q, -cq[0][1] / det_q],
            [-cq[1][0] / det_q, cq[0][0] / det_q],
        ];
        let trace = (0..2)
            .map(|a| (0..2).map(|b| inv_q[a][b] * cp[b][a]).sum::<f64>())
            .sum::<f64>();
        let dm = q.mu[[i, j]] - p.mu[[i, j]];
        let m = [dm.re, dm.im];
        let maha = (0..2)
            .map(|a| (0..2).map(|b| m[a] * inv_q[a][b] * m[b]).sum::<f64>())
            .sum::<f64>();
        total += 0.5 * (trace + maha - 2.0 + (det_q / det_p).ln());
    }
    Ok(total)
}

/// Standard normal noise of the given shape as a graph constant.
pub fn normal_noise<R: Rng + ?Sized>(g: &Graph, shape: &[usize], rng: &mut R) -> Var {
    let t: Tensor = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample::<f64, _>(StandardNormal));
    g.constant(t)
}
