use ndarray::{ArrayD, IxDyn};

use crate::{GradSink, Graph, Op, Tensor, Var};

/// Per-channel first and second moments of a complex feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean_re: Vec<f64>,
    pub mean_im: Vec<f64>,
    pub var_rr: Vec<f64>,
    pub var_ri: Vec<f64>,
    pub var_ii: Vec<f64>,
}

impl BnStats {
    pub fn channels(&self) -> usize {
        self.mean_re.len()
    }
}

#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalise with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalise with fixed statistics; they receive no gradient.
    Eval { stats: BnStats, eps: f64 },
}

/// Entries of the inverse square root of `[[a, b], [b, c]]` as (w11, w12, w22).
fn inv_sqrt_2x2(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let s = (a * c - b * b).sqrt();
    let t = (a + c + 2.0 * s).sqrt();
    let d = s * t;
    ((c + s) / d, -b / d, (a + s) / d)
}

/// Pulls a gradient on (w11, w12, w22) back to (a, b, c).
fn inv_sqrt_2x2_vjp(a: f64, b: f64, c: f64, gw: (f64, f64, f64)) -> (f64, f64, f64) {
    let s = (a * c - b * b).sqrt();
    let t = (a + c + 2.0 * s).sqrt();
    let d = s * t;
    let ds = [c / (2.0 * s), -b / s, a / (2.0 * s)];
    let dt = [(1.0 + 2.0 * ds[0]) / (2.0 * t), ds[1] / t, (1.0 + 2.0 * ds[2]) / (2.0 * t)];
    let dd: Vec<f64> = (0..3).map(|k| t * ds[k] + s * dt[k]).collect();
    let num11 = [ds[0], ds[1], 1.0 + ds[2]];
    let num22 = [1.0 + ds[0], ds[1], ds[2]];
    let num12 = [0.0, -1.0, 0.0];
    let mut out = [0.0; 3];
    for k in 0..3 {
        let d11 = num11[k] / d - (c + s) * dd[k] / (d * d);
        let d22 = num22[k] / d - (a + s) * dd[k] / (d * d);
        let d12 = num12[k] / d + b * dd[k] / (d * d);
        out[k] = gw.0 * d11 + gw.1 * d12 + gw.2 * d22;
    }
    (out[0], out[1], out[2])
}

pub(crate) struct ComplexBnNode {
    x: Var,
    gamma_rr: Var,
    gamma_ri: Var,
    gamma_ii: Var,
    beta_re: Var,
    beta_im: Var,
    train: bool,
    /// Whitened features, same layout as `x`.
    whitened: Vec<f64>,
    /// Per channel (w11, w12, w22) and (a, b, c) = (Vrr+eps, Vri, Vii+eps).
    whiten: Vec<(f64, f64, f64)>,
    cov: Vec<(f64, f64, f64)>,
}

impl ComplexBnNode {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        vec![
            self.x,
            self.gamma_rr,
            self.gamma_ri,
            self.gamma_ii,
            self.beta_re,
            self.beta_im,
        ]
    }

    pub(crate) fn backward(&self, grad: &Tensor, sink: &mut GradSink<'_>) {
        let xv = sink.value(self.x);
        let shape = xv.shape().to_vec();
        let (batch, channels, inner) = layout(&shape);
        let x = xv.as_slice().unwrap();
        let g = grad.as_slice().unwrap();
        let n = &self.whitened;
        let grr = sink.value(self.gamma_rr).as_slice().unwrap().to_vec();
        let gri = sink.value(self.gamma_ri).as_slice().unwrap().to_vec();
        let gii = sink.value(self.gamma_ii).as_slice().unwrap().to_vec();
        let count = (batch * inner) as f64;

        let mut d_grr = vec![0.0; channels];
        let mut d_gri = vec![0.0; channels];
        let mut d_gii = vec![0.0; channels];
        let mut d_bre = vec![0.0; channels];
        let mut d_bim = vec![0.0; channels];
        let mut gx = vec![0.0; x.len()];

        for ch in 0..channels {
            let (w11, w12, w22) = self.whiten[ch];
            let mut gw = (0.0, 0.0, 0.0);
            let mut mean_r = 0.0;
            let mut mean_i = 0.0;
            for b in 0..batch {
                let re0 = (b * 2 * channels + ch) * inner;
                let im0 = (b * 2 * channels + channels + ch) * inner;
                for k in 0..inner {
                    let (gr, gi) = (g[re0 + k], g[im0 + k]);
                    let (nr, ni) = (n[re0 + k], n[im0 + k]);
                    d_bre[ch] += gr;
                    d_bim[ch] += gi;
                    d_grr[ch] += gr * nr;
                    d_gii[ch] += gi * ni;
                    d_gri[ch] += gr * ni + gi * nr;
                    let gnr = grr[ch] * gr + gri[ch] * gi;
                    let gni = gri[ch] * gr + gii[ch] * gi;
                    gx[re0 + k] = w11 * gnr + w12 * gni;
                    gx[im0 + k] = w12 * gnr + w22 * gni;
                    if self.train {
                        // Centered input recovered from the whitened one: c = W^-1 n.
                        let (cr, ci) = self.centered(ch, nr, ni);
                        gw.0 += gnr * cr;
                        gw.1 += gnr * ci + gni * cr;
                        gw.2 += gni * ci;
                    }
                }
            }
            if !self.train {
                continue;
            }
            let (a, bb, c) = self.cov[ch];
            let (ga, gb, gc) = inv_sqrt_2x2_vjp(a, bb, c, gw);
            for b in 0..batch {
                let re0 = (b * 2 * channels + ch) * inner;
                let im0 = (b * 2 * channels + channels + ch) * inner;
                for k in 0..inner {
                    let (cr, ci) = self.centered(ch, n[re0 + k], n[im0 + k]);
                    gx[re0 + k] += (2.0 * ga * cr + gb * ci) / count;
                    gx[im0 + k] += (2.0 * gc * ci + gb * cr) / count;
                    mean_r += gx[re0 + k];
                    mean_i += gx[im0 + k];
                }
            }
            mean_r /= count;
            mean_i /= count;
            for b in 0..batch {
                let re0 = (b * 2 * channels + ch) * inner;
                let im0 = (b * 2 * channels + channels + ch) * inner;
                for k in 0..inner {
                    gx[re0 + k] -= mean_r;
                    gx[im0 + k] -= mean_i;
                }
            }
        }

        sink.add(self.x, ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap());
        for (var, grad) in [
            (self.gamma_rr, d_grr),
            (self.gamma_ri, d_gri),
            (self.gamma_ii, d_gii),
            (self.beta_re, d_bre),
            (self.beta_im, d_bim),
        ] {
            sink.add(var, ArrayD::from_shape_vec(IxDyn(&[channels]), grad).unwrap());
        }
    }

    fn centered(&self, ch: usize, nr: f64, ni: f64) -> (f64, f64) {
        // W^-1 = V^{1/2} = (V + sI)/t with s = sqrt(det V), t = sqrt(tr V + 2s).
        let (a, b, c) = self.cov[ch];
        let s = (a * c - b * b).sqrt();
        let t = (a + c + 2.0 * s).sqrt();
        (((a + s) * nr + b * ni) / t, (b * nr + (c + s) * ni) / t)
    }
}

/// (batch, complex channels, spatial size) of an `[N, 2C, ...]` tensor.
fn layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "complex batch norm needs [N, 2C, ...]");
    assert!(shape[1] % 2 == 0, "channel axis must stack real and imaginary halves");
    (shape[0], shape[1] / 2, shape[2..].iter().product())
}

/// Batch statistics of a channel-stacked complex tensor (no eps added).
pub fn complex_moments(x: &Tensor) -> BnStats {
    let (batch, channels, inner) = layout(x.shape());
    let xs = x.as_slice().expect("standard layout");
    let count = (batch * inner) as f64;
    let mut stats = BnStats {
        mean_re: vec![0.0; channels],
        mean_im: vec![0.0; channels],
        var_rr: vec![0.0; channels],
        var_ri: vec![0.0; channels],
        var_ii: vec![0.0; channels],
    };
    for ch in 0..channels {
        let (mut sr, mut si) = (0.0, 0.0);
        for b in 0..batch {
            let re0 = (b * 2 * channels + ch) * inner;
            let im0 = (b * 2 * channels + channels + ch) * inner;
            for k in 0..inner {
                sr += xs[re0 + k];
                si += xs[im0 + k];
            }
        }
        let (mr, mi) = (sr / count, si / count);
        let (mut vrr, mut vri, mut vii) = (0.0, 0.0, 0.0);
        for b in 0..batch {
            let re0 = (b * 2 * channels + ch) * inner;
            let im0 = (b * 2 * channels + channels + ch) * inner;
            for k in 0..inner {
                let cr = xs[re0 + k] - mr;
                let ci = xs[im0 + k] - mi;
                vrr += cr * cr;
                vri += cr * ci;
                vii += ci * ci;
            }
        }
        stats.mean_re[ch] = mr;
        stats.mean_im[ch] = mi;
        stats.var_rr[ch] = vrr / count;
        stats.var_ri[ch] = vri / count;
        stats.var_ii[ch] = vii / count;
    }
    stats
}

impl Graph {
    /// Complex batch normalisation on a channel-stacked `[N, 2C, ...]` tensor.
    ///
    /// Each (real, imag) channel pair is centred and whitened by the inverse
    /// square root of its 2x2 covariance (plus `eps` on the diagonal), then
    /// mapped through the symmetric affine `[[g_rr, g_ri], [g_ri, g_ii]]` and
    /// shifted by `(beta_re, beta_im)`. Returns the output and, in train mode,
    /// the batch statistics used.
    #[allow(clippy::too_many_arguments)]
    pub fn complex_batch_norm(
        &self,
        x: Var,
        gamma_rr: Var,
        gamma_ri: Var,
        gamma_ii: Var,
        beta_re: Var,
        beta_im: Var,
        mode: &BnMode,
    ) -> (Var, Option<BnStats>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (batch, channels, inner) = layout(&shape);
        let xs = xv.as_slice().unwrap();
        let p = |v: Var| self.value(v).as_slice().unwrap().to_vec();
        let (grr, gri, gii, bre, bim) = (p(gamma_rr), p(gamma_ri), p(gamma_ii), p(beta_re), p(beta_im));
        assert_eq!(grr.len(), channels, "one affine per complex channel");

        let (stats, eps, train) = match mode {
            BnMode::Train { eps } => {
                assert!(batch * inner >= 2, "batch statistics need at least two samples");
                (complex_moments(&xv), *eps, true)
            }
            BnMode::Eval { stats, eps } => {
                assert_eq!(stats.channels(), channels, "running statistics channel mismatch");
                (stats.clone(), *eps, false)
            }
        };

        let mut whitened = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut whiten = Vec::with_capacity(channels);
        let mut cov = Vec::with_capacity(channels);
        for ch in 0..channels {
            let (a, b, c) = (stats.var_rr[ch] + eps, stats.var_ri[ch], stats.var_ii[ch] + eps);
            let (w11, w12, w22) = inv_sqrt_2x2(a, b, c);
            whiten.push((w11, w12, w22));
            cov.push((a, b, c));
            for bi in 0..batch {
                let re0 = (bi * 2 * channels + ch) * inner;
                let im0 = (bi * 2 * channels + channels + ch) * inner;
                for k in 0..inner {
                    let cr = xs[re0 + k] - stats.mean_re[ch];
                    let ci = xs[im0 + k] - stats.mean_im[ch];
                    let nr = w11 * cr + w12 * ci;
                    let ni = w12 * cr + w22 * ci;
                    whitened[re0 + k] = nr;
                    whitened[im0 + k] = ni;
                    out[re0 + k] = grr[ch] * nr + gri[ch] * ni + bre[ch];
                    out[im0 + k] = gri[ch] * nr + gii[ch] * ni + bim[ch];
                }
            }
        }
        let node = ComplexBnNode {
            x,
            gamma_rr,
            gamma_ri,
            gamma_ii,
            beta_re,
            beta_im,
            train,
            whitened,
            whiten,
            cov,
        };
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let var = self.push(out, Op::ComplexBn(Box::new(node)));
        (var, train.then_some(stats))
    }
}
