use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::{GradSink, Graph, Op, Tensor, Var};

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("matmul operands are 2-D")
}

pub(crate) fn matmul_backward(a: Var, b: Var, grad: &Tensor, sink: &mut GradSink<'_>) {
    let g = as2(grad);
    if sink.wants(a) {
        let ga = g.dot(&as2(sink.value(b)).t()).into_dyn();
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let gb = as2(sink.value(a)).t().dot(&g).into_dyn();
        sink.add(b, gb);
    }
}

/// Geometry of a patch extraction: `positions` output grid over an input
/// plane of `plane` size with a `kernel` and `stride`.
#[derive(Clone, Copy, Debug)]
struct Patches {
    batch: usize,
    channels: usize,
    plane: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    positions: (usize, usize),
}

impl Patches {
    fn rows(&self) -> usize {
        self.batch * self.positions.0 * self.positions.1
    }

    fn cols(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// `[batch*positions, channels*kh*kw]` patch matrix of an NCHW buffer.
    fn im2col(&self, x: &[f64]) -> Array2<f64> {
        let (h, w) = self.plane;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.positions;
        let cols = self.cols();
        let mut out = vec![0.0; self.rows() * cols];
        let mut row = 0;
        for n in 0..self.batch {
            for oh in 0..ph {
                for ow in 0..pw {
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    let mut k = 0;
                    for c in 0..self.channels {
                        let plane = &x[(n * self.channels + c) * h * w..];
                        for i in 0..kh {
                            let src = &plane[(oh * sh + i) * w + ow * sw..];
                            dst[k..k + kw].copy_from_slice(&src[..kw]);
                            k += kw;
                        }
                    }
                    row += 1;
                }
            }
        }
        Array2::from_shape_vec((self.rows(), cols), out).unwrap()
    }

    /// Adjoint of [`Patches::im2col`]: scatter-adds patch rows into NCHW.
    fn col2im(&self, cols: &Array2<f64>) -> Vec<f64> {
        let (h, w) = self.plane;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.positions;
        let ncols = self.cols();
        let src = cols.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.batch * self.channels * h * w];
        let mut row = 0;
        for n in 0..self.batch {
            for oh in 0..ph {
                for ow in 0..pw {
                    let patch = &src[row * ncols..(row + 1) * ncols];
                    let mut k = 0;
                    for c in 0..self.channels {
                        let base = (n * self.channels + c) * h * w;
                        for i in 0..kh {
                            let start = base + (oh * sh + i) * w + ow * sw;
                            for (dst, v) in out[start..start + kw].iter_mut().zip(&patch[k..k + kw]) {
                                *dst += v;
                            }
                            k += kw;
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }
}

/// `[N*P, C]` row matrix to `[N, C, P...]` tensor.
fn rows_to_nchw(m: Array2<f64>, batch: usize, positions: (usize, usize), channels: usize) -> Tensor {
    m.into_shape_with_order((batch, positions.0, positions.1, channels))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

fn nchw_to_rows(t: &Tensor) -> Array2<f64> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    t.view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .unwrap()
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub(crate) struct Conv2dNode {
    pub(crate) x: Var,
    pub(crate) w: Var,
    patches: Patches,
}

impl Conv2dNode {
    pub(crate) fn backward(&self, grad: &Tensor, sink: &mut GradSink<'_>) {
        let wv = sink.value(self.w);
        let out_ch = wv.shape()[0];
        let w_mat = wv
            .view()
            .into_shape_with_order((out_ch, self.patches.cols()))
            .unwrap();
        let g = nchw_to_rows(grad);
        if sink.wants(self.w) {
            let cols = self
                .patches
                .im2col(sink.value(self.x).as_slice().unwrap());
            let gw = g.t().dot(&cols);
            let gw = gw.into_shape_with_order(IxDyn(wv.shape())).unwrap();
            sink.add(self.w, gw);
        }
        if sink.wants(self.x) {
            let gcols = g.dot(&w_mat);
            let gx = self.patches.col2im(&gcols);
            let shape = sink.value(self.x).raw_dim();
            sink.add(self.x, ArrayD::from_shape_vec(shape, gx).unwrap());
        }
    }
}

pub(crate) struct ConvTranspose2dNode {
    pub(crate) x: Var,
    pub(crate) w: Var,
    patches: Patches,
}

impl ConvTranspose2dNode {
    pub(crate) fn backward(&self, grad: &Tensor, sink: &mut GradSink<'_>) {
        let wv = sink.value(self.w);
        let in_ch = wv.shape()[0];
        let w_mat = wv
            .view()
            .into_shape_with_order((in_ch, self.patches.cols()))
            .unwrap();
        let gcols = self.patches.im2col(grad.as_slice().unwrap());
        let xv = sink.value(self.x);
        if sink.wants(self.w) {
            let xm = nchw_to_rows(xv);
            let gw = xm.t().dot(&gcols);
            let gw = gw.into_shape_with_order(IxDyn(wv.shape())).unwrap();
            sink.add(self.w, gw);
        }
        if sink.wants(self.x) {
            let (n, _, h, w) = dims4(xv);
            let gx = gcols.dot(&w_mat.t());
            sink.add(self.x, rows_to_nchw(gx, n, (h, w), in_ch));
        }
    }
}

impl Graph {
    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = as2(&self.value(a)).dot(&as2(&self.value(b))).into_dyn();
        self.push(out, Op::Matmul(a, b))
    }

    /// Valid (unpadded) strided cross-correlation.
    ///
    /// `x` is `[N, C_in, H, W]`, `w` is `[C_out, C_in, KH, KW]`; the output is
    /// `[N, C_out, (H-KH)/SH+1, (W-KW)/SW+1]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: (usize, usize)) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, width) = dims4(&xv);
        let (out_ch, wc, kh, kw) = dims4(&wv);
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert!(h >= kh && width >= kw, "conv2d input smaller than kernel");
        let positions = ((h - kh) / stride.0 + 1, (width - kw) / stride.1 + 1);
        let patches = Patches {
            batch: n,
            channels: c,
            plane: (h, width),
            kernel: (kh, kw),
            stride,
            positions,
        };
        let cols = patches.im2col(xv.as_slice().unwrap());
        let w_mat = wv
            .view()
            .into_shape_with_order((out_ch, patches.cols()))
            .unwrap();
        let out = rows_to_nchw(cols.dot(&w_mat.t()), n, positions, out_ch);
        self.push(out, Op::Conv2d(Conv2dNode { x, w, patches }))
    }

    /// Exact adjoint of [`Graph::conv2d`] as a linear map of `x`.
    ///
    /// `x` is `[N, C_in, H, W]`, `w` is `[C_in, C_out, KH, KW]`; the output plane
    /// is `out_hw`, which must be at least `((H-1)SH+KH, (W-1)SW+KW)`. Rows and
    /// columns beyond the reach of the kernel stay zero.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        out_hw: (usize, usize),
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, width) = dims4(&xv);
        let (wc, out_ch, kh, kw) = dims4(&wv);
        assert_eq!(c, wc, "conv_transpose2d channel mismatch");
        assert!(
            out_hw.0 >= (h - 1) * stride.0 + kh && out_hw.1 >= (width - 1) * stride.1 + kw,
            "conv_transpose2d output plane too small"
        );
        let patches = Patches {
            batch: n,
            channels: out_ch,
            plane: out_hw,
            kernel: (kh, kw),
            stride,
            positions: (h, width),
        };
        let w_mat = wv
            .view()
            .into_shape_with_order((c, patches.cols()))
            .unwrap();
        let cols = nchw_to_rows(&xv).dot(&w_mat);
        let out = patches.col2im(&cols);
        let out = ArrayD::from_shape_vec(IxDyn(&[n, out_ch, out_hw.0, out_hw.1]), out).unwrap();
        self.push(out, Op::ConvTranspose2d(ConvTranspose2dNode { x, w, patches }))
    }
}
