use ndarray::{ArrayD, IxDyn};

use crate::{GradSink, Graph, Op, Tensor, Var};

fn overlap_add_raw(frames: &[f64], batch: usize, count: usize, len: usize, hop: usize) -> (Vec<f64>, usize) {
    let out_len = (count - 1) * hop + len;
    let mut out = vec![0.0; batch * out_len];
    for b in 0..batch {
        for t in 0..count {
            let src = &frames[(b * count + t) * len..(b * count + t + 1) * len];
            let dst = &mut out[b * out_len + t * hop..b * out_len + t * hop + len];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    (out, out_len)
}

fn frame_raw(x: &[f64], batch: usize, n: usize, len: usize, hop: usize) -> (Vec<f64>, usize) {
    let count = (n - len) / hop + 1;
    let mut out = vec![0.0; batch * count * len];
    for b in 0..batch {
        for t in 0..count {
            out[(b * count + t) * len..(b * count + t + 1) * len]
                .copy_from_slice(&x[b * n + t * hop..b * n + t * hop + len]);
        }
    }
    (out, count)
}

pub(crate) fn frame_backward(x: Var, hop: usize, grad: &Tensor, sink: &mut GradSink<'_>) {
    let s = grad.shape();
    let (batch, count, len) = (s[0], s[1], s[2]);
    let n = sink.value(x).shape()[1];
    let (mut g, used) = overlap_add_raw(grad.as_slice().unwrap(), batch, count, len, hop);
    if used != n {
        // Trailing samples not covered by any frame get zero gradient.
        let mut full = vec![0.0; batch * n];
        for b in 0..batch {
            full[b * n..b * n + used].copy_from_slice(&g[b * used..(b + 1) * used]);
        }
        g = full;
    }
    sink.add(x, ArrayD::from_shape_vec(IxDyn(&[batch, n]), g).unwrap());
}

pub(crate) fn overlap_add_backward(x: Var, hop: usize, grad: &Tensor, sink: &mut GradSink<'_>) {
    let s = sink.value(x).shape().to_vec();
    let (batch, len) = (s[0], s[2]);
    let n = grad.shape()[1];
    let (g, count) = frame_raw(grad.as_slice().unwrap(), batch, n, len, hop);
    debug_assert_eq!(count, s[1]);
    sink.add(x, ArrayD::from_shape_vec(IxDyn(&s), g).unwrap());
}

impl Graph {
    /// Slices `[B, N]` into overlapping frames `[B, T, len]`, `T = (N-len)/hop + 1`.
    pub fn frame(&self, x: Var, len: usize, hop: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "frame expects [B, N]");
        let (batch, n) = (xv.shape()[0], xv.shape()[1]);
        assert!(n >= len && hop > 0, "signal shorter than one frame");
        let (out, count) = frame_raw(xv.as_slice().unwrap(), batch, n, len, hop);
        let out = ArrayD::from_shape_vec(IxDyn(&[batch, count, len]), out).unwrap();
        self.push(out, Op::Frame(x, hop))
    }

    /// Sums `[B, T, len]` frames spaced by `hop` into `[B, (T-1)hop + len]`.
    pub fn overlap_add(&self, x: Var, hop: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "overlap_add expects [B, T, len]");
        let s = xv.shape();
        let (out, out_len) = overlap_add_raw(xv.as_slice().unwrap(), s[0], s[1], s[2], hop);
        let out = ArrayD::from_shape_vec(IxDyn(&[s[0], out_len]), out).unwrap();
        self.push(out, Op::OverlapAdd(x, hop))
    }
}
