use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

use crate::elementwise::sigmoid_scalar;
use crate::{GradSink, Graph, Op, Tensor, Var};

/// Saved activations of a unidirectional single-layer LSTM, time-major.
pub(crate) struct LstmNode {
    pub(crate) x: Var,
    pub(crate) w_ih: Var,
    pub(crate) w_hh: Var,
    pub(crate) bias: Var,
    /// Gate activations `[T, B, 4H]` in (input, forget, cell, output) order.
    gates: Array3<f64>,
    cells: Array3<f64>,
    hidden: Array3<f64>,
}

impl LstmNode {
    pub(crate) fn backward(&self, grad: &Tensor, sink: &mut GradSink<'_>) {
        let grad = grad.view().into_dimensionality::<Ix3>().unwrap();
        let (batch, steps, units) = grad.dim();
        let w_hh = sink
            .value(self.w_hh)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let mut d_pre = Array3::<f64>::zeros((batch, steps, 4 * units));
        let mut d_whh = Array2::<f64>::zeros(w_hh.raw_dim());
        let mut dh_next = Array2::<f64>::zeros((batch, units));
        let mut dc_next = Array2::<f64>::zeros((batch, units));
        for t in (0..steps).rev() {
            let gates = self.gates.index_axis(Axis(0), t);
            let c = self.cells.index_axis(Axis(0), t);
            let mut dgates = Array2::<f64>::zeros((batch, 4 * units));
            for b in 0..batch {
                for u in 0..units {
                    let i = gates[[b, u]];
                    let f = gates[[b, units + u]];
                    let g = gates[[b, 2 * units + u]];
                    let o = gates[[b, 3 * units + u]];
                    let tc = c[[b, u]].tanh();
                    let c_prev = if t > 0 { self.cells[[t - 1, b, u]] } else { 0.0 };
                    let dh = grad[[b, t, u]] + dh_next[[b, u]];
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[[b, u]];
                    dgates[[b, u]] = dc * g * i * (1.0 - i);
                    dgates[[b, units + u]] = dc * c_prev * f * (1.0 - f);
                    dgates[[b, 2 * units + u]] = dc * i * (1.0 - g * g);
                    dgates[[b, 3 * units + u]] = dh * tc * o * (1.0 - o);
                    dc_next[[b, u]] = dc * f;
                }
            }
            if t > 0 {
                let h_prev = self.hidden.index_axis(Axis(0), t - 1);
                d_whh += &h_prev.t().dot(&dgates);
            }
            dh_next = dgates.dot(&w_hh.t());
            d_pre.slice_mut(s![.., t, ..]).assign(&dgates);
        }
        let d_pre = d_pre
            .into_shape_with_order((batch * steps, 4 * units))
            .unwrap();
        if sink.wants(self.bias) {
            sink.add(self.bias, d_pre.sum_axis(Axis(0)).into_dyn());
        }
        if sink.wants(self.w_hh) {
            sink.add(self.w_hh, d_whh.into_dyn());
        }
        let xv = sink.value(self.x);
        let in_dim = xv.shape()[2];
        if sink.wants(self.w_ih) {
            let xm = xv
                .view()
                .into_shape_with_order((batch * steps, in_dim))
                .unwrap();
            sink.add(self.w_ih, xm.t().dot(&d_pre).into_dyn());
        }
        if sink.wants(self.x) {
            let w_ih = sink
                .value(self.w_ih)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            let dx = d_pre
                .dot(&w_ih.t())
                .into_shape_with_order((batch, steps, in_dim))
                .unwrap();
            sink.add(self.x, dx.into_dyn());
        }
    }
}

impl Graph {
    /// Single-layer LSTM over a `[B, T, D]` sequence from zero initial state.
    ///
    /// `w_ih` is `[D, 4H]`, `w_hh` is `[H, 4H]`, `bias` is `[4H]`, gate blocks
    /// ordered input, forget, cell, output. Returns the hidden sequence
    /// `[B, T, H]`.
    pub fn lstm(&self, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let xv3 = xv.view().into_dimensionality::<Ix3>().expect("lstm input is [B, T, D]");
        let (batch, steps, in_dim) = xv3.dim();
        let wih = self.value(w_ih);
        let wih = wih.view().into_dimensionality::<Ix2>().unwrap();
        let whh = self.value(w_hh);
        let whh = whh.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(bias);
        let bv = bv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(wih.nrows(), in_dim, "lstm input size mismatch");
        let units = whh.nrows();
        assert_eq!(wih.ncols(), 4 * units);
        assert_eq!(whh.ncols(), 4 * units);
        assert_eq!(bv.len(), 4 * units);

        let pre = xv3
            .to_owned()
            .into_shape_with_order((batch * steps, in_dim))
            .unwrap()
            .dot(&wih)
            + &bv;
        let pre = pre.into_shape_with_order((batch, steps, 4 * units)).unwrap();

        let mut gates = Array3::<f64>::zeros((steps, batch, 4 * units));
        let mut cells = Array3::<f64>::zeros((steps, batch, units));
        let mut hidden = Array3::<f64>::zeros((steps, batch, units));
        let mut out = Array3::<f64>::zeros((batch, steps, units));
        let mut h = Array2::<f64>::zeros((batch, units));
        let mut c = Array2::<f64>::zeros((batch, units));
        for t in 0..steps {
            let mut a = h.dot(&whh);
            a += &pre.slice(s![.., t, ..]);
            for b in 0..batch {
                for u in 0..units {
                    let i = sigmoid_scalar(a[[b, u]]);
                    let f = sigmoid_scalar(a[[b, units + u]]);
                    let g = a[[b, 2 * units + u]].tanh();
                    let o = sigmoid_scalar(a[[b, 3 * units + u]]);
                    let cn = f * c[[b, u]] + i * g;
                    let hn = o * cn.tanh();
                    gates[[t, b, u]] = i;
                    gates[[t, b, units + u]] = f;
                    gates[[t, b, 2 * units + u]] = g;
                    gates[[t, b, 3 * units + u]] = o;
                    c[[b, u]] = cn;
                    h[[b, u]] = hn;
                    out[[b, t, u]] = hn;
                }
            }
            cells.index_axis_mut(Axis(0), t).assign(&c);
            hidden.index_axis_mut(Axis(0), t).assign(&h);
        }
        let node = LstmNode {
            x,
            w_ih,
            w_hh,
            bias,
            gates,
            cells,
            hidden,
        };
        let out: ArrayD<f64> = out.into_dyn();
        self.push(out, Op::Lstm(Box::new(node)))
    }
}
