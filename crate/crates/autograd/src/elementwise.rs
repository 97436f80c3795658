use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::{BinaryOp, GradSink, Graph, Op, Tensor, UnaryOp, Var};

/// Sums `grad` down to `shape`, undoing size-1 broadcasting.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    assert_eq!(grad.ndim(), shape.len(), "broadcast only across equal rank");
    let mut out = grad.clone();
    for (axis, &len) in shape.iter().enumerate() {
        if len == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out.as_standard_layout().into_owned()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "binary op on tensors of different rank: {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                x
            } else if x == 1 {
                y
            } else {
                panic!("incompatible shapes {a:?} and {b:?}")
            }
        })
        .collect()
}

fn binary_forward(kind: BinaryOp, a: &Tensor, b: &Tensor) -> Tensor {
    let shape = broadcast_shape(a.shape(), b.shape());
    let dim = IxDyn(&shape);
    let av = a.broadcast(dim.clone()).expect("broadcast lhs");
    let bv = b.broadcast(dim.clone()).expect("broadcast rhs");
    let mut out = ArrayD::zeros(dim);
    let zip = Zip::from(&mut out).and(&av).and(&bv);
    match kind {
        BinaryOp::Add => zip.for_each(|o, &x, &y| *o = x + y),
        BinaryOp::Sub => zip.for_each(|o, &x, &y| *o = x - y),
        BinaryOp::Mul => zip.for_each(|o, &x, &y| *o = x * y),
        BinaryOp::Div => zip.for_each(|o, &x, &y| *o = x / y),
    }
    out
}

pub(crate) fn binary_backward(
    kind: BinaryOp,
    a: Var,
    b: Var,
    grad: &Tensor,
    sink: &mut GradSink<'_>,
) {
    let a_shape = sink.value(a).shape().to_vec();
    let b_shape = sink.value(b).shape().to_vec();
    match kind {
        BinaryOp::Add => {
            if sink.wants(a) {
                sink.add(a, reduce_to(grad, &a_shape));
            }
            if sink.wants(b) {
                sink.add(b, reduce_to(grad, &b_shape));
            }
        }
        BinaryOp::Sub => {
            if sink.wants(a) {
                sink.add(a, reduce_to(grad, &a_shape));
            }
            if sink.wants(b) {
                sink.add(b, reduce_to(&grad.mapv(|g| -g), &b_shape));
            }
        }
        BinaryOp::Mul => {
            if sink.wants(a) {
                let ga = binary_forward(BinaryOp::Mul, grad, sink.value(b));
                sink.add(a, reduce_to(&ga, &a_shape));
            }
            if sink.wants(b) {
                let gb = binary_forward(BinaryOp::Mul, grad, sink.value(a));
                sink.add(b, reduce_to(&gb, &b_shape));
            }
        }
        BinaryOp::Div => {
            if sink.wants(a) {
                let ga = binary_forward(BinaryOp::Div, grad, sink.value(b));
                sink.add(a, reduce_to(&ga, &a_shape));
            }
            if sink.wants(b) {
                // d(a/b)/db = -a / b^2
                let q = binary_forward(BinaryOp::Div, sink.value(a), sink.value(b));
                let q = binary_forward(BinaryOp::Div, &q, sink.value(b));
                let gb = binary_forward(BinaryOp::Mul, grad, &q).mapv(|v| -v);
                sink.add(b, reduce_to(&gb, &b_shape));
            }
        }
    }
}

fn tanh_ratio(u: f64) -> f64 {
    if u < 1e-4 {
        1.0 - u / 3.0 + 2.0 * u * u / 15.0 - 17.0 * u * u * u / 315.0
    } else {
        let r = u.sqrt();
        r.tanh() / r
    }
}

fn tanh_ratio_deriv(u: f64) -> f64 {
    if u < 1e-4 {
        -1.0 / 3.0 + 4.0 * u / 15.0 - 51.0 * u * u / 315.0
    } else {
        let r = u.sqrt();
        let t = r.tanh();
        ((1.0 - t * t) * r - t) / (2.0 * r * r * r)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn unary_forward(kind: UnaryOp, x: f64) -> f64 {
    match kind {
        UnaryOp::Square => x * x,
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Ln => x.ln(),
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Recip => 1.0 / x,
        UnaryOp::TanhRatio => tanh_ratio(x),
    }
}

pub(crate) fn unary_backward(
    kind: UnaryOp,
    a: Var,
    out: &Tensor,
    grad: &Tensor,
    sink: &mut GradSink<'_>,
) {
    if !sink.wants(a) {
        return;
    }
    let x = sink.value(a);
    let mut g = ArrayD::zeros(x.raw_dim());
    let zip = Zip::from(&mut g).and(grad).and(x).and(out);
    match kind {
        UnaryOp::Square => zip.for_each(|o, &g, &x, _| *o = 2.0 * x * g),
        UnaryOp::Sqrt => zip.for_each(|o, &g, _, &y| *o = g / (2.0 * y)),
        UnaryOp::Exp => zip.for_each(|o, &g, _, &y| *o = g * y),
        UnaryOp::Ln => zip.for_each(|o, &g, &x, _| *o = g / x),
        UnaryOp::Tanh => zip.for_each(|o, &g, _, &y| *o = g * (1.0 - y * y)),
        UnaryOp::Sigmoid => zip.for_each(|o, &g, _, &y| *o = g * y * (1.0 - y)),
        UnaryOp::Softplus => zip.for_each(|o, &g, &x, _| *o = g * sigmoid(x)),
        UnaryOp::Recip => zip.for_each(|o, &g, _, &y| *o = -g * y * y),
        UnaryOp::TanhRatio => zip.for_each(|o, &g, &x, _| *o = g * tanh_ratio_deriv(x)),
    }
    sink.add(a, g);
}

pub(crate) fn prelu_backward(x: Var, slope: Var, grad: &Tensor, sink: &mut GradSink<'_>) {
    let xv = sink.value(x);
    let av = sink.value(slope);
    let channels = av.len();
    let shape = xv.shape().to_vec();
    let outer = shape[0];
    let inner: usize = shape[2..].iter().product();
    let xs = xv.as_slice().expect("standard layout");
    let a = av.as_slice().expect("standard layout");
    let gs = grad.as_slice().expect("standard layout");
    let mut gx = vec![0.0; xs.len()];
    let mut ga = vec![0.0; channels];
    for n in 0..outer {
        for c in 0..channels {
            let base = (n * channels + c) * inner;
            for k in base..base + inner {
                if xs[k] > 0.0 {
                    gx[k] = gs[k];
                } else {
                    gx[k] = a[c] * gs[k];
                    ga[c] += xs[k] * gs[k];
                }
            }
        }
    }
    if sink.wants(x) {
        sink.add(x, ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap());
    }
    if sink.wants(slope) {
        sink.add(slope, ArrayD::from_shape_vec(av.raw_dim(), ga).unwrap());
    }
}

impl Graph {
    fn binary(&self, kind: BinaryOp, a: Var, b: Var) -> Var {
        let out = binary_forward(kind, &self.value(a), &self.value(b));
        self.push(out, Op::Binary(kind, a, b))
    }

    /// Elementwise sum with size-1 broadcasting between equal-rank operands.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).mapv(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).mapv(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn unary(&self, kind: UnaryOp, a: Var) -> Var {
        let out = self.value(a).mapv(|x| unary_forward(kind, x));
        self.push(out, Op::Unary(kind, a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(UnaryOp::Ln, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(UnaryOp::Recip, a)
    }

    pub fn tanh_ratio(&self, a: Var) -> Var {
        self.unary(UnaryOp::TanhRatio, a)
    }

    /// Parametric ReLU with one slope per channel; channels live on axis 1.
    pub fn prelu(&self, x: Var, slope: Var) -> Var {
        let xv = self.value(x);
        let av = self.value(slope);
        assert!(xv.ndim() >= 2, "prelu needs a channel axis");
        assert_eq!(av.ndim(), 1);
        assert_eq!(xv.shape()[1], av.len(), "one slope per channel");
        let channels = av.len();
        let inner: usize = xv.shape()[2..].iter().product();
        let a = av.as_slice().unwrap();
        let mut out = (*xv).clone();
        for (k, v) in out.as_slice_mut().unwrap().iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= a[(k / inner) % channels];
            }
        }
        self.push(out, Op::Prelu(x, slope))
    }
}
