use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::{GradSink, Graph, Op, Tensor, Var};

pub(crate) fn reshape_owned(t: &Tensor, shape: &[usize]) -> Tensor {
    let data = if t.is_standard_layout() {
        t.clone()
    } else {
        t.as_standard_layout().into_owned()
    };
    data.into_shape_with_order(IxDyn(shape))
        .expect("reshape preserves element count")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn permute_backward(a: Var, perm: &[usize], grad: &Tensor, sink: &mut GradSink<'_>) {
    let inv = inverse_perm(perm);
    let g = grad
        .view()
        .permuted_axes(IxDyn(&inv))
        .as_standard_layout()
        .into_owned();
    sink.add(a, g);
}

pub(crate) fn concat_backward(vars: &[Var], axis: usize, grad: &Tensor, sink: &mut GradSink<'_>) {
    let mut start = 0;
    for &v in vars {
        let len = sink.value(v).shape()[axis];
        if sink.wants(v) {
            let g = grad
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .as_standard_layout()
                .into_owned();
            sink.add(v, g);
        }
        start += len;
    }
}

pub(crate) fn slice_backward(
    a: Var,
    axis: usize,
    start: usize,
    grad: &Tensor,
    sink: &mut GradSink<'_>,
) {
    let mut g = ArrayD::zeros(sink.value(a).raw_dim());
    let len = grad.shape()[axis];
    g.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
        .assign(grad);
    sink.add(a, g);
}

pub(crate) fn pad_backward(a: Var, axis: usize, lo: usize, grad: &Tensor, sink: &mut GradSink<'_>) {
    let len = sink.value(a).shape()[axis];
    let g = grad
        .slice_axis(Axis(axis), Slice::from(lo..lo + len))
        .as_standard_layout()
        .into_owned();
    sink.add(a, g);
}

impl Graph {
    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let mut out = (*self.value(a)).clone();
        for &axis in axes {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
        let out = out.as_standard_layout().into_owned();
        self.push(out, Op::SumAxes(a))
    }

    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a);
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = reshape_owned(&self.value(a), shape);
        self.push(out, Op::Reshape(a))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        self.push(out, Op::Permute(a, perm.to_vec()))
    }

    pub fn concat(&self, vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        let values: Vec<_> = vars.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes agree off-axis")
            .as_standard_layout()
            .into_owned();
        self.push(out, Op::Concat(vars.to_vec(), axis))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let out = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        self.push(out, Op::Slice(a, axis, start))
    }

    /// Zero padding along one axis.
    pub fn pad(&self, a: Var, axis: usize, lo: usize, hi: usize) -> Var {
        let value = self.value(a);
        let mut shape = value.shape().to_vec();
        let len = shape[axis];
        shape[axis] += lo + hi;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(lo..lo + len))
            .assign(&*value);
        self.push(out, Op::Pad(a, axis, lo))
    }
}
