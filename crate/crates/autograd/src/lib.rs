//! Tape-based reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//!
//! The op set is deliberately coarse: besides broadcasting elementwise math and
//! shape manipulation it contains fused kernels (strided 2-D convolution and its
//! transpose, a whole-sequence LSTM, PReLU, 2x2-whitening complex batch
//! normalization, framing and overlap-add) so a training step records a few
//! hundred nodes rather than hundreds of thousands.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

mod conv;
mod elementwise;
mod norm;
mod rnn;
mod shape;
mod signal;

pub use norm::{complex_moments, BnMode, BnStats};

/// Dense `f64` tensor stored in standard (row-major) layout.
pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Square,
    Sqrt,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Softplus,
    Recip,
    /// `u -> tanh(sqrt(u)) / sqrt(u)`, smooth at `u = 0` where it equals 1.
    TanhRatio,
}

pub(crate) enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnaryOp, Var),
    Sum(Var),
    SumAxes(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Pad(Var, usize, usize),
    Matmul(Var, Var),
    Conv2d(conv::Conv2dNode),
    ConvTranspose2d(conv::ConvTranspose2dNode),
    Lstm(Box<rnn::LstmNode>),
    Prelu(Var, Var),
    ComplexBn(Box<norm::ComplexBnNode>),
    Frame(Var, usize),
    OverlapAdd(Var, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::Matmul(a, b) | Op::Prelu(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(_, a)
            | Op::Sum(a)
            | Op::SumAxes(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice(a, _, _)
            | Op::Pad(a, _, _)
            | Op::Frame(a, _)
            | Op::OverlapAdd(a, _) => vec![*a],
            Op::Concat(vs, _) => vs.clone(),
            Op::Conv2d(n) => vec![n.x, n.w],
            Op::ConvTranspose2d(n) => vec![n.x, n.w],
            Op::Lstm(n) => vec![n.x, n.w_ih, n.w_hh, n.bias],
            Op::ComplexBn(n) => n.inputs(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. All operations take `&self`; the tape grows through
/// interior mutability so expressions can be nested freely.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that is treated as data: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on a tensor of shape {:?}", value.shape());
        value.iter().next().copied().unwrap_or(0.0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push_raw(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(id)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var {
        debug_assert!(
            value.is_standard_layout(),
            "op produced non-standard layout"
        );
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].needs_grad)
        };
        self.push_raw(value, op, needs_grad)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward() needs a scalar root"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward_node(node, &grad, &mut sink);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Accumulates parent gradients during the reverse sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Tensor>>,
}

impl<'a> GradSink<'a> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn add(&mut self, v: Var, grad: Tensor) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(grad.shape(), self.nodes[v.0].value.shape());
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &grad,
            slot @ None => *slot = Some(grad),
        }
    }
}

fn backward_node(node: &Node, grad: &Tensor, sink: &mut GradSink<'_>) {
    let out = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => elementwise::binary_backward(*kind, *a, *b, grad, sink),
        Op::Scale(a, s) => sink.add(*a, grad * *s),
        Op::AddScalar(a) => sink.add(*a, grad.clone()),
        Op::Unary(kind, a) => elementwise::unary_backward(*kind, *a, out, grad, sink),
        Op::Sum(a) => {
            let g = grad.iter().next().copied().unwrap_or(0.0);
            let shape = sink.value(*a).raw_dim();
            sink.add(*a, ArrayD::from_elem(shape, g));
        }
        Op::SumAxes(a) => {
            let shape = sink.value(*a).raw_dim();
            let g = grad
                .broadcast(shape)
                .expect("sum_axes keeps dims")
                .to_owned();
            sink.add(*a, g);
        }
        Op::Reshape(a) => {
            let shape = sink.value(*a).shape().to_vec();
            sink.add(*a, shape::reshape_owned(grad, &shape));
        }
        Op::Permute(a, perm) => shape::permute_backward(*a, perm, grad, sink),
        Op::Concat(vars, axis) => shape::concat_backward(vars, *axis, grad, sink),
        Op::Slice(a, axis, start) => shape::slice_backward(*a, *axis, *start, grad, sink),
        Op::Pad(a, axis, lo) => shape::pad_backward(*a, *axis, *lo, grad, sink),
        Op::Matmul(a, b) => conv::matmul_backward(*a, *b, grad, sink),
        Op::Conv2d(n) => n.backward(grad, sink),
        Op::ConvTranspose2d(n) => n.backward(grad, sink),
        Op::Lstm(n) => n.backward(grad, sink),
        Op::Prelu(x, a) => elementwise::prelu_backward(*x, *a, grad, sink),
        Op::ComplexBn(n) => n.backward(grad, sink),
        Op::Frame(x, hop) => signal::frame_backward(*x, *hop, grad, sink),
        Op::OverlapAdd(x, hop) => signal::overlap_add_backward(*x, *hop, grad, sink),
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from the root reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialising zeros of `shape` when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)))
    }
}
