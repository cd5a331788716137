//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Model code is written once against [`Backend`]. [`Graph`] records every
//! operation so gradients can be pulled back from a scalar; [`Eval`] runs
//! the same kernels without recording anything, which is what sampling and
//! inversion use. Both call [`kernels::forward`], so values agree bitwise.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, Op, SoftmaxMask};
use crate::rope::RopeTable;
use crate::tensor::Tensor;

/// Something that can evaluate [`Op`]s on tensors.
pub trait Backend {
    type Var: Clone;

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;
    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Var;
    /// A shared leaf, e.g. a model parameter.
    fn leaf(&mut self, t: Rc<Tensor>, requires_grad: bool) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn shape<'a>(&'a self, v: &'a Self::Var) -> &'a [usize] {
        self.value(v).shape()
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Div, &[a, b])
    }
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::MatMulNT, &[a, b])
    }
    fn exp(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Exp, &[x])
    }
    fn log(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Log, &[x])
    }
    fn tanh(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Tanh, &[x])
    }
    fn softplus(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Softplus, &[x])
    }
    fn gelu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Gelu, &[x])
    }
    fn neg(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Neg, &[x])
    }
    fn scale(&mut self, x: &Self::Var, c: f64) -> Result<Self::Var> {
        self.apply(Op::Scale(c), &[x])
    }
    fn add_scalar(&mut self, x: &Self::Var, c: f64) -> Result<Self::Var> {
        self.apply(Op::AddScalar(c), &[x])
    }
    fn square(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[x, x])
    }
    fn sum(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum, &[x])
    }
    fn mean(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mean, &[x])
    }
    fn sum_axis(&mut self, x: &Self::Var, axis: usize) -> Result<Self::Var> {
        self.apply(Op::SumAxis(axis), &[x])
    }
    fn slice(&mut self, x: &Self::Var, axis: usize, start: usize, end: usize) -> Result<Self::Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }
    fn concat(&mut self, xs: &[&Self::Var], axis: usize) -> Result<Self::Var> {
        self.apply(Op::Concat(axis), xs)
    }
    fn permute(&mut self, x: &Self::Var, axes: &[usize]) -> Result<Self::Var> {
        self.apply(Op::Permute(axes.to_vec()), &[x])
    }
    /// Swaps the last two axes.
    fn transpose(&mut self, x: &Self::Var) -> Result<Self::Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err("transpose", format!("rank {}", r));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn broadcast_to(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        self.apply(Op::BroadcastTo(shape.to_vec()), &[x])
    }
    fn index_select(&mut self, x: &Self::Var, axis: usize, indices: Rc<[usize]>) -> Result<Self::Var> {
        self.apply(Op::IndexSelect { axis, indices }, &[x])
    }
    fn softmax(&mut self, x: &Self::Var, mask: Option<Rc<SoftmaxMask>>) -> Result<Self::Var> {
        self.apply(Op::Softmax(mask), &[x])
    }
    fn rmsnorm(&mut self, x: &Self::Var, gain: &Self::Var, eps: f64) -> Result<Self::Var> {
        self.apply(Op::RmsNorm { eps }, &[x, gain])
    }
    fn rope(&mut self, x: &Self::Var, table: Rc<RopeTable>) -> Result<Self::Var> {
        self.apply(Op::Rope(table), &[x])
    }
}

/// Plain evaluation: no tape, values are reference counted.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type Var = Rc<Tensor>;

    fn apply(&mut self, op: Op, inputs: &[&Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let ts: Vec<&Tensor> = inputs.iter().map(|t| &***t).collect();
        kernels::forward(&op, &ts).map(Rc::new)
    }
    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }
    fn leaf(&mut self, t: Rc<Tensor>, _requires_grad: bool) -> Rc<Tensor> {
        t
    }
    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Append-only tape. Node order is creation order, which is also a
/// topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<usize>, value: Rc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Pulls `d loss / d leaf` back to every leaf that requires a gradient,
    /// adding onto whatever an earlier call left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.rank() != 0 {
            return shape_err("backward", format!("loss must be a scalar, got {:?}", lv.shape()));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                match &mut self.grads[i] {
                    Some(acc) => accumulate(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &*self.nodes[j].value).collect();
            let grads = kernels::backward(op, &inputs, &node.value, &g, &needs)?;
            for (&j, gj) in node.inputs.iter().zip(grads) {
                let Some(gj) = gj else { continue };
                if gj.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: op.name() });
                }
                match &mut pending[j] {
                    Some(acc) => accumulate(acc, &gj),
                    slot => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(acc: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

impl Backend for Graph {
    type Var = Var;

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
        let value = kernels::forward(&op, &ts)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Some(op), ids, Rc::new(value), requires_grad))
    }
    fn constant(&mut self, t: Tensor) -> Var {
        self.push(None, Vec::new(), Rc::new(t), false)
    }
    fn leaf(&mut self, t: Rc<Tensor>, requires_grad: bool) -> Var {
        self.push(None, Vec::new(), t, requires_grad)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}
