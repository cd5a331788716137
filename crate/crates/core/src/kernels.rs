//! Forward and backward kernels for every differentiable operation.
//!
//! Kernels are pure functions over [`Tensor`] values. The [`Graph`] records
//! which kernel produced each node and replays [`backward`] in reverse
//! creation order; the [`Eval`] backend only calls [`forward`].
//!
//! [`Graph`]: crate::autodiff::Graph
//! [`Eval`]: crate::autodiff::Eval

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::rope::RopeTable;
use crate::tensor::{strides, Tensor};

/// Additive bias applied before a row softmax. `-inf` entries are masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMask {
    pub rows: usize,
    pub cols: usize,
    pub bias: Vec<f64>,
}

impl SoftmaxMask {
    /// Lower-triangular mask: row `i` may see columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut bias = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                bias[i * n + j] = f64::NEG_INFINITY;
            }
        }
        SoftmaxMask { rows: n, cols: n, bias }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// `a[..., m, k] · b[..., k, n]`; `b` may also be a shared `[k, n]` matrix.
    MatMul,
    /// `a[..., m, k] · b[..., n, k]ᵀ`; `b` may also be a shared `[n, k]` matrix.
    MatMulNT,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Softplus,
    Gelu,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sum,
    Mean,
    SumAxis(usize),
    Slice { axis: usize, start: usize, end: usize },
    Concat(usize),
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    IndexSelect { axis: usize, indices: Rc<[usize]> },
    Softmax(Option<Rc<SoftmaxMask>>),
    RmsNorm { eps: f64 },
    Rope(Rc<RopeTable>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::MatMulNT => "matmul_nt",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Gelu => "gelu",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast",
            Op::IndexSelect { .. } => "index_select",
            Op::Softmax(_) => "softmax",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Rope(_) => "rope",
        }
    }

    /// Ops whose outputs are rearranged input values, so are finite when
    /// their inputs are.
    fn moves_data_only(&self) -> bool {
        matches!(
            self,
            Op::Slice { .. } | Op::Concat(_) | Op::Permute(_) | Op::Reshape(_) | Op::BroadcastTo(_) | Op::IndexSelect { .. }
        )
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::MatMulNT | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::RmsNorm { .. } => {
                Some(2)
            }
            Op::Concat(_) => None,
            _ => Some(1),
        }
    }
}

/// Runs the forward kernel of `op`. Results of arithmetic ops are checked for
/// finiteness.
pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return shape_err(name, format!("expected {} inputs, got {}", n, inputs.len()));
        }
    } else if inputs.is_empty() {
        return shape_err(name, "no inputs");
    }
    let out = match op {
        Op::MatMul => matmul_fwd(inputs[0], inputs[1], false)?,
        Op::MatMulNT => matmul_fwd(inputs[0], inputs[1], true)?,
        Op::Add => binary_fwd(name, inputs[0], inputs[1], |a, b| a + b)?,
        Op::Sub => binary_fwd(name, inputs[0], inputs[1], |a, b| a - b)?,
        Op::Mul => binary_fwd(name, inputs[0], inputs[1], |a, b| a * b)?,
        Op::Div => {
            if inputs[1].data().contains(&0.0) {
                return Err(Error::Domain { op: name, detail: "division by zero".into() });
            }
            binary_fwd(name, inputs[0], inputs[1], |a, b| a / b)?
        }
        Op::Exp => unary(inputs[0], math::exp),
        Op::Log => {
            if inputs[0].data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain { op: name, detail: "log of nonpositive value".into() });
            }
            unary(inputs[0], math::ln)
        }
        Op::Tanh => unary(inputs[0], math::tanh),
        Op::Softplus => unary(inputs[0], math::softplus),
        Op::Gelu => unary(inputs[0], math::gelu),
        Op::Neg => unary(inputs[0], |x| -x),
        Op::Scale(c) => {
            let c = *c;
            unary(inputs[0], |x| x * c)
        }
        Op::AddScalar(c) => {
            let c = *c;
            unary(inputs[0], |x| x + c)
        }
        Op::Sum => Tensor::from_parts(vec![], vec![inputs[0].data().iter().sum()]),
        Op::Mean => {
            let x = inputs[0];
            if x.is_empty() {
                return shape_err(name, "mean of empty tensor");
            }
            Tensor::from_parts(vec![], vec![x.data().iter().sum::<f64>() / x.len() as f64])
        }
        Op::SumAxis(axis) => sum_axis_fwd(inputs[0], *axis)?,
        Op::Slice { axis, start, end } => slice_fwd(inputs[0], *axis, *start, *end)?,
        Op::Concat(axis) => concat_fwd(inputs, *axis)?,
        Op::Permute(axes) => permute_fwd(inputs[0], axes)?,
        Op::Reshape(shape) => {
            if shape.iter().product::<usize>() != inputs[0].len() {
                return shape_err(name, format!("{:?} -> {:?}", inputs[0].shape(), shape));
            }
            Tensor::from_parts(shape.clone(), inputs[0].data().to_vec())
        }
        Op::BroadcastTo(shape) => broadcast_fwd(inputs[0], shape)?,
        Op::IndexSelect { axis, indices } => index_select_fwd(inputs[0], *axis, indices)?,
        Op::Softmax(mask) => softmax_fwd(inputs[0], mask.as_deref())?,
        Op::RmsNorm { eps } => rmsnorm_fwd(inputs[0], inputs[1], *eps)?,
        Op::Rope(table) => rope_apply(inputs[0], table, false)?,
    };
    if !op.moves_data_only() {
        out.check_finite(name)?;
    }
    Ok(out)
}

/// Gradients of a scalar objective with respect to each input of `op`,
/// given the incoming gradient `g` of its output. Entries are `None` where
/// `needs[i]` is false.
pub fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let x = inputs[0];
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::MatMul => matmul_bwd(inputs[0], inputs[1], g, needs, false),
        Op::MatMulNT => matmul_bwd(inputs[0], inputs[1], g, needs, true),
        Op::Add => binary_bwd(inputs[0], inputs[1], g, needs, |_, _, g| (g, g)),
        Op::Sub => binary_bwd(inputs[0], inputs[1], g, needs, |_, _, g| (g, -g)),
        Op::Mul => binary_bwd(inputs[0], inputs[1], g, needs, |a, b, g| (g * b, g * a)),
        Op::Div => binary_bwd(inputs[0], inputs[1], g, needs, |a, b, g| (g / b, -g * a / (b * b))),
        Op::Exp => one(zip_map(out, g, |y, g| g * y)),
        Op::Log => one(zip_map(x, g, |x, g| g / x)),
        Op::Tanh => one(zip_map(out, g, |y, g| g * (1.0 - y * y))),
        Op::Softplus => one(zip_map(x, g, |x, g| g * math::sigmoid(x))),
        Op::Gelu => one(zip_map(x, g, |x, g| g * math::gelu_grad(x))),
        Op::Neg => one(unary(g, |g| -g)),
        Op::Scale(c) => {
            let c = *c;
            one(unary(g, |g| g * c))
        }
        Op::AddScalar(_) => one(g.clone()),
        Op::Sum => one(Tensor::full(x.shape(), g.item())),
        Op::Mean => one(Tensor::full(x.shape(), g.item() / x.len() as f64)),
        Op::SumAxis(axis) => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        Op::Slice { axis, start, end } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let w = end - start;
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let src = &g.data()[o * w * inner..(o + 1) * w * inner];
                gx[(o * len + start) * inner..(o * len + end) * inner].copy_from_slice(src);
            }
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        Op::Concat(axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                if needs[i] {
                    let mut gi = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(t.shape().to_vec(), gi)));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            Ok(grads)
        }
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            one(permute_fwd(g, &inv)?)
        }
        Op::Reshape(_) => one(Tensor::from_parts(x.shape().to_vec(), g.data().to_vec())),
        Op::BroadcastTo(shape) => {
            let sa = aligned_strides(x.shape(), shape);
            let zero = vec![0; shape.len()];
            let mut gx = vec![0.0; x.len()];
            let gd = g.data();
            for_each2(shape, &sa, &zero, |o, ia, _| gx[ia] += gd[o]);
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        Op::IndexSelect { axis, indices } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let m = indices.len();
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for (j, &ix) in indices.iter().enumerate() {
                    let src = &g.data()[(o * m + j) * inner..(o * m + j + 1) * inner];
                    let dst = &mut gx[(o * len + ix) * inner..(o * len + ix + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        Op::Softmax(_) => {
            let cols = *x.shape().last().unwrap();
            let mut gx = vec![0.0; x.len()];
            for ((gxr, yr), gr) in gx
                .chunks_mut(cols)
                .zip(out.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in gxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            one(Tensor::from_parts(x.shape().to_vec(), gx))
        }
        Op::RmsNorm { eps } => rmsnorm_bwd(x, inputs[1], g, *eps, needs),
        Op::Rope(table) => one(rope_apply(g, table, true)?),
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// broadcasting

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out` (right-aligned), zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] })
        .collect()
}

/// Visits every element of `out` in row-major order together with the
/// matching flat indices of two operands with strides `sa`/`sb`.
fn for_each2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let (ja, jb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut ba, mut bb, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..inner {
            f(o + j, ba + j * ja, bb + j * jb);
        }
        o += inner;
        let mut d = r - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ba -= sa[d] * out[d];
            bb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_fwd(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    // Bias-style `[.., n] op [n]`.
    if let (Some(&n), [m]) = (a.shape().last(), b.shape()) {
        if n == *m && n > 0 {
            let bd = b.data();
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(n) {
                data.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
            return Ok(Tensor::from_parts(a.shape().to_vec(), data));
        }
    }
    let Some(shape) = broadcast_shape(a.shape(), b.shape()) else {
        return shape_err(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    };
    let sa = aligned_strides(a.shape(), &shape);
    let sb = aligned_strides(b.shape(), &shape);
    let n = shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each2(&shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(shape, out))
}

fn binary_bwd(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    needs: &[bool],
    df: impl Fn(f64, f64, f64) -> (f64, f64),
) -> Result<Vec<Option<Tensor>>> {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    if a.shape() == b.shape() {
        for i in 0..a.len() {
            let (x, y) = df(ad[i], bd[i], gd[i]);
            ga[i] = x;
            gb[i] = y;
        }
    } else {
        let shape = g.shape();
        let sa = aligned_strides(a.shape(), shape);
        let sb = aligned_strides(b.shape(), shape);
        for_each2(shape, &sa, &sb, |o, ia, ib| {
            let (x, y) = df(ad[ia], bd[ib], gd[o]);
            ga[ia] += x;
            gb[ib] += y;
        });
    }
    Ok(vec![
        needs[0].then(|| Tensor::from_parts(a.shape().to_vec(), ga)),
        needs[1].then(|| Tensor::from_parts(b.shape().to_vec(), gb)),
    ])
}

fn broadcast_fwd(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    match broadcast_shape(x.shape(), shape) {
        Some(s) if s == shape => {}
        _ => return shape_err("broadcast", format!("{:?} -> {:?}", x.shape(), shape)),
    }
    let sa = aligned_strides(x.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut out = vec![0.0; shape.iter().product()];
    let xd = x.data();
    for_each2(shape, &sa, &zero, |o, ia, _| out[o] = xd[ia]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

// ---------------------------------------------------------------------------
// shape ops

fn check_axis(name: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return shape_err(name, format!("axis {} out of range for {:?}", axis, x.shape()));
    }
    Ok(())
}

fn sum_axis_fwd(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", x, axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

fn slice_fwd(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    if start > end || end > x.shape()[axis] {
        return shape_err("slice", format!("{}..{} of axis len {}", start, end, x.shape()[axis]));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

fn concat_fwd(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    check_axis("concat", first, axis)?;
    let mut total = 0;
    for t in inputs {
        let ok = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return shape_err("concat", format!("{:?} vs {:?} on axis {}", t.shape(), first.shape(), axis));
        }
        total += t.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis];
            out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

fn permute_fwd(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || core::mem::replace(&mut seen[a], true)) {
        return shape_err("permute", format!("axes {:?} for rank {}", axes, r));
    }
    let xs = strides(x.shape());
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let sa: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
    let zero = vec![0; r];
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for_each2(&shape, &sa, &zero, |o, ia, _| out[o] = xd[ia]);
    Ok(Tensor::from_parts(shape, out))
}

fn index_select_fwd(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    check_axis("index_select", x, axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return shape_err("index_select", format!("index {} out of range {}", bad, len));
    }
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &ix in indices {
            out.extend_from_slice(&x.data()[(o * len + ix) * inner..(o * len + ix + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------------------
// matmul

/// `c[m, n] (+)= a · b` with arbitrary element strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above spell out the bounds each operand
    // needs; callers derive strides from the tensor shapes they pass.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a·b` into a fresh `m × n` buffer, skipping the zero fill.
fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    debug_assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    debug_assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: operand bounds as in `gemm`. With beta = 0, dgemm writes every
    // element of C without reading it, so the buffer is initialised after.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &Tensor, b: &Tensor, nt: bool) -> Result<MatDims> {
    let name = if nt { "matmul_nt" } else { "matmul" };
    if a.rank() < 2 || b.rank() < 2 {
        return shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = if nt {
        (b.shape()[rb - 1], b.shape()[rb - 2])
    } else {
        (b.shape()[rb - 2], b.shape()[rb - 1])
    };
    if k != kb {
        return shape_err(name, format!("inner dims {:?} x {:?}", a.shape(), b.shape()));
    }
    let shared_b = rb == 2;
    if !shared_b && a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return shape_err(name, format!("batch dims {:?} x {:?}", a.shape(), b.shape()));
    }
    let batch = a.shape()[..ra - 2].iter().product();
    Ok(MatDims { batch, m, k, n, shared_b })
}

fn matmul_fwd(a: &Tensor, b: &Tensor, nt: bool) -> Result<Tensor> {
    let MatDims { batch, m, k, n, shared_b } = matmul_dims(a, b, nt)?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out;
    if shared_b {
        let bs = if nt { (1, k) } else { (n, 1) };
        out = gemm_new(batch * m, k, n, a.data(), (k, 1), b.data(), bs);
    } else {
        out = vec![0.0; batch * m * n];
        let mut bt = if nt { vec![0.0; k * n] } else { Vec::new() };
        for i in 0..batch {
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            let bi = if nt {
                for (j, row) in bi.chunks_exact(k).enumerate() {
                    for (kk, &v) in row.iter().enumerate() {
                        bt[kk * n + j] = v;
                    }
                }
                &bt[..]
            } else {
                bi
            };
            ordered_product(m, k, n, &a.data()[i * m * k..(i + 1) * m * k], bi, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// `c += a·b` for row-major `a: [m, k]` and `b: [k, n]` with row stride
/// `rsb`, accumulating every output in increasing `k` order. Callers pass a
/// zeroed `c`. Per-pair
/// products in attention go through here so that an element's value does not
/// depend on how many rows or trailing masked columns are computed with it.
/// Wider vector units only change the speed: each output sees the same
/// sequence of rounded multiplies and adds.
fn ordered_product(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], rsb: usize, c: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { ordered_product_avx512(m, k, n, a, b, rsb, c) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { ordered_product_avx2(m, k, n, a, b, rsb, c) };
        }
    }
    ordered_product_portable(m, k, n, a, b, rsb, c)
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx512f")]
unsafe fn ordered_product_avx512(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], rsb: usize, c: &mut [f64]) {
    ordered_product_portable(m, k, n, a, b, rsb, c)
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn ordered_product_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], rsb: usize, c: &mut [f64]) {
    ordered_product_portable(m, k, n, a, b, rsb, c)
}

#[inline(always)]
fn ordered_product_portable(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], rsb: usize, c: &mut [f64]) {
    for (arow, crow) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n.max(1))).take(m) {
        for (kk, &s) in arow.iter().enumerate().take(k) {
            for (o, &v) in crow.iter_mut().zip(&b[kk * rsb..kk * rsb + n]) {
                *o += s * v;
            }
        }
    }
}

/// Attention of new queries `[B, H, n, dh]` over the first `len` cached
/// positions. Per batch row and head, `keys` holds a `[dh, capacity]` block
/// (transposed) and `values` a `[capacity, dh]` block. Same arithmetic as
/// `softmax(q·kᵀ·scale, mask)·v` on contiguous tensors.
pub fn cached_attention(
    q: &Tensor,
    keys: &[f64],
    values: &[f64],
    capacity: usize,
    len: usize,
    scale: f64,
    mask: Option<&SoftmaxMask>,
) -> Result<Tensor> {
    let s = q.shape();
    if s.len() != 4 {
        return shape_err("attention", format!("queries {:?}", s));
    }
    let (bh, n, dh) = (s[0] * s[1], s[2], s[3]);
    let need = bh * capacity * dh;
    if len == 0 || len > capacity || keys.len() < need || values.len() < need {
        return shape_err("attention", format!("{len} of {capacity} cached rows, buffers {} and {}", keys.len(), values.len()));
    }
    let block = capacity * dh;
    let mut scores = vec![0.0; bh * n * len];
    for i in 0..bh {
        ordered_product(n, dh, len, &q.data()[i * n * dh..(i + 1) * n * dh], &keys[i * block..(i + 1) * block], capacity, &mut scores[i * n * len..(i + 1) * n * len]);
    }
    scores.iter_mut().for_each(|v| *v *= scale);
    let attn = softmax_fwd(&Tensor::from_parts(vec![s[0], s[1], n, len], scores), mask)?;
    let mut out = vec![0.0; bh * n * dh];
    for i in 0..bh {
        ordered_product(n, len, dh, &attn.data()[i * n * len..(i + 1) * n * len], &values[i * block..(i + 1) * block], dh, &mut out[i * n * dh..(i + 1) * n * dh]);
    }
    let out = Tensor::from_parts(vec![s[0], s[1], n, dh], out);
    out.check_finite("attention")?;
    Ok(out)
}

fn matmul_bwd(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    needs: &[bool],
    nt: bool,
) -> Result<Vec<Option<Tensor>>> {
    let MatDims { batch, m, k, n, shared_b } = matmul_dims(a, b, nt)?;
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let ga = needs[0].then(|| {
        // dA[m,k] = G[m,n] · op(B)ᵀ
        let bs = if nt { (k, 1) } else { (1, n) };
        let mut ga = vec![0.0; a.len()];
        if shared_b {
            gemm(batch * m, n, k, gd, (n, 1), bd, bs, &mut ga, false);
        } else {
            for i in 0..batch {
                gemm(m, n, k, &gd[i * m * n..], (n, 1), &bd[i * k * n..], bs, &mut ga[i * m * k..(i + 1) * m * k], false);
            }
        }
        Tensor::from_parts(a.shape().to_vec(), ga)
    });
    let gb = needs[1].then(|| {
        let mut gb = vec![0.0; b.len()];
        let rows = if shared_b { batch * m } else { m };
        let reps = if shared_b { 1 } else { batch };
        for i in 0..reps {
            let (ao, go, bo) = (i * m * k, i * m * n, i * k * n);
            let dst = &mut gb[bo..bo + k * n];
            if nt {
                // dB[n,k] = Gᵀ[n,rows] · A[rows,k]
                gemm(n, rows, k, &gd[go..], (1, n), &ad[ao..], (k, 1), dst, false);
            } else {
                // dB[k,n] = Aᵀ[k,rows] · G[rows,n]
                gemm(k, rows, n, &ad[ao..], (1, k), &gd[go..], (n, 1), dst, false);
            }
        }
        Tensor::from_parts(b.shape().to_vec(), gb)
    });
    Ok(vec![ga, gb])
}

// ---------------------------------------------------------------------------
// normalization, attention helpers

fn softmax_fwd(x: &Tensor, mask: Option<&SoftmaxMask>) -> Result<Tensor> {
    if x.rank() == 0 {
        return shape_err("softmax", "scalar input");
    }
    let cols = *x.shape().last().unwrap();
    if cols == 0 {
        return shape_err("softmax", "empty row");
    }
    if let Some(mk) = mask {
        let rows_ok = mk.rows == 1 || (x.rank() >= 2 && x.shape()[x.rank() - 2] == mk.rows);
        if mk.cols != cols || !rows_ok || mk.bias.len() != mk.rows * mk.cols {
            return shape_err("softmax", format!("mask {}x{} for input {:?}", mk.rows, mk.cols, x.shape()));
        }
    }
    let mut out = vec![0.0; x.len()];
    for (r, (yr, xr)) in out.chunks_mut(cols).zip(x.data().chunks(cols)).enumerate() {
        let bias = mask.map(|mk| {
            let row = r % mk.rows;
            &mk.bias[row * cols..(row + 1) * cols]
        });
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            let v = match bias {
                Some(b) if b[j] == f64::NEG_INFINITY => continue,
                Some(b) => xr[j] + b[j],
                None => xr[j],
            };
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Domain { op: "softmax", detail: "every entry of a row is masked".into() });
        }
        let mut sum = 0.0;
        for j in 0..cols {
            let v = match bias {
                Some(b) if b[j] == f64::NEG_INFINITY => continue,
                Some(b) => xr[j] + b[j],
                None => xr[j],
            };
            let e = math::exp(v - max);
            yr[j] = e;
            sum += e;
        }
        for y in yr.iter_mut() {
            *y /= sum;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn rmsnorm_fwd(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.shape().last().copied().unwrap_or(0);
    if n == 0 {
        return shape_err("rmsnorm", "zero-length feature axis");
    }
    if gain.shape() != [n] {
        return shape_err("rmsnorm", format!("gain {:?} for features {}", gain.shape(), n));
    }
    let gd = gain.data();
    let mut out = vec![0.0; x.len()];
    for (yr, xr) in out.chunks_mut(n).zip(x.data().chunks(n)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / math::sqrt(ms + eps);
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gd) {
            *y = v * inv * g;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn rmsnorm_bwd(x: &Tensor, gain: &Tensor, g: &Tensor, eps: f64, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let n = gain.len();
    let gd = gain.data();
    let mut gx = vec![0.0; x.len()];
    let mut ggain = vec![0.0; n];
    let mut h = vec![0.0; n];
    for ((gxr, xr), gr) in gx.chunks_mut(n).zip(x.data().chunks(n)).zip(g.data().chunks(n)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / math::sqrt(ms + eps);
        let mut dot = 0.0;
        for i in 0..n {
            h[i] = gr[i] * gd[i];
            dot += h[i] * xr[i];
            ggain[i] += gr[i] * xr[i] * inv;
        }
        let c = dot * inv * inv * inv / n as f64;
        for i in 0..n {
            gxr[i] = inv * h[i] - xr[i] * c;
        }
    }
    Ok(vec![
        needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        needs[1].then(|| Tensor::from_parts(vec![n], ggain)),
    ])
}

/// Rotates adjacent pairs of the last axis by the table angles; `inverse`
/// rotates by the negated angles (the adjoint).
fn rope_apply(x: &Tensor, table: &RopeTable, inverse: bool) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || x.shape()[r - 2] != table.rows || x.shape()[r - 1] != 2 * table.half {
        return shape_err(
            "rope",
            format!("input {:?} for table {}x{}", x.shape(), table.rows, 2 * table.half),
        );
    }
    let (rows, half) = (table.rows, table.half);
    let mut out = vec![0.0; x.len()];
    for (blk_out, blk_in) in out.chunks_mut(rows * 2 * half).zip(x.data().chunks(rows * 2 * half)) {
        for s in 0..rows {
            for p in 0..half {
                let c = table.cos[s * half + p];
                let sn = if inverse { -table.sin[s * half + p] } else { table.sin[s * half + p] };
                let i = s * 2 * half + 2 * p;
                let (a, b) = (blk_in[i], blk_in[i + 1]);
                blk_out[i] = a * c - b * sn;
                blk_out[i + 1] = a * sn + b * c;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_closed_forms() {
        let z = Tensor::scalar(0.0);
        assert_eq!(forward(&Op::Tanh, &[&z]).unwrap().item(), 0.0);
        let sp = forward(&Op::Softplus, &[&z]).unwrap().item();
        assert!((sp - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[3, 3], &[0.3, -1.2, 2.0, 0.5, 0.7, -0.1, 1.1, 0.0, 4.0]);
        let out = forward(&Op::MatMul, &[&Tensor::eye(3), &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -2.0]);
        let bt = forward(&Op::Permute(vec![1, 0]), &[&b]).unwrap();
        let x = forward(&Op::MatMulNT, &[&a, &b]).unwrap();
        let y = forward(&Op::MatMul, &[&a, &bt]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn softmax_rows() {
        let x = t(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]);
        let y = forward(&Op::Softmax(None), &[&x]).unwrap();
        assert_eq!(&y.data()[..2], &[0.5, 0.5]);
        assert_eq!(y.data()[2], 1.0);
        assert!(y.data()[3] >= 0.0 && y.data()[3] < 1e-300);
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let mask = SoftmaxMask { rows: 1, cols: 2, bias: vec![f64::NEG_INFINITY; 2] };
        let x = t(&[1, 2], &[0.0, 1.0]);
        let err = forward(&Op::Softmax(Some(Rc::new(mask))), &[&x]).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "softmax", .. }));
    }

    #[test]
    fn causal_mask_zeroes_the_upper_triangle() {
        let x = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.37).unwrap();
        let y = forward(&Op::Softmax(Some(Rc::new(SoftmaxMask::causal(3)))), &[&x]).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(y.data()[i * 3 + j], 0.0);
            }
            let s: f64 = y.data()[i * 3..i * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let ones = Tensor::ones(&[2, 4]);
        let g = Tensor::ones(&[4]);
        let y = forward(&Op::RmsNorm { eps: 1e-6 }, &[&ones, &g]).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let x = t(&[1, 4], &[0.3, -1.0, 2.5, 0.1]);
        let x10 = forward(&Op::Scale(10.0), &[&x]).unwrap();
        let a = forward(&Op::RmsNorm { eps: 1e-6 }, &[&x, &g]).unwrap();
        let b = forward(&Op::RmsNorm { eps: 1e-6 }, &[&x10, &g]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
        let rms = (a.data().iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-5);
        let empty = Tensor::zeros(&[2, 0]);
        assert!(forward(&Op::RmsNorm { eps: 1e-6 }, &[&empty, &Tensor::zeros(&[0])]).is_err());
    }

    #[test]
    fn log_domain_and_shape_errors() {
        let x = t(&[2], &[1.0, 0.0]);
        assert!(matches!(forward(&Op::Log, &[&x]), Err(Error::Domain { .. })));
        assert!(matches!(forward(&Op::Div, &[&x, &x]), Err(Error::Domain { .. })));
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(forward(&Op::MatMul, &[&a, &b]), Err(Error::Shape { .. })));
        assert!(matches!(forward(&Op::Add, &[&a, &Tensor::zeros(&[2])]), Err(Error::Shape { .. })));
    }

    #[test]
    fn overflow_is_reported_with_the_op_name() {
        let x = t(&[1], &[1000.0]);
        assert_eq!(forward(&Op::Exp, &[&x]).unwrap_err(), Error::NonFinite { op: "exp" });
    }

    #[test]
    fn broadcasting_add() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let y = forward(&Op::Add, &[&a, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let c = t(&[2, 1], &[100.0, 200.0]);
        let y = forward(&Op::Add, &[&a, &c]).unwrap();
        assert_eq!(y.data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
    }
}
