//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order of the computation. `backward` walks it once in
//! reverse, visiting only nodes that depend on a differentiable leaf.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    StopGradient,
    StraightThrough(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddPerItem(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Swish(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Reshape(Var),
    NormalizeRows(Var),
    ScaleByVar(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

enum StopGradTape<T> {
    Off,
    Record(Vec<Tensor<T>>),
    Replay { values: Vec<Tensor<T>>, cursor: usize },
}

/// A single forward/backward computation.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    tape: RefCell<StopGradTape<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tape: RefCell::new(StopGradTape::Off),
        }
    }

    /// Graph that records every `stop_gradient` value for a later replay.
    pub fn recording() -> Self {
        let g = Self::new();
        *g.tape.borrow_mut() = StopGradTape::Record(Vec::new());
        g
    }

    /// Graph whose `stop_gradient` calls return previously recorded values
    /// in call order instead of their inputs.
    pub fn replaying(values: Vec<Tensor<T>>) -> Self {
        let g = Self::new();
        *g.tape.borrow_mut() = StopGradTape::Replay { values, cursor: 0 };
        g
    }

    /// Values recorded by `stop_gradient` while in recording mode.
    pub fn take_recorded(&self) -> Vec<Tensor<T>> {
        match std::mem::replace(&mut *self.tape.borrow_mut(), StopGradTape::Off) {
            StopGradTape::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn binary_map(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape(op, &va, &vb)?;
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, make(a, b), ng))
    }

    fn unary_map(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary_map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn swish(&self, a: Var) -> Var {
        self.unary_map(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary_map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary_map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary_map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary_map(a, |x| x * x, Op::Square(a))
    }

    /// `a[..., F] + bias[F]`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let (va, vb) = (self.value(a), self.value(bias));
            let f = va.last_dim();
            if vb.len() != f {
                return Err(Error::dim(
                    "add_bias",
                    format!("{:?} + {:?}", va.shape(), vb.shape()),
                ));
            }
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
            out
        };
        let ng = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), ng))
    }

    /// `a[B, N, F] + b[B, F]`, broadcasting `b` over the middle axis.
    pub fn add_per_item(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let (sa, sb) = (va.shape(), vb.shape());
            if sa.len() != 3 || sb.len() != 2 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::dim("add_per_item", format!("{sa:?} + {sb:?}")));
            }
            let (n, f) = (sa[1], sa[2]);
            let mut out = va.clone();
            for (bi, chunk) in out.data_mut().chunks_mut(n * f).enumerate() {
                let row = &vb.data()[bi * f..(bi + 1) * f];
                for r in chunk.chunks_mut(f) {
                    for (o, &x) in r.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            out
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::AddPerItem(a, b), ng))
    }

    /// `a[..., K] @ w[K, N]`.
    pub fn matmul(&self, a: Var, w: Var) -> Result<Var> {
        let value = {
            let (va, vw) = (self.value(a), self.value(w));
            let k = va.last_dim();
            if vw.rank() != 2 || vw.shape()[0] != k || va.rank() == 0 {
                return Err(Error::dim(
                    "matmul",
                    format!("{:?} @ {:?}", va.shape(), vw.shape()),
                ));
            }
            let n = vw.shape()[1];
            let m = va.rows();
            let mut shape = va.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(shape);
            T::gemm(
                m,
                k,
                n,
                T::one(),
                va.data(),
                (k as isize, 1),
                vw.data(),
                (n as isize, 1),
                T::zero(),
                out.data_mut(),
                (n as isize, 1),
            );
            out
        };
        let ng = self.needs(&[a, w]);
        Ok(self.push(value, Op::MatMul(a, w), ng))
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Batched product `a[B, M, K] @ b[B, K, N]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let (sa, sb) = (va.shape(), vb.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::dim("bmm", format!("{sa:?} @ {sb:?}")));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = Tensor::zeros(vec![bs, m, n]);
            for i in 0..bs {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &va.data()[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &vb.data()[i * k * n..(i + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
            out
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Bmm(a, b), ng))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.rank() < 2 {
                return Err(Error::dim("transpose", format!("{:?}", va.shape())));
            }
            transpose_last2(&va)
        };
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::TransposeLast2(a), ng))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let mut out = self.value(a).clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Layer normalization over the trailing axis with ε = 1e-5.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
            let f = vx.last_dim();
            if vg.len() != f || vb.len() != f {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{:?} with gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
                ));
            }
            let nf = T::lit(f as f64);
            let eps = T::lit(LAYER_NORM_EPS);
            let mut out = vx.clone();
            let mut xhat = vec![T::zero(); vx.len()];
            let mut inv_std = Vec::with_capacity(vx.rows());
            for r in 0..vx.rows() {
                let row = vx.row(r);
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                let xh = &mut xhat[r * f..(r + 1) * f];
                for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                    xh[j] = (row[j] - mean) * is;
                    *o = xh[j] * vg.data()[j] + vb.data()[j];
                }
            }
            (out, xhat, inv_std)
        };
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Depthwise convolution over the time axis of `x[B, T, C]` with
    /// `kernel[K, C]`, zero "same" padding (left pad `(K-1)/2`).
    pub fn depthwise_conv1d(&self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = {
            let (vx, vk, vb) = (self.value(x), self.value(kernel), self.value(bias));
            let sx = vx.shape();
            if sx.len() != 3 || vk.rank() != 2 || vk.shape()[1] != sx[2] || vb.len() != sx[2] {
                return Err(Error::dim(
                    "depthwise_conv1d",
                    format!("x {:?}, kernel {:?}, bias {:?}", sx, vk.shape(), vb.shape()),
                ));
            }
            let (bs, t, c) = (sx[0], sx[1], sx[2]);
            let k = vk.shape()[0];
            let pad = (k - 1) / 2;
            let mut out = Tensor::zeros(vec![bs, t, c]);
            let (xd, kd, bd) = (vx.data(), vk.data(), vb.data());
            let od = out.data_mut();
            for b in 0..bs {
                for ti in 0..t {
                    let o = &mut od[(b * t + ti) * c..(b * t + ti + 1) * c];
                    o.copy_from_slice(bd);
                    for j in 0..k {
                        let src = ti + j;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let xr = &xd[(b * t + src - pad) * c..(b * t + src - pad + 1) * c];
                        let kr = &kd[j * c..(j + 1) * c];
                        for ((o, &xv), &kv) in o.iter_mut().zip(xr).zip(kr) {
                            *o += xv * kv;
                        }
                    }
                }
            }
            out
        };
        let ng = self.needs(&[x, kernel, bias]);
        Ok(self.push(value, Op::DepthwiseConv { x, kernel, bias }, ng))
    }

    /// Gathers rows of `table[V, F]`; output shape is `lead ++ [F]`.
    pub fn embedding(&self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let value = {
            let vt = self.value(table);
            if vt.rank() != 2 || lead.iter().product::<usize>() != ids.len() {
                return Err(Error::dim(
                    "embedding",
                    format!("table {:?}, {} ids into {lead:?}", vt.shape(), ids.len()),
                ));
            }
            let (v, f) = (vt.shape()[0], vt.shape()[1]);
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(Error::dim(
                    "embedding",
                    format!("id {bad} out of range for table of {v} rows"),
                ));
            }
            let mut data = Vec::with_capacity(ids.len() * f);
            for &i in ids {
                data.extend_from_slice(vt.row(i));
            }
            let mut shape = lead.to_vec();
            shape.push(f);
            Tensor::new(shape, data)?
        };
        let ng = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Replaces elements where `mask` is true by `fill`; no gradient flows
    /// to replaced elements.
    pub fn masked_fill(&self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        let value = {
            let vx = self.value(x);
            if mask.len() != vx.len() {
                return Err(Error::dim(
                    "masked_fill",
                    format!("mask of {} for {:?}", mask.len(), vx.shape()),
                ));
            }
            let mut out = vx.clone();
            for (o, &m) in out.data_mut().iter_mut().zip(mask) {
                if m {
                    *o = fill;
                }
            }
            out
        };
        let ng = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let va = self.value(a);
            Tensor::scalar(va.sum() / T::lit(va.len().max(1) as f64))
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    /// Identity on values; blocks gradient flow. In replay mode the value
    /// recorded at the same call position is returned instead.
    pub fn stop_gradient(&self, a: Var) -> Result<Var> {
        let fresh = self.value(a).clone();
        let value = self.through_tape("stop_gradient", fresh)?;
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Takes the value `q` but passes the incoming gradient to `x` unchanged:
    /// `x + stop_gradient(q - x)` without the rounding of the round trip.
    /// The tape stores the offset `q - x`; a replay returns `x + offset`, so
    /// finite differences see the pass-through path.
    pub fn straight_through(&self, x: Var, q: Tensor<T>) -> Result<Var> {
        let offset = {
            let vx = self.value(x);
            if q.shape() != vx.shape() {
                return Err(Error::dim(
                    "straight_through",
                    format!("{:?} vs {:?}", q.shape(), vx.shape()),
                ));
            }
            let data = q.data().iter().zip(vx.data()).map(|(&a, &b)| a - b).collect();
            Tensor::new(q.shape().to_vec(), data)?
        };
        let replaying = matches!(*self.tape.borrow(), StopGradTape::Replay { .. });
        let offset = self.through_tape("straight_through", offset)?;
        let value = if replaying {
            let vx = self.value(x);
            let data = vx.data().iter().zip(offset.data()).map(|(&a, &b)| a + b).collect();
            Tensor::new(vx.shape().to_vec(), data)?
        } else {
            q
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::StraightThrough(x), ng))
    }

    fn through_tape(&self, op: &'static str, fresh: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = self.tape.borrow_mut();
        match &mut *tape {
            StopGradTape::Off => Ok(fresh),
            StopGradTape::Record(vals) => {
                vals.push(fresh.clone());
                Ok(fresh)
            }
            StopGradTape::Replay { values, cursor } => {
                let v = values
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("{op} replay exhausted")))?;
                *cursor += 1;
                if v.shape() != fresh.shape() {
                    return Err(Error::dim(
                        op,
                        format!("replayed {:?} for {:?}", v.shape(), fresh.shape()),
                    ));
                }
                Ok(v)
            }
        }
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let vx = self.value(x);
            let f = vx.last_dim();
            if start + len > f {
                return Err(Error::dim(
                    "slice_last",
                    format!("{start}..{} of {:?}", start + len, vx.shape()),
                ));
            }
            let mut data = Vec::with_capacity(vx.rows() * len);
            for r in 0..vx.rows() {
                data.extend_from_slice(&vx.row(r)[start..start + len]);
            }
            let mut shape = vx.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(shape, data)?
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SliceLast { x, start }, ng))
    }

    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals
                .first()
                .ok_or_else(|| Error::dim("concat_last", "no inputs"))?;
            let lead = &first.shape()[..first.rank() - 1];
            if vals.iter().any(|v| &v.shape()[..v.rank() - 1] != lead) {
                let shapes: Vec<_> = vals.iter().map(|v| v.shape().to_vec()).collect();
                return Err(Error::dim("concat_last", format!("{shapes:?}")));
            }
            let total: usize = vals.iter().map(|v| v.last_dim()).sum();
            let rows = first.rows();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)?
        };
        let ng = self.needs(parts);
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), ng))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Divides each trailing-axis row by its sum; all-zero rows map to zero.
    pub fn normalize_rows(&self, x: Var) -> Var {
        let value = {
            let mut out = self.value(x).clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let s: T = row.iter().copied().sum();
                for v in row.iter_mut() {
                    *v = if s == T::zero() { T::zero() } else { *v / s };
                }
            }
            out
        };
        let ng = self.needs(&[x]);
        self.push(value, Op::NormalizeRows(x), ng)
    }

    /// `a * s` for a one-element `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let value = {
            let (va, vs) = (self.value(a), self.value(s));
            if vs.len() != 1 {
                return Err(Error::dim("scale_by", format!("scale {:?}", vs.shape())));
            }
            let c = vs.data()[0];
            va.map(|x| x * c)
        };
        let ng = self.needs(&[a, s]);
        Ok(self.push(value, Op::ScaleByVar(a, s), ng))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got {:?}", nodes[root.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn transpose_last2<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = a.len() / (m * n).max(1);
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    let mut out = Tensor::zeros(shape);
    let (src, dst) = (a.data(), out.data_mut());
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                dst[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    out
}

/// Returns a mutable gradient buffer for `v`, zero-initialised on first use.
fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Tensor<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec())))
}

fn acc_map<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
    g: &Tensor<T>,
    f: impl Fn(usize, T) -> T,
) {
    if let Some(buf) = slot(grads, nodes, v) {
        for (i, (o, &gi)) in buf.data_mut().iter_mut().zip(g.data()).enumerate() {
            *o += f(i, gi);
        }
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::StraightThrough(a) => acc_map(grads, nodes, *a, g, |_, x| x),
        Op::Add(a, b) => {
            acc_map(grads, nodes, *a, g, |_, x| x);
            acc_map(grads, nodes, *b, g, |_, x| x);
        }
        Op::Sub(a, b) => {
            acc_map(grads, nodes, *a, g, |_, x| x);
            acc_map(grads, nodes, *b, g, |_, x| -x);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc_map(grads, nodes, *a, g, |i, x| x * vb[i]);
            acc_map(grads, nodes, *b, g, |i, x| x * va[i]);
        }
        Op::Scale(a, c) => acc_map(grads, nodes, *a, g, |_, x| x * *c),
        Op::AddBias(a, b) => {
            acc_map(grads, nodes, *a, g, |_, x| x);
            if let Some(buf) = slot(grads, nodes, *b) {
                for r in 0..g.rows() {
                    for (o, &x) in buf.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
        }
        Op::AddPerItem(a, b) => {
            acc_map(grads, nodes, *a, g, |_, x| x);
            let s = g.shape();
            let (n, f) = (s[1], s[2]);
            if let Some(buf) = slot(grads, nodes, *b) {
                for (bi, chunk) in g.data().chunks(n * f).enumerate() {
                    let dst = &mut buf.data_mut()[bi * f..(bi + 1) * f];
                    for r in chunk.chunks(f) {
                        for (o, &x) in dst.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                }
            }
        }
        Op::MatMul(a, w) => {
            let (va, vw) = (val(*a), val(*w));
            let k = va.last_dim();
            let n = vw.shape()[1];
            let m = va.rows();
            if let Some(buf) = slot(grads, nodes, *a) {
                // dA = G @ W^T
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    (n as isize, 1),
                    vw.data(),
                    (1, n as isize),
                    T::one(),
                    buf.data_mut(),
                    (k as isize, 1),
                );
            }
            if let Some(buf) = slot(grads, nodes, *w) {
                // dW = A^T @ G
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    va.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    T::one(),
                    buf.data_mut(),
                    (n as isize, 1),
                );
            }
        }
        Op::Bmm(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (sa, sb) = (va.shape(), vb.shape());
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if let Some(buf) = slot(grads, nodes, *a) {
                for i in 0..bs {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &vb.data()[i * k * n..(i + 1) * k * n],
                        (1, n as isize),
                        T::one(),
                        &mut buf.data_mut()[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if let Some(buf) = slot(grads, nodes, *b) {
                for i in 0..bs {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &va.data()[i * m * k..(i + 1) * m * k],
                        (1, k as isize),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        T::one(),
                        &mut buf.data_mut()[i * k * n..(i + 1) * k * n],
                        (n as isize, 1),
                    );
                }
            }
        }
        Op::TransposeLast2(a) => {
            let gt = transpose_last2(g);
            acc_map(grads, nodes, *a, &gt, |_, x| x);
        }
        Op::Softmax(a) => {
            let y = &node.value;
            if let Some(buf) = slot(grads, nodes, *a) {
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in buf.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += p * (q - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let f = g.last_dim();
            let nf = T::lit(f as f64);
            let vg = val(*gain).data();
            if let Some(buf) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = &xhat[r * f..(r + 1) * f];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..f {
                        let d = gr[j] * vg[j];
                        m1 += d;
                        m2 += d * xh[j];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    let is = inv_std[r];
                    for (j, o) in buf.row_mut(r).iter_mut().enumerate() {
                        *o += is * (gr[j] * vg[j] - m1 - xh[j] * m2);
                    }
                }
            }
            if let Some(buf) = slot(grads, nodes, *gain) {
                for r in 0..g.rows() {
                    let xh = &xhat[r * f..(r + 1) * f];
                    for ((o, &gv), &h) in buf.data_mut().iter_mut().zip(g.row(r)).zip(xh) {
                        *o += gv * h;
                    }
                }
            }
            if let Some(buf) = slot(grads, nodes, *bias) {
                for r in 0..g.rows() {
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        }
        Op::DepthwiseConv { x, kernel, bias } => {
            let (vx, vk) = (val(*x), val(*kernel));
            let s = vx.shape();
            let (bs, t, c) = (s[0], s[1], s[2]);
            let k = vk.shape()[0];
            let pad = (k - 1) / 2;
            let gd = g.data();
            if let Some(buf) = slot(grads, nodes, *x) {
                let bd = buf.data_mut();
                for b in 0..bs {
                    for ti in 0..t {
                        let gr = &gd[(b * t + ti) * c..(b * t + ti + 1) * c];
                        for j in 0..k {
                            let src = ti + j;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let dst = &mut bd[(b * t + src - pad) * c..(b * t + src - pad + 1) * c];
                            let kr = &vk.data()[j * c..(j + 1) * c];
                            for ((o, &gv), &kv) in dst.iter_mut().zip(gr).zip(kr) {
                                *o += gv * kv;
                            }
                        }
                    }
                }
            }
            if let Some(buf) = slot(grads, nodes, *kernel) {
                let kd = buf.data_mut();
                for b in 0..bs {
                    for ti in 0..t {
                        let gr = &gd[(b * t + ti) * c..(b * t + ti + 1) * c];
                        for j in 0..k {
                            let src = ti + j;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xr = &vx.data()[(b * t + src - pad) * c..(b * t + src - pad + 1) * c];
                            for ((o, &gv), &xv) in kd[j * c..(j + 1) * c].iter_mut().zip(gr).zip(xr) {
                                *o += gv * xv;
                            }
                        }
                    }
                }
            }
            if let Some(buf) = slot(grads, nodes, *bias) {
                for r in 0..g.rows() {
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        }
        Op::Swish(a) => {
            let va = val(*a).data();
            acc_map(grads, nodes, *a, g, |i, x| {
                let s = sigmoid(va[i]);
                x * (s + va[i] * s * (T::one() - s))
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc_map(grads, nodes, *a, g, |i, x| x * y[i] * (T::one() - y[i]));
        }
        Op::Exp(a) => {
            let y = node.value.data();
            acc_map(grads, nodes, *a, g, |i, x| x * y[i]);
        }
        Op::Abs(a) => {
            let va = val(*a).data();
            acc_map(grads, nodes, *a, g, |i, x| {
                if va[i] > T::zero() {
                    x
                } else if va[i] < T::zero() {
                    -x
                } else {
                    T::zero()
                }
            });
        }
        Op::Square(a) => {
            let va = val(*a).data();
            acc_map(grads, nodes, *a, g, |i, x| T::lit(2.0) * va[i] * x);
        }
        Op::Embedding { table, ids } => {
            if let Some(buf) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in buf.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            acc_map(grads, nodes, *x, g, |i, v| if mask[i] { T::zero() } else { v });
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            acc_map(grads, nodes, *a, &Tensor::full(val(*a).shape().to_vec(), gv), |_, x| x);
        }
        Op::Mean(a) => {
            let n = T::lit(val(*a).len().max(1) as f64);
            let gv = g.data()[0] / n;
            acc_map(grads, nodes, *a, &Tensor::full(val(*a).shape().to_vec(), gv), |_, x| x);
        }
        Op::SliceLast { x, start } => {
            let len = g.last_dim();
            if let Some(buf) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    for (o, &gv) in buf.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
        }
        Op::ConcatLast(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).last_dim();
                if let Some(buf) = slot(grads, nodes, p) {
                    for r in 0..g.rows() {
                        for (o, &gv) in buf.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + len]) {
                            *o += gv;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Reshape(a) => acc_map(grads, nodes, *a, g, |_, x| x),
        Op::NormalizeRows(a) => {
            let (va, y) = (val(*a), &node.value);
            if let Some(buf) = slot(grads, nodes, *a) {
                for r in 0..y.rows() {
                    let s: T = va.row(r).iter().copied().sum();
                    if s == T::zero() {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, &q) in buf.row_mut(r).iter_mut().zip(gr) {
                        *o += (q - dot) / s;
                    }
                }
            }
        }
        Op::ScaleByVar(a, s) => {
            let c = val(*s).data()[0];
            acc_map(grads, nodes, *a, g, |_, x| x * c);
            if let Some(buf) = slot(grads, nodes, *s) {
                let dot: T = g.data().iter().zip(val(*a).data()).map(|(&p, &q)| p * q).sum();
                buf.data_mut()[0] += dot;
            }
        }
    }
}
