use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Additive attention mask value for padded keys.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockDims {
    pub dim: usize,
    pub ffn: usize,
    pub kernel: usize,
}

pub(crate) fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

pub(crate) fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), gaussian(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full(vec![dim], T::one()));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![dim]));
}

pub(crate) fn init_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: BlockDims, rng: &mut impl Rng) {
    for ff in ["ff1", "ff2"] {
        init_norm(store, &format!("{prefix}.{ff}.ln"), d.dim);
        init_linear(store, &format!("{prefix}.{ff}.up"), d.dim, d.ffn, rng);
        init_linear(store, &format!("{prefix}.{ff}.down"), d.ffn, d.dim, rng);
    }
    init_norm(store, &format!("{prefix}.att.ln"), d.dim);
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.att.{proj}"), d.dim, d.dim, rng);
    }
    init_norm(store, &format!("{prefix}.conv.ln"), d.dim);
    init_linear(store, &format!("{prefix}.conv.pw1"), d.dim, 2 * d.dim, rng);
    store.insert(
        format!("{prefix}.conv.dw.k"),
        gaussian(&[d.kernel, d.dim], 1.0 / (d.kernel as f64).sqrt(), rng),
    );
    store.insert(format!("{prefix}.conv.dw.b"), Tensor::zeros(vec![d.dim]));
    init_norm(store, &format!("{prefix}.conv.norm"), d.dim);
    init_linear(store, &format!("{prefix}.conv.pw2"), d.dim, d.dim, rng);
    init_norm(store, &format!("{prefix}.out.ln"), d.dim);
}

/// Per-sequence padding information for a `[B, L, D]` activation.
pub(crate) struct SeqMask<T> {
    /// `[B, L, L]` additive key mask.
    pub attn: Tensor<T>,
    /// True on padded rows, repeated over the feature axis.
    pub rows: Vec<bool>,
}

impl<T: Scalar> SeqMask<T> {
    pub fn new(valid: &[bool], batch: usize, len: usize, dim: usize) -> Self {
        let mut attn = Tensor::zeros(vec![batch, len, len]);
        let a = attn.data_mut();
        for b in 0..batch {
            for q in 0..len {
                for k in 0..len {
                    if !valid[b * len + k] {
                        a[(b * len + q) * len + k] = T::lit(MASK_VALUE);
                    }
                }
            }
        }
        let rows = valid.iter().flat_map(|&v| std::iter::repeat_n(!v, dim)).collect();
        Self { attn, rows }
    }
}

fn ln<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?)
}

pub(crate) fn linear<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.linear(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)
}

fn half_ffn<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = ln(g, p, &format!("{name}.ln"), x)?;
    let h = g.swish(linear(g, p, &format!("{name}.up"), h)?);
    let h = linear(g, p, &format!("{name}.down"), h)?;
    g.add(x, g.scale(h, T::lit(0.5)))
}

fn attention<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var, heads: usize, mask: &SeqMask<T>) -> Result<Var> {
    let h = ln(g, p, &format!("{name}.ln"), x)?;
    let q = linear(g, p, &format!("{name}.q"), h)?;
    let k = linear(g, p, &format!("{name}.k"), h)?;
    let v = linear(g, p, &format!("{name}.v"), h)?;
    let dim = g.shape(x)[2];
    let dh = dim / heads;
    let inv = T::lit(1.0 / (dh as f64).sqrt());
    let bias = g.constant(mask.attn.clone());
    let mut ctx = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_last(q, hd * dh, dh)?;
        let kh = g.slice_last(k, hd * dh, dh)?;
        let vh = g.slice_last(v, hd * dh, dh)?;
        let scores = g.scale(g.bmm(qh, g.transpose(kh)?)?, inv);
        let probs = g.softmax(g.add(scores, bias)?);
        ctx.push(g.bmm(probs, vh)?);
    }
    let ctx = if heads == 1 { ctx[0] } else { g.concat_last(&ctx)? };
    let out = linear(g, p, &format!("{name}.o"), ctx)?;
    g.add(x, out)
}

fn conv_module<T: Scalar>(g: &Graph<T>, p: &Bound, name: &str, x: Var, mask: &SeqMask<T>) -> Result<Var> {
    let dim = g.shape(x)[2];
    let h = ln(g, p, &format!("{name}.ln"), x)?;
    let h = linear(g, p, &format!("{name}.pw1"), h)?;
    let a = g.slice_last(h, 0, dim)?;
    let gate = g.sigmoid(g.slice_last(h, dim, dim)?);
    // Padded rows must not leak into neighbours through the kernel.
    let h = g.masked_fill(g.mul(a, gate)?, &mask.rows, T::zero())?;
    let h = g.depthwise_conv1d(h, p.get(&format!("{name}.dw.k"))?, p.get(&format!("{name}.dw.b"))?)?;
    let h = g.swish(ln(g, p, &format!("{name}.norm"), h)?);
    let h = linear(g, p, &format!("{name}.pw2"), h)?;
    g.add(x, h)
}

/// Macaron block: ½FFN, self-attention, convolution, ½FFN, layer norm.
/// Padded rows of the output are zero.
pub(crate) fn block<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: &SeqMask<T>,
) -> Result<Var> {
    let x = half_ffn(g, p, &format!("{prefix}.ff1"), x)?;
    let x = attention(g, p, &format!("{prefix}.att"), x, heads, mask)?;
    let x = conv_module(g, p, &format!("{prefix}.conv"), x, mask)?;
    let x = half_ffn(g, p, &format!("{prefix}.ff2"), x)?;
    let x = ln(g, p, &format!("{prefix}.out.ln"), x)?;
    g.masked_fill(x, &mask.rows, T::zero())
}

pub(crate) fn stack<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    layers: usize,
    mut x: Var,
    heads: usize,
    mask: &SeqMask<T>,
) -> Result<Var> {
    for l in 0..layers {
        x = block(g, p, &format!("{prefix}.{l}"), x, heads, mask)?;
    }
    Ok(x)
}
