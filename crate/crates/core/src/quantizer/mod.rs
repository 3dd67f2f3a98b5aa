//! Residual vector quantization with EMA codebooks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One level of `K × d` code vectors with exponential-moving-average state.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub entries: Tensor<T>,
    pub ema_count: Vec<T>,
    pub ema_sum: Tensor<T>,
    pub decay: T,
    pub epsilon: T,
}

impl<T: Scalar> Codebook<T> {
    /// Codebook with small random entries and unit counts.
    pub fn random(k: usize, d: usize, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Self {
        let entries = Tensor::from_fn(vec![k, d], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(0.1 * z)
        });
        Self::from_entries(entries, decay, epsilon)
    }

    /// Wraps fixed entries; EMA counts start at one per code.
    pub fn from_entries(entries: Tensor<T>, decay: f64, epsilon: f64) -> Self {
        let k = entries.shape()[0];
        Self {
            ema_sum: entries.clone(),
            ema_count: vec![T::one(); k],
            entries,
            decay: T::lit(decay),
            epsilon: T::lit(epsilon),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, i: usize) -> &[T] {
        self.entries.row(i)
    }

    /// Nearest code by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, v: &[T]) -> (usize, T) {
        let mut best = (0, T::infinity());
        for i in 0..self.size() {
            let d = sq_dist(self.entry(i), v);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// k-means++ seeding from `data` (rows of length d). With fewer distinct
    /// rows than codes, the remainder are jittered copies of data rows.
    pub fn init_kmeans_pp(&mut self, data: &[T], rng: &mut impl Rng) -> Result<()> {
        let d = self.dim();
        let k = self.size();
        let n = check_rows("init_kmeans_pp", data, d)?;
        if n == 0 {
            return Err(Error::Contract("k-means++ seeding needs at least one vector".into()));
        }
        let row = |i: usize| &data[i * d..(i + 1) * d];
        let mut chosen: Vec<Vec<T>> = Vec::with_capacity(k);
        chosen.push(row(rng.random_range(0..n)).to_vec());
        let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &chosen[0]).as_f64()).collect();
        let spread = data_spread(data, d).max(1e-6);
        while chosen.len() < k {
            let total: f64 = dist.iter().sum();
            let next: Vec<T> = if total > 1e-12 * spread * spread {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in dist.iter().enumerate() {
                    if u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                row(pick).to_vec()
            } else {
                let base = row(rng.random_range(0..n));
                base.iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(rng);
                        x + T::lit(1e-3 * spread * z)
                    })
                    .collect()
            };
            for (i, dv) in dist.iter_mut().enumerate() {
                *dv = dv.min(sq_dist(row(i), &next).as_f64());
            }
            chosen.push(next);
        }
        let flat: Vec<T> = chosen.into_iter().flatten().collect();
        *self = Self::from_entries(Tensor::new(vec![k, d], flat)?, self.decay.as_f64(), self.epsilon.as_f64());
        Ok(())
    }

    /// Mean squared distance from each row of `data` to its nearest code.
    pub fn objective(&self, data: &[T]) -> Result<f64> {
        let d = self.dim();
        let n = check_rows("objective", data, d)?;
        if n == 0 {
            return Ok(0.0);
        }
        Ok((0..n)
            .map(|i| self.nearest(&data[i * d..(i + 1) * d]).1.as_f64())
            .sum::<f64>()
            / n as f64)
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Root-mean-square deviation of the rows from their mean.
fn data_spread<T: Scalar>(data: &[T], d: usize) -> f64 {
    let n = data.len() / d;
    if n == 0 {
        return 0.0;
    }
    let mut var = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j].as_f64()).sum::<f64>() / n as f64;
        var += (0..n).map(|i| (data[i * d + j].as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
    }
    var.sqrt()
}

fn check_rows<T>(op: &'static str, data: &[T], d: usize) -> Result<usize> {
    if d == 0 || data.len() % d != 0 {
        return Err(Error::dim(op, format!("{} values are not rows of {d}", data.len())));
    }
    Ok(data.len() / d)
}

/// Result of quantizing `N` vectors against one codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput<T> {
    pub indices: Vec<usize>,
    pub quantized: Vec<T>,
    pub residuals: Vec<T>,
}

/// Nearest-code assignment of each row of `x` (`N × d`, row-major).
pub fn quantize_level<T: Scalar>(book: &Codebook<T>, x: &[T]) -> Result<LevelOutput<T>> {
    let d = book.dim();
    let n = check_rows("quantize_level", x, d)?;
    let mut out = LevelOutput {
        indices: Vec::with_capacity(n),
        quantized: Vec::with_capacity(n * d),
        residuals: Vec::with_capacity(n * d),
    };
    for i in 0..n {
        let v = &x[i * d..(i + 1) * d];
        let (idx, _) = book.nearest(v);
        let q = book.entry(idx);
        out.indices.push(idx);
        out.quantized.extend_from_slice(q);
        out.residuals.extend(v.iter().zip(q).map(|(&a, &b)| a - b));
    }
    Ok(out)
}

/// Cascade of codebooks; level `l` quantizes the residual left by level `l-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rvq<T> {
    pub levels: Vec<Codebook<T>>,
    pub beta: T,
}

impl<T: Scalar> Rvq<T> {
    pub fn new(levels: Vec<Codebook<T>>, beta: f64) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Contract("RVQ needs at least one level".into()))?;
        let d = first.dim();
        if levels.iter().any(|b| b.dim() != d) {
            return Err(Error::Contract("all RVQ levels must share the code dimension".into()));
        }
        Ok(Self {
            levels,
            beta: T::lit(beta),
        })
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// k-means++ seeding of every level on the residuals of the levels above.
    pub fn init_from_data(&mut self, x: &[T], rng: &mut impl Rng) -> Result<()> {
        let mut r = x.to_vec();
        for book in &mut self.levels {
            book.init_kmeans_pp(&r, rng)?;
            r = quantize_level(book, &r)?.residuals;
        }
        Ok(())
    }

    /// Sum of the selected code vectors, optionally keeping only the first
    /// `keep` levels.
    pub fn lookup(&self, codes: &CodeSequence, keep: Option<usize>) -> Result<Vec<T>> {
        let d = self.dim();
        let keep = keep.unwrap_or(self.depth()).min(self.depth());
        if codes.depth() != self.depth() {
            return Err(Error::Contract(format!(
                "code sequence has {} levels, quantizer has {}",
                codes.depth(),
                self.depth()
            )));
        }
        let mut out = vec![T::zero(); codes.len() * d];
        for (l, book) in self.levels.iter().enumerate().take(keep) {
            for (p, &i) in codes.indices[l].iter().enumerate() {
                if i >= book.size() {
                    return Err(Error::Contract(format!(
                        "code {i} at level {} out of range for {} codes",
                        l + 1,
                        book.size()
                    )));
                }
                for (o, &e) in out[p * d..(p + 1) * d].iter_mut().zip(book.entry(i)) {
                    *o += e;
                }
            }
        }
        Ok(out)
    }
}

/// Per-position code indices for every level plus the summed code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSequence {
    /// `indices[level][position]`.
    pub indices: Vec<Vec<usize>>,
    /// Row-major `len × dim` sums of the selected codes.
    pub vectors: Vec<f64>,
    pub dim: usize,
}

impl CodeSequence {
    /// Builds a sequence from indices, recomputing the code-vector sums.
    pub fn from_indices<T: Scalar>(indices: Vec<Vec<usize>>, q: &Rvq<T>) -> Result<Self> {
        let len = indices.first().map_or(0, |l| l.len());
        if indices.iter().any(|l| l.len() != len) {
            return Err(Error::Contract("code levels have different lengths".into()));
        }
        let mut s = Self {
            indices,
            vectors: Vec::new(),
            dim: q.dim(),
        };
        s.vectors = q.lookup(&s, None)?.iter().map(|v| v.as_f64()).collect();
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.indices.first().map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.indices.len()
    }

    pub fn level(&self, l: usize) -> &[usize] {
        &self.indices[l]
    }

    /// Indices of every level at one position.
    pub fn at(&self, pos: usize) -> Vec<usize> {
        self.indices.iter().map(|l| l[pos]).collect()
    }

    /// Positions `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            indices: self.indices.iter().map(|l| l[start..end].to_vec()).collect(),
            vectors: self.vectors[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
        }
    }
}

/// Output of a plain (graph-free) RVQ pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqOutput<T> {
    pub codes: CodeSequence,
    /// Straight-through output value: exactly the sum of selected codes.
    pub output: Vec<T>,
    /// `β ·` mean over levels and positions of `||r_{l-1} − q_l||²`.
    pub commitment: T,
    /// Residual entering each level (`inputs[0] = x`).
    pub inputs: Vec<Vec<T>>,
}

pub fn rvq_forward<T: Scalar>(q: &Rvq<T>, x: &[T]) -> Result<RvqOutput<T>> {
    let d = q.dim();
    let n = check_rows("rvq_forward", x, d)?;
    let mut r = x.to_vec();
    let mut sum = vec![T::zero(); x.len()];
    let mut indices = Vec::with_capacity(q.depth());
    let mut inputs = Vec::with_capacity(q.depth());
    let mut commit = T::zero();
    for book in &q.levels {
        let lv = quantize_level(book, &r)?;
        commit += lv.residuals.iter().map(|&e| e * e).sum::<T>();
        for (s, &v) in sum.iter_mut().zip(&lv.quantized) {
            *s += v;
        }
        indices.push(lv.indices);
        inputs.push(std::mem::replace(&mut r, lv.residuals));
    }
    let denom = T::lit((q.depth() * n.max(1)) as f64);
    Ok(RvqOutput {
        codes: CodeSequence {
            indices,
            vectors: sum.iter().map(|v| v.as_f64()).collect(),
            dim: d,
        },
        output: sum,
        commitment: q.beta * commit / denom,
        inputs,
    })
}

/// In-graph RVQ pass over `x` of shape `[..., d]`.
#[derive(Clone, Debug)]
pub struct GraphRvq<T> {
    /// Straight-through output (value = code sum, gradient = identity to `x`).
    pub output: Var,
    /// Unweighted commitment: mean over levels and valid rows of `||r_{l-1} − sg(q_l)||²`.
    pub commitment: Var,
    /// `indices[level][row]` over all rows, padded ones included.
    pub indices: Vec<Vec<usize>>,
    /// Residual entering each level, all rows.
    pub inputs: Vec<Vec<T>>,
}

/// `valid[row]` marks real (unpadded) rows; padded rows are quantized but
/// excluded from the commitment term.
pub fn rvq_forward_graph<T: Scalar>(g: &Graph<T>, q: &Rvq<T>, x: Var, valid: &[bool]) -> Result<GraphRvq<T>> {
    let d = q.dim();
    let shape = g.shape(x);
    if shape.last() != Some(&d) {
        return Err(Error::dim("rvq", format!("input {shape:?}, code dim {d}")));
    }
    let xv = g.value(x).data().to_vec();
    let rows = xv.len() / d;
    if valid.len() != rows {
        return Err(Error::dim("rvq", format!("{} validity flags for {rows} rows", valid.len())));
    }
    let pad_mask: Vec<bool> = valid.iter().flat_map(|&v| std::iter::repeat_n(!v, d)).collect();
    let n_valid = valid.iter().filter(|&&v| v).count().max(1);

    let mut r_val = xv;
    let mut r_var = x;
    let mut sum = vec![T::zero(); r_val.len()];
    let mut indices = Vec::with_capacity(q.depth());
    let mut inputs = Vec::with_capacity(q.depth());
    let mut commit_terms = Vec::with_capacity(q.depth());
    for book in &q.levels {
        let lv = quantize_level(book, &r_val)?;
        for (s, &v) in sum.iter_mut().zip(&lv.quantized) {
            *s += v;
        }
        let qv = g.constant(Tensor::new(shape.clone(), lv.quantized)?);
        let qv = g.stop_gradient(qv)?;
        let diff = g.sub(r_var, qv)?;
        let sq = g.masked_fill(g.square(diff), &pad_mask, T::zero())?;
        commit_terms.push(g.sum(sq));
        indices.push(lv.indices);
        inputs.push(std::mem::replace(&mut r_val, g.value(diff).data().to_vec()));
        r_var = diff;
    }
    let mut total = commit_terms[0];
    for &t in &commit_terms[1..] {
        total = g.add(total, t)?;
    }
    let commitment = g.scale(total, T::one() / T::lit((q.depth() * n_valid) as f64));
    let output = g.straight_through(x, Tensor::new(shape, sum)?)?;
    Ok(GraphRvq {
        output,
        commitment,
        indices,
        inputs,
    })
}

/// EMA codebook update from the vectors assigned to each code.
pub fn ema_update<T: Scalar>(book: &mut Codebook<T>, assignments: &[usize], vectors: &[T]) -> Result<()> {
    let (k, d) = (book.size(), book.dim());
    let n = check_rows("ema_update", vectors, d)?;
    if n != assignments.len() {
        return Err(Error::dim(
            "ema_update",
            format!("{} assignments for {n} vectors", assignments.len()),
        ));
    }
    let mut counts = vec![T::zero(); k];
    let mut sums = vec![T::zero(); k * d];
    for (i, &a) in assignments.iter().enumerate() {
        if a >= k {
            return Err(Error::Contract(format!("assignment {a} out of range for {k} codes")));
        }
        counts[a] += T::one();
        for j in 0..d {
            sums[a * d + j] += vectors[i * d + j];
        }
    }
    let lam = book.decay;
    let keep = T::one() - lam;
    for i in 0..k {
        book.ema_count[i] = lam * book.ema_count[i] + keep * counts[i];
    }
    for (s, &b) in book.ema_sum.data_mut().iter_mut().zip(&sums) {
        *s = lam * *s + keep * b;
    }
    let total: T = book.ema_count.iter().copied().sum();
    let eps = book.epsilon;
    let kf = T::lit(k as f64);
    for i in 0..k {
        let smoothed = (book.ema_count[i] + eps) / (total + kf * eps) * total;
        if smoothed > T::zero() {
            for j in 0..d {
                let s = book.ema_sum.data()[i * d + j];
                book.entries.data_mut()[i * d + j] = s / smoothed;
            }
        }
    }
    Ok(())
}

/// Moves codes whose EMA count fell below `threshold` onto random rows of
/// `batch`; returns how many were moved.
pub fn reinit_dead_codes<T: Scalar>(
    book: &mut Codebook<T>,
    batch: &[T],
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    let d = book.dim();
    let n = check_rows("reinit_dead_codes", batch, d)?;
    if n == 0 {
        return Err(Error::Contract("dead-code reinit needs a non-empty batch".into()));
    }
    let mut moved = 0;
    for i in 0..book.size() {
        if book.ema_count[i].as_f64() < threshold {
            let src = rng.random_range(0..n);
            let v = &batch[src * d..(src + 1) * d];
            book.entries.row_mut(i).copy_from_slice(v);
            book.ema_sum.row_mut(i).copy_from_slice(v);
            book.ema_count[i] = T::one();
            moved += 1;
        }
    }
    Ok(moved)
}

/// Code usage at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelUsage {
    /// Fraction of the `K` codes observed at least once.
    pub usage: f64,
    pub histogram: Vec<usize>,
}

pub fn usage_stats(sequences: &[CodeSequence], k: usize) -> Vec<LevelUsage> {
    let depth = sequences.iter().map(|s| s.depth()).max().unwrap_or(0);
    (0..depth)
        .map(|l| {
            let mut histogram = vec![0usize; k];
            for s in sequences {
                if let Some(level) = s.indices.get(l) {
                    for &i in level {
                        if i < k {
                            histogram[i] += 1;
                        }
                    }
                }
            }
            let used = histogram.iter().filter(|&&c| c > 0).count();
            LevelUsage {
                usage: used as f64 / k as f64,
                histogram,
            }
        })
        .collect()
}
