//! Code statistics over a frozen checkpoint: conditional code distributions,
//! their entropies and distances, 2-D embeddings, PCA of the level-1 codes
//! and probe synthesis along principal axes.

mod embed;
mod pca;
mod probe;
mod report;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt::Display;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use embed::{classical_mds, embed_2d, tsne, Embedding, TsneConfig};
pub use pca::{pca, pca_codes, select_path_codes, PathCandidate, PcaProjection};
pub use probe::{
    measure_probe, most_frequent_code, probe_pitch, speaker_relative_report, spearman, synth_probe, Probe, ProbeConfig,
    ProbeMeasurement,
};
pub use report::{pmf_csv, probes_csv, scatter_svg};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::quantizer::CodeSequence;

/// Additive smoothing applied to every code histogram.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Distribution of codes under one condition (speaker, phoneme or code).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPmf {
    pub label: String,
    pub probs: Vec<f64>,
    /// Observations behind the estimate.
    pub count: usize,
}

impl ConditionalPmf {
    pub fn entropy(&self) -> f64 {
        entropy_nats(&self.probs)
    }
}

/// `(count_j + α) / (N + α·K)` for each condition, ordered by condition.
pub fn conditional_pmfs<C: Ord + Display + Clone>(pairs: &[(C, usize)], k: usize, alpha: f64) -> Result<Vec<ConditionalPmf>> {
    if k < 2 {
        return Err(Error::Contract(format!("conditional pmfs need K >= 2, got {k}")));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("smoothing must be non-negative, got {alpha}")));
    }
    if pairs.is_empty() {
        return Err(Error::Analysis("no (condition, code) observations".into()));
    }
    let mut counts: BTreeMap<C, Vec<usize>> = BTreeMap::new();
    for (c, code) in pairs {
        if *code >= k {
            return Err(Error::Contract(format!("code {code} out of range for K = {k}")));
        }
        counts.entry(c.clone()).or_insert_with(|| vec![0; k])[*code] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(c, h)| {
            let n: usize = h.iter().sum();
            let z = n as f64 + alpha * k as f64;
            ConditionalPmf {
                label: c.to_string(),
                probs: h.iter().map(|&x| (x as f64 + alpha) / z).collect(),
                count: n,
            }
        })
        .collect())
}

/// `−Σ p ln p` with `0·ln 0 = 0`.
pub fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

/// Mean entropy of `P(code₂ | code₁)` over the observed level-1 codes.
pub fn level_dependency(sequences: &[CodeSequence], k: usize, alpha: f64) -> Result<f64> {
    let mut pairs = Vec::new();
    for s in sequences {
        if s.depth() < 2 {
            return Err(Error::Analysis("level dependency needs at least two levels".into()));
        }
        pairs.extend(s.level(0).iter().copied().zip(s.level(1).iter().copied()));
    }
    Ok(mean(conditional_pmfs(&pairs, k, alpha)?.iter().map(ConditionalPmf::entropy)))
}

/// `KL(p‖q)`; a zero in `q` where `p` has mass is a numeric error.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl", format!("{} vs {} codes", p.len(), q.len())));
    }
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::Numeric("KL divergence is infinite: zero probability; enable smoothing".into()));
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

/// `D[i,j] = KL(p_i‖p_j) + KL(p_j‖p_i)`.
pub fn symmetric_kl_matrix(pmfs: &[ConditionalPmf]) -> Result<DMatrix<f64>> {
    let n = pmfs.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = kl_divergence(&pmfs[i].probs, &pmfs[j].probs)? + kl_divergence(&pmfs[j].probs, &pmfs[i].probs)?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// `(speaker, code)` pairs at `level` over utterances and their codes.
pub fn speaker_code_pairs(utts: &[Utterance], codes: &[CodeSequence], level: usize) -> Result<Vec<(usize, usize)>> {
    zip_pairs(utts, codes, level, |u, _| u.speaker_id)
}

/// `(phoneme, code)` pairs at `level`.
pub fn phoneme_code_pairs(utts: &[Utterance], codes: &[CodeSequence], level: usize) -> Result<Vec<(usize, usize)>> {
    zip_pairs(utts, codes, level, |u, i| u.phonemes[i])
}

fn zip_pairs(
    utts: &[Utterance],
    codes: &[CodeSequence],
    level: usize,
    cond: impl Fn(&Utterance, usize) -> usize,
) -> Result<Vec<(usize, usize)>> {
    if utts.len() != codes.len() {
        return Err(Error::dim("code pairs", format!("{} utterances, {} code sequences", utts.len(), codes.len())));
    }
    let mut out = Vec::new();
    for (u, c) in utts.iter().zip(codes) {
        if c.len() != u.len() || level >= c.depth() {
            return Err(Error::dim(
                "code pairs",
                format!("utterance {}: {} phonemes, codes {}×{}", u.id, u.len(), c.depth(), c.len()),
            ));
        }
        out.extend(c.level(level).iter().enumerate().map(|(i, &k)| (cond(u, i), k)));
    }
    Ok(out)
}

/// Per level mean entropy of `P(code | speaker)`.
pub fn speaker_entropies(utts: &[Utterance], codes: &[CodeSequence], k: usize, alpha: f64) -> Result<Vec<f64>> {
    let depth = codes.first().map(|c| c.depth()).unwrap_or(0);
    (0..depth)
        .map(|l| {
            let pmfs = conditional_pmfs(&speaker_code_pairs(utts, codes, l)?, k, alpha)?;
            Ok(mean(pmfs.iter().map(ConditionalPmf::entropy)))
        })
        .collect()
}
