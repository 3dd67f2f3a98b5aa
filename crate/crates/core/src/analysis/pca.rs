use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{CodeSequence, Codebook};
use crate::scalar::Scalar;

/// Principal axes of a point set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Orthonormal rows ordered by decreasing variance; each is signed so its
    /// largest-magnitude entry is positive.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

impl PcaProjection {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(coords) {
            for (o, a) in out.iter_mut().zip(c) {
                *o += w * a;
            }
        }
        out
    }
}

/// PCA of the rows (population covariance).
pub fn pca(rows: &[Vec<f64>]) -> Result<PcaProjection> {
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if n < 2 || d == 0 {
        return Err(Error::Analysis(format!("PCA needs at least two points, got {n}")));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dim("pca", "rows of unequal length"));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let variances: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Analysis("PCA input has zero variance".into()));
    }
    let components = order
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let s = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| s * x).collect()
        })
        .collect();
    Ok(PcaProjection {
        mean,
        explained_ratio: variances.iter().map(|v| v / total).collect(),
        variances,
        components,
    })
}

/// PCA over the level-1 code vectors as they occur in `sequences`, so each
/// code is weighted by its usage. Needs at least three distinct codes and a
/// second non-degenerate axis.
pub fn pca_codes<T: Scalar>(sequences: &[CodeSequence], book: &Codebook<T>) -> Result<PcaProjection> {
    let mut rows = Vec::new();
    let mut distinct = vec![false; book.size()];
    for s in sequences {
        for &i in s.level(0) {
            if i >= book.size() {
                return Err(Error::Contract(format!("code {i} out of range for {} codes", book.size())));
            }
            distinct[i] = true;
            rows.push(book.entry(i).iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
        }
    }
    let used = distinct.iter().filter(|&&u| u).count();
    if used < 3 {
        return Err(Error::Analysis(format!("PCA on codes needs at least 3 distinct codes, found {used}")));
    }
    let p = pca(&rows)?;
    if p.explained_ratio.get(1).is_none_or(|&r| r < 1e-12) {
        return Err(Error::Analysis("code vectors are degenerate: rank < 2".into()));
    }
    Ok(p)
}

/// A code with its coordinates in PCA space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCandidate {
    pub code: usize,
    pub coords: Vec<f64>,
}

/// Codes inside the corridor `|off-axis| <= half_width` around the mean,
/// chosen nearest to `n_points` evenly spaced on-axis targets and ordered by
/// on-axis coordinate. `axis` is 1 or 2. Returns fewer than `n_points` codes
/// when the corridor holds fewer.
pub fn select_path_codes(candidates: &[PathCandidate], axis: usize, n_points: usize, half_width: f64) -> Result<Vec<usize>> {
    if !(axis == 1 || axis == 2) {
        return Err(Error::Contract(format!("path axis must be 1 or 2, got {axis}")));
    }
    if n_points < 2 {
        return Err(Error::Contract("a path needs at least two points".into()));
    }
    let (on, off) = if axis == 1 { (0, 1) } else { (1, 0) };
    let mut members: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|c| c.coords.len() >= 2 && c.coords[off].abs() <= half_width)
        .map(|c| (c.coords[on], c.code))
        .collect();
    if members.is_empty() {
        return Err(Error::Analysis(format!(
            "no codes within ±{half_width} of PC{axis}; widen the corridor"
        )));
    }
    members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    members.dedup_by_key(|m| m.1);
    if members.len() <= n_points {
        return Ok(members.into_iter().map(|m| m.1).collect());
    }
    let (lo, hi) = (members[0].0, members[members.len() - 1].0);
    let mut taken = vec![false; members.len()];
    for t in 0..n_points {
        let target = lo + (hi - lo) * t as f64 / (n_points - 1) as f64;
        let best = (0..members.len())
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| {
                (members[a].0 - target)
                    .abs()
                    .total_cmp(&(members[b].0 - target).abs())
                    .then(a.cmp(&b))
            })
            .expect("more members than points");
        taken[best] = true;
    }
    Ok(members
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| t)
        .map(|(m, _)| m.1)
        .collect())
}
