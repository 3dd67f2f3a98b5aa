use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 5.0,
            iterations: 1000,
            learning_rate: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    Mds,
    Tsne(TsneConfig),
}

fn check_distances(d: &DMatrix<f64>) -> Result<()> {
    if d.nrows() != d.ncols() || d.nrows() == 0 {
        return Err(Error::Contract(format!("distance matrix is {}×{}", d.nrows(), d.ncols())));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("distance matrix has non-finite entries".into()));
    }
    let scale = d.amax().max(1.0);
    for i in 0..d.nrows() {
        if d[(i, i)].abs() > 1e-12 * scale {
            return Err(Error::Contract(format!("distance matrix diagonal ({i},{i}) is {}", d[(i, i)])));
        }
        for j in i + 1..d.ncols() {
            if (d[(i, j)] - d[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::Contract(format!("distance matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

pub fn embed_2d(d: &DMatrix<f64>, method: &Embedding) -> Result<Vec<[f64; 2]>> {
    match method {
        Embedding::Mds => classical_mds(d),
        Embedding::Tsne(cfg) => tsne(d, cfg),
    }
}

/// Top two eigenpairs of the double-centred `−½D²`. Each axis is signed so
/// its largest-magnitude coordinate is positive.
pub fn classical_mds(d: &DMatrix<f64>) -> Result<Vec<[f64; 2]>> {
    check_distances(d)?;
    let n = d.nrows();
    let sq = d.map(|v| v * v);
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let all = sq.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + all));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    let mut out = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lam = eig.eigenvalues[k];
        if lam <= tol {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let pivot = (0..n).max_by(|&a, &c| v[a].abs().total_cmp(&v[c].abs()).then(c.cmp(&a))).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][axis] = sign * v[i] * lam.sqrt();
        }
    }
    Ok(out)
}

/// Row-conditional affinities whose entropy matches `ln(perplexity)`.
fn affinities(d: &DMatrix<f64>, perplexity: f64) -> DMatrix<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let dmin = (0..n).filter(|&j| j != i).map(|j| d[(i, j)].powi(2)).fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-beta * (d[(i, j)].powi(2) - dmin)).exp() };
                z += row[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                row[j] /= z;
                if row[j] > 0.0 {
                    h -= row[j] * row[j].ln();
                }
            }
            if (h - target).abs() < 1e-6 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        for j in 0..n {
            p[(i, j)] = row[j];
        }
    }
    let sym = (&p + p.transpose()) / (2.0 * n as f64);
    sym.map(|v| v.max(1e-12))
}

/// Exact t-SNE on precomputed distances, seeded. Perplexity is capped at
/// `(n − 1) / 3`.
pub fn tsne(d: &DMatrix<f64>, cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    check_distances(d)?;
    if !(cfg.perplexity > 0.0) || cfg.iterations == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Contract("t-SNE needs positive perplexity, iterations and learning rate".into()));
    }
    let n = d.nrows();
    if n < 3 {
        return classical_mds(d);
    }
    let perp = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0 + 1e-6);
    let p = affinities(d, perp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let exaggerate = 100.min(cfg.iterations / 4);
    for it in 0..cfg.iterations {
        let ex = if it < exaggerate { 4.0 } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut num = DMatrix::zeros(n, n);
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let q = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                num[(i, j)] = q;
                num[(j, i)] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (ex * p[(i, j)] - num[(i, j)] / z) * num[(i, j)];
                grad[0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let same = (grad[k] > 0.0) == (vel[i][k] > 0.0);
                gains[i][k] = if same { (gains[i][k] * 0.8f64).max(0.01) } else { gains[i][k] + 0.2 };
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * gains[i][k] * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let c = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in &mut y {
            v[0] -= c[0];
            v[1] -= c[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE diverged".into()));
    }
    Ok(y)
}
