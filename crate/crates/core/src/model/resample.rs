use super::config::SigmaPolicy;
use crate::error::{Error, Result};

/// Frame × phoneme soft alignment built from durations.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleWeights {
    /// Row-major `frames × phones`; each row sums to one.
    pub w: Vec<f64>,
    pub centers: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub frames: usize,
    pub phones: usize,
}

/// Kernel centres `c_i = Σ_{j≤i} d_j − d_i/2`.
pub fn centers(durations: &[usize]) -> Vec<f64> {
    let mut acc = 0.0;
    durations
        .iter()
        .map(|&d| {
            acc += d as f64;
            acc - d as f64 / 2.0
        })
        .collect()
}

/// `σ_i` under `policy`; `learned` overrides the learnable scale.
pub fn sigmas(durations: &[usize], policy: &SigmaPolicy, learned: Option<f64>) -> Vec<f64> {
    durations
        .iter()
        .map(|&d| {
            let d = d.max(1) as f64;
            match policy {
                SigmaPolicy::DurationScaled { divisor } => d / divisor,
                SigmaPolicy::Fixed { sigma } => *sigma,
                SigmaPolicy::Learnable { init } => learned.unwrap_or(*init) * d,
            }
        })
        .collect()
}

/// Unnormalized log-weights `−(t + 0.5 − c_i)² / (2σ_i²)`.
pub(crate) fn log_kernel(frames: usize, c: &[f64], s: &[f64]) -> Vec<f64> {
    let n = c.len();
    let mut out = Vec::with_capacity(frames * n);
    for t in 0..frames {
        let pos = t as f64 + 0.5;
        for i in 0..n {
            out.push(-(pos - c[i]).powi(2) / (2.0 * s[i] * s[i]));
        }
    }
    out
}

/// `W[t,i] ∝ exp(−(t + 0.5 − c_i)² / (2σ_i²))`, normalized over `i`.
pub fn gaussian_weights(
    durations: &[usize],
    frames: usize,
    policy: &SigmaPolicy,
    learned: Option<f64>,
) -> Result<ResampleWeights> {
    if durations.is_empty() {
        return Err(Error::Contract("gaussian weights need at least one phoneme".into()));
    }
    if durations.contains(&0) {
        return Err(Error::Contract("gaussian weights: zero duration".into()));
    }
    let sum: usize = durations.iter().sum();
    if sum != frames {
        return Err(Error::DurationMismatch {
            sum,
            frames,
            tolerance: 0,
        });
    }
    let c = centers(durations);
    let s = sigmas(durations, policy, learned);
    let n = durations.len();
    let mut w = log_kernel(frames, &c, &s);
    for row in w.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(ResampleWeights {
        w,
        centers: c,
        sigmas: s,
        frames,
        phones: n,
    })
}

/// Phoneme-level average of frame features `x` (`frames × f`) using the
/// column-normalized transpose of `W`.
pub fn downsample(x: &[f64], f: usize, rw: &ResampleWeights) -> Result<Vec<f64>> {
    if x.len() != rw.frames * f {
        return Err(Error::dim(
            "downsample",
            format!("{} values for {} frames × {f}", x.len(), rw.frames),
        ));
    }
    let n = rw.phones;
    let mut out = vec![0.0; n * f];
    for i in 0..n {
        let col: f64 = (0..rw.frames).map(|t| rw.w[t * n + i]).sum();
        if col == 0.0 {
            continue;
        }
        for t in 0..rw.frames {
            let a = rw.w[t * n + i] / col;
            for k in 0..f {
                out[i * f + k] += a * x[t * f + k];
            }
        }
    }
    Ok(out)
}

/// Frame-level mixture `out_t = Σ_i W[t,i] h_i` of phoneme features `h` (`phones × f`).
pub fn upsample(h: &[f64], f: usize, rw: &ResampleWeights) -> Result<Vec<f64>> {
    if h.len() != rw.phones * f {
        return Err(Error::dim(
            "upsample",
            format!("{} values for {} phones × {f}", h.len(), rw.phones),
        ));
    }
    let n = rw.phones;
    let mut out = vec![0.0; rw.frames * f];
    for t in 0..rw.frames {
        for i in 0..n {
            let a = rw.w[t * n + i];
            for k in 0..f {
                out[t * f + k] += a * h[i * f + k];
            }
        }
    }
    Ok(out)
}
