//! Objective evaluation: PSNR, mel-cepstral distortion, pitch errors,
//! correlations and edit-distance rates.

#[cfg(test)]
mod tests;

use std::f64::consts::{LN_10, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{MelSpectrogram, PitchContour};

pub const PSNR_CAP_DB: f64 = 60.0;
/// Cepstral coefficients 1..=13 enter the distortion; c0 (level) is excluded.
pub const MCD_COEFFS: usize = 13;
/// Relative deviation beyond which a voiced frame counts as a gross pitch error.
pub const GPE_THRESHOLD: f64 = 0.2;

/// Metric bundle; each field is present only when the task computed it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub mcd: Option<f64>,
    pub vde: Option<f64>,
    pub gpe: Option<f64>,
    pub ffe: Option<f64>,
    pub pearson_f0: Option<f64>,
    pub pearson_energy: Option<f64>,
    pub wer: Option<f64>,
    pub cer: Option<f64>,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 9] = ["psnr", "mcd", "vde", "gpe", "ffe", "pearson_f0", "pearson_energy", "wer", "cer"];

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.psnr,
            self.mcd,
            self.vde,
            self.gpe,
            self.ffe,
            self.pearson_f0,
            self.pearson_energy,
            self.wer,
            self.cer,
        ]
    }

    fn from_values(v: [Option<f64>; 9]) -> Self {
        Self {
            psnr: v[0],
            mcd: v[1],
            vde: v[2],
            gpe: v[3],
            ffe: v[4],
            pearson_f0: v[5],
            pearson_energy: v[6],
            wer: v[7],
            cer: v[8],
        }
    }

    /// Field-wise mean over the reports that carry each field.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let mut out = [None; 9];
        for (i, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[i]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self::from_values(out)
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    /// Comma-separated values in [`FIELDS`](Self::FIELDS) order; absent fields are empty.
    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().flatten().all(|v| v.is_finite())
    }
}

fn check_shapes(op: &'static str, a: &MelSpectrogram, b: &MelSpectrogram) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(
            op,
            format!("{}×{} vs {}×{}", a.frames(), a.bands(), b.frames(), b.bands()),
        ));
    }
    Ok(())
}

/// `10·log10(R² / MSE)` with `R` the dynamic range of `reference`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr_mel(reference: &MelSpectrogram, hyp: &MelSpectrogram) -> Result<f64> {
    check_shapes("psnr", reference, hyp)?;
    psnr_values(reference.values(), hyp.values())
}

pub fn psnr_values(reference: &[f64], hyp: &[f64]) -> Result<f64> {
    if reference.len() != hyp.len() || reference.is_empty() {
        return Err(Error::dim("psnr", format!("{} vs {} values", reference.len(), hyp.len())));
    }
    let mse = reference.iter().zip(hyp).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / reference.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::Numeric("PSNR undefined: reference has zero dynamic range".into()));
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

/// Orthonormal DCT-II of each log-mel frame.
pub fn mel_cepstrum(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    let m = mel.bands();
    let basis: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            let s = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m).map(|n| s * (PI * k as f64 * (n as f64 + 0.5) / m as f64).cos()).collect()
        })
        .collect();
    (0..mel.frames())
        .map(|t| {
            let x = mel.frame(t);
            basis.iter().map(|b| b.iter().zip(x).map(|(u, v)| u * v).sum()).collect()
        })
        .collect()
}

/// `(10/ln10)·√2 · mean_t ||c_ref[1..=13] − c_hyp[1..=13]||₂` on given cepstra.
pub fn mcd_from_cepstra(reference: &[Vec<f64>], hyp: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != hyp.len() || reference.is_empty() {
        return Err(Error::dim("mcd", format!("{} vs {} frames", reference.len(), hyp.len())));
    }
    let mut total = 0.0;
    for (a, b) in reference.iter().zip(hyp) {
        if a.len() != b.len() {
            return Err(Error::dim("mcd", format!("{} vs {} coefficients", a.len(), b.len())));
        }
        let hi = a.len().min(MCD_COEFFS + 1);
        total += (1..hi).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
    }
    Ok(10.0 / LN_10 * SQRT_2 * total / reference.len() as f64)
}

pub fn mcd(reference: &MelSpectrogram, hyp: &MelSpectrogram) -> Result<f64> {
    check_shapes("mcd", reference, hyp)?;
    mcd_from_cepstra(&mel_cepstrum(reference), &mel_cepstrum(hyp))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Errors {
    pub vde: f64,
    pub gpe: f64,
    pub ffe: f64,
}

/// Voicing decision, gross pitch and F0 frame errors. GPE is 0 when no frame
/// is voiced in both contours.
pub fn f0_errors(reference: &PitchContour, hyp: &PitchContour) -> Result<F0Errors> {
    if reference.len() != hyp.len() || reference.is_empty() {
        return Err(Error::dim("f0_errors", format!("{} vs {} frames", reference.len(), hyp.len())));
    }
    let n = reference.len() as f64;
    let (mut flips, mut both, mut gross) = (0usize, 0usize, 0usize);
    for t in 0..reference.len() {
        let (vr, vh) = (reference.voiced[t], hyp.voiced[t]);
        if vr != vh {
            flips += 1;
        } else if vr {
            both += 1;
            if (hyp.f0[t] - reference.f0[t]).abs() > GPE_THRESHOLD * reference.f0[t] {
                gross += 1;
            }
        }
    }
    Ok(F0Errors {
        vde: flips as f64 / n,
        gpe: if both == 0 { 0.0 } else { gross as f64 / both as f64 },
        ffe: (flips + gross) as f64 / n,
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim("pearson", format!("{} vs {} samples (need >= 2)", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Analysis("correlation undefined: zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of F0 over frames voiced in both contours.
pub fn pearson_f0(reference: &PitchContour, hyp: &PitchContour) -> Result<f64> {
    if reference.len() != hyp.len() {
        return Err(Error::dim("pearson_f0", format!("{} vs {} frames", reference.len(), hyp.len())));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = (0..reference.len())
        .filter(|&t| reference.voiced[t] && hyp.voiced[t])
        .map(|t| (reference.f0[t], hyp.f0[t]))
        .unzip();
    pearson(&x, &y)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lower-cases, drops punctuation and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `(WER, CER)` of `hyp` against `reference` after [`normalize_text`]. CER
/// counts the single spaces between words as characters.
pub fn wer_cer(reference: &str, hyp: &str) -> Result<(f64, f64)> {
    let r = normalize_text(reference);
    let h = normalize_text(hyp);
    if r.is_empty() {
        return Err(Error::Contract("WER/CER reference is empty after normalization".into()));
    }
    let rw: Vec<&str> = r.split(' ').collect();
    let hw: Vec<&str> = if h.is_empty() { Vec::new() } else { h.split(' ').collect() };
    let rc: Vec<char> = r.chars().collect();
    let hc: Vec<char> = h.chars().collect();
    Ok((
        edit_distance(&rw, &hw) as f64 / rw.len() as f64,
        edit_distance(&rc, &hc) as f64 / rc.len() as f64,
    ))
}

/// Cosine similarity of two embedding vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("cosine", format!("{} vs {} dims", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Analysis("cosine similarity undefined for a zero vector".into()));
    }
    Ok((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}
