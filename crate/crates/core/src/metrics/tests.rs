use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::signal::FeatureConfig;

fn mel(values: Vec<f64>, frames: usize, bands: usize) -> MelSpectrogram {
    let cfg = FeatureConfig {
        n_mels: bands,
        ..FeatureConfig::default()
    };
    MelSpectrogram::new(values, frames, bands, &cfg).unwrap()
}

fn random_mel(frames: usize, bands: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mel((0..frames * bands).map(|_| rng.random_range(-8.0..2.0)).collect(), frames, bands)
}

#[test]
fn psnr_identity_offset_and_formula() {
    let a = random_mel(7, 5, 1);
    assert_eq!(psnr_mel(&a, &a).unwrap(), PSNR_CAP_DB);
    let hi = a.values().iter().copied().fold(f64::MIN, f64::max);
    let lo = a.values().iter().copied().fold(f64::MAX, f64::min);
    let r = hi - lo;
    let shifted = a.with_values(a.values().iter().map(|v| v + r).collect(), 7).unwrap();
    assert!(psnr_mel(&a, &shifted).unwrap().abs() < 1e-12);

    let b = random_mel(7, 5, 2);
    let mse: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 35.0;
    let expect = 10.0 * (r * r / mse).log10();
    assert!((psnr_mel(&a, &b).unwrap() - expect).abs() < 1e-12);
    assert!(psnr_mel(&a, &random_mel(6, 5, 3)).is_err());
}

#[test]
fn mcd_zero_and_unit_cepstral_offset() {
    let a = random_mel(4, 20, 4);
    assert_eq!(mcd(&a, &a).unwrap(), 0.0);
    let c = mel_cepstrum(&a);
    let mut shifted = c.clone();
    for frame in &mut shifted {
        frame[1] += 1.0;
    }
    let v = mcd_from_cepstra(&c, &shifted).unwrap();
    assert!((v - 6.142).abs() < 1e-3, "{v}");
    assert!((v - 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2).abs() < 1e-12);
    let mut c0 = c.clone();
    c0[0][0] += 5.0;
    c0[1][14] += 5.0;
    assert_eq!(mcd_from_cepstra(&c, &c0).unwrap(), 0.0);
}

#[test]
fn cepstrum_is_orthonormal_dct() {
    let a = random_mel(3, 12, 5);
    let c = mel_cepstrum(&a);
    for t in 0..3 {
        let e_x: f64 = a.frame(t).iter().map(|v| v * v).sum();
        let e_c: f64 = c[t].iter().map(|v| v * v).sum();
        assert!((e_x - e_c).abs() < 1e-9 * e_x);
        let mean = a.frame(t).iter().sum::<f64>() / 12.0;
        assert!((c[t][0] - mean * 12f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn mcd_frame_distance_is_translation_invariant_in_log_domain() {
    let a = random_mel(5, 16, 6);
    let b = a.with_values(a.values().iter().map(|v| v + 3.0).collect(), 5).unwrap();
    assert!(mcd(&a, &b).unwrap() < 1e-9);
}

proptest! {
    #[test]
    fn psnr_and_mcd_are_symmetric_in_error(seed in 0u64..500) {
        let a = random_mel(6, 14, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let eps: Vec<f64> = (0..a.values().len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let plus = a.with_values(a.values().iter().zip(&eps).map(|(v, e)| v + e).collect(), 6).unwrap();
        let minus = a.with_values(a.values().iter().zip(&eps).map(|(v, e)| v - e).collect(), 6).unwrap();
        let p1 = psnr_mel(&a, &plus).unwrap();
        let p2 = psnr_mel(&a, &minus).unwrap();
        prop_assert!((p1 - p2).abs() < 1e-9);
        let m1 = mcd(&a, &plus).unwrap();
        let m2 = mcd(&a, &minus).unwrap();
        prop_assert!((m1 - m2).abs() < 1e-9);
        prop_assert!((mcd(&plus, &a).unwrap() - m1).abs() < 1e-9);
    }
}

fn contour(f0: &[f64]) -> PitchContour {
    PitchContour::from_f0(f0.to_vec())
}

#[test]
fn f0_error_examples() {
    let r = contour(&[100.0, 110.0, 0.0, 120.0, 130.0, 0.0, 140.0, 150.0, 160.0, 170.0]);
    let e = f0_errors(&r, &r).unwrap();
    assert_eq!((e.vde, e.gpe, e.ffe), (0.0, 0.0, 0.0));

    let mut h = r.clone();
    h.voiced[2] = true;
    h.f0[2] = 115.0;
    h.voiced[4] = false;
    h.f0[4] = 0.0;
    let e = f0_errors(&r, &h).unwrap();
    assert!((e.vde - 0.2).abs() < 1e-15 && e.gpe == 0.0 && (e.ffe - 0.2).abs() < 1e-15);

    let all = contour(&[100.0; 10]);
    let mut off = all.clone();
    off.f0[3] = 125.0;
    let e = f0_errors(&all, &off).unwrap();
    assert_eq!(e.vde, 0.0);
    assert!((e.gpe - 0.1).abs() < 1e-15 && (e.ffe - 0.1).abs() < 1e-15);
    off.f0[3] = 119.0;
    assert_eq!(f0_errors(&all, &off).unwrap().gpe, 0.0);
    assert!(f0_errors(&all, &contour(&[100.0; 9])).is_err());
}

proptest! {
    #[test]
    fn ffe_composes_vde_and_gross_errors(
        f in prop::collection::vec(prop_oneof![Just(0.0), 80.0f64..300.0], 1..40),
        g in prop::collection::vec(prop_oneof![Just(0.0), 80.0f64..300.0], 40),
    ) {
        let r = contour(&f);
        let h = contour(&g[..f.len()]);
        let e = f0_errors(&r, &h).unwrap();
        let n = f.len() as f64;
        let both = (0..f.len()).filter(|&t| r.voiced[t] && h.voiced[t]).count() as f64;
        prop_assert!((e.ffe - (e.vde + e.gpe * both / n)).abs() < 1e-12);
        prop_assert!(e.ffe >= e.vde && e.ffe <= 1.0);
    }
}

#[test]
fn pearson_examples() {
    let x = [1.0, 2.0, 4.0, 7.0, 3.0];
    assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(pearson(&x, &[2.0; 5]), Err(Error::Analysis(_))));
    assert!(pearson(&[1.0], &[1.0]).is_err());
    let r = contour(&[100.0, 0.0, 120.0, 130.0]);
    let h = contour(&[200.0, 150.0, 240.0, 0.0]);
    assert!(matches!(pearson_f0(&r, &h), Ok(v) if (v - 1.0).abs() < 1e-12));
}

#[test]
fn wer_cer_examples() {
    assert_eq!(wer_cer("the cat sat", "the cat sat").unwrap(), (0.0, 0.0));
    let (w, _) = wer_cer("a b c", "a x c").unwrap();
    assert!((w - 1.0 / 3.0).abs() < 1e-15);
    let (_, c) = wer_cer("abc", "ab").unwrap();
    assert!((c - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(wer_cer("Hello, World!", "hello world").unwrap(), (0.0, 0.0));
    assert_eq!(wer_cer("one two", "").unwrap().0, 1.0);
    assert!(wer_cer(" ,. ", "x").is_err());
}

/// Textbook recursive definition with memoisation.
fn oracle(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let cost = usize::from(a[a.len() - 1] != b[b.len() - 1]);
    let v = (oracle(&a[..a.len() - 1], b, memo) + 1)
        .min(oracle(a, &b[..b.len() - 1], memo) + 1)
        .min(oracle(&a[..a.len() - 1], &b[..b.len() - 1], memo) + cost);
    memo.insert((a.len(), b.len()), v);
    v
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in b"abc" {
                let mut t: Vec<u8> = s.clone();
                t.push(*c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn check_pair(a: &[u8], b: &[u8]) {
    let want = oracle(a, b, &mut HashMap::new());
    assert_eq!(edit_distance(a, b), want, "{a:?} vs {b:?}");
    if !a.is_empty() {
        let ra: String = a.iter().map(|&c| c as char).collect();
        let rb: String = b.iter().map(|&c| c as char).collect();
        let (_, cer) = wer_cer(&ra, &rb).unwrap();
        assert_eq!(cer, want as f64 / a.len() as f64);
        let wa = ra.chars().map(String::from).collect::<Vec<_>>().join(" ");
        let wb = rb.chars().map(String::from).collect::<Vec<_>>().join(" ");
        let (wer, _) = wer_cer(&wa, &wb).unwrap();
        assert_eq!(wer, want as f64 / a.len() as f64);
    }
}

#[test]
fn edit_distance_matches_recursive_oracle() {
    // Every pair up to length 5, then every string up to length 8 against a
    // fixed random sample of partners.
    let short = all_strings(5);
    for a in &short {
        for b in &short {
            assert_eq!(edit_distance(a, b), oracle(a, b, &mut HashMap::new()));
        }
    }
    let long = all_strings(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let partners: Vec<&Vec<u8>> = (0..12).map(|_| &long[rng.random_range(0..long.len())]).collect();
    for a in &long {
        for b in &partners {
            check_pair(a, b);
        }
    }
}

#[test]
fn cosine_similarity_examples() {
    assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-15);
    assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
}

#[test]
fn report_mean_and_csv() {
    let a = MetricReport {
        psnr: Some(10.0),
        mcd: Some(2.0),
        ..Default::default()
    };
    let b = MetricReport {
        psnr: Some(20.0),
        wer: Some(0.5),
        ..Default::default()
    };
    let m = MetricReport::mean(&[a, b]);
    assert_eq!(m.psnr, Some(15.0));
    assert_eq!(m.mcd, Some(2.0));
    assert_eq!(m.wer, Some(0.5));
    assert_eq!(m.vde, None);
    assert_eq!(m.csv_row(), "15.000000,2.000000,,,,,,0.500000,");
    assert_eq!(MetricReport::csv_header().split(',').count(), 9);
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), m);
}
