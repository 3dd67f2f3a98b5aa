use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::Tensor;
use crate::corpus::PhonemeVocab;
use crate::model::{CodecModel, ModelConfig};
use crate::quantizer::Codebook;
use crate::signal::{AudioBuffer, FeatureConfig, MelSpectrogram};

#[test]
fn pmf_examples() {
    let pairs: Vec<(usize, usize)> = (0..4).flat_map(|c| [(0, c), (0, c)]).collect();
    let p = conditional_pmfs(&pairs, 4, 0.5).unwrap();
    assert_eq!(p.len(), 1);
    assert!(p[0].probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let p = conditional_pmfs(&[(7, 2)], 3, 0.0).unwrap();
    assert_eq!(p[0].probs, vec![0.0, 0.0, 1.0]);
    assert_eq!(p[0].label, "7");

    let p = conditional_pmfs(&[(0, 0), (0, 0), (0, 0), (0, 1)], 2, 0.5).unwrap();
    assert!((p[0].probs[0] - 0.7).abs() < 1e-15 && (p[0].probs[1] - 0.3).abs() < 1e-15);

    assert!(matches!(conditional_pmfs::<usize>(&[], 4, 0.5), Err(Error::Analysis(_))));
    assert!(conditional_pmfs(&[(0, 0)], 1, 0.5).is_err());
    assert!(conditional_pmfs(&[(0, 5)], 4, 0.5).is_err());
}

#[test]
fn entropy_examples() {
    let u = vec![1.0 / 256.0; 256];
    assert!((entropy_nats(&u) - 5.545).abs() < 1e-3);
    assert!((entropy_nats(&u) - 256f64.ln()).abs() < 1e-12);
    assert_eq!(entropy_nats(&[0.0, 1.0, 0.0]), 0.0);
    assert!((entropy_nats(&[0.5, 0.5]) - LN_2).abs() < 1e-15);
}

proptest! {
    #[test]
    fn pmfs_normalized_and_entropy_bounded(
        pairs in prop::collection::vec((0usize..4, 0usize..6), 1..60),
        alpha in prop_oneof![Just(0.0), 0.01f64..2.0],
    ) {
        for p in conditional_pmfs(&pairs, 6, alpha).unwrap() {
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.probs.iter().all(|&v| v >= 0.0));
            let h = p.entropy();
            prop_assert!(h >= 0.0 && h <= 6f64.ln() + 1e-12);
        }
    }

    #[test]
    fn symmetric_kl_is_a_symmetric_nonnegative_matrix(
        pairs in prop::collection::vec((0usize..5, 0usize..4), 1..80),
    ) {
        let pmfs = conditional_pmfs(&pairs, 4, DEFAULT_ALPHA).unwrap();
        let d = symmetric_kl_matrix(&pmfs).unwrap();
        for i in 0..d.nrows() {
            prop_assert_eq!(d[(i, i)], 0.0);
            for j in 0..d.ncols() {
                prop_assert_eq!(d[(i, j)], d[(j, i)]);
                prop_assert!(d[(i, j)] >= 0.0);
            }
        }
    }
}

fn seq(l1: Vec<usize>, l2: Vec<usize>) -> CodeSequence {
    let n = l1.len();
    CodeSequence {
        indices: vec![l1, l2],
        vectors: vec![0.0; n],
        dim: 1,
    }
}

#[test]
fn level_dependency_extremes() {
    let det = seq((0..8).collect(), (0..8).collect());
    assert_eq!(level_dependency(&[det], 8, 0.0).unwrap(), 0.0);
    // Every level-1 code sees every level-2 code exactly once.
    let l1: Vec<usize> = (0..8).flat_map(|a| std::iter::repeat_n(a, 8)).collect();
    let l2: Vec<usize> = (0..8).flat_map(|_| 0..8).collect();
    let v = level_dependency(&[seq(l1, l2)], 8, 0.0).unwrap();
    assert!((v - 8f64.ln()).abs() < 1e-12);
}

fn pmf(p: Vec<f64>) -> ConditionalPmf {
    ConditionalPmf {
        label: String::new(),
        probs: p,
        count: 1,
    }
}

#[test]
fn symmetric_kl_examples() {
    let a = pmf(vec![0.9, 0.1]);
    let b = pmf(vec![0.1, 0.9]);
    let one_way = kl_divergence(&a.probs, &b.probs).unwrap();
    assert!((one_way - 0.8 * 9f64.ln()).abs() < 1e-12);
    assert!((one_way - 1.758).abs() < 1e-3);
    let d = symmetric_kl_matrix(&[a.clone(), b, a]).unwrap();
    assert!((d[(0, 1)] - 3.516).abs() < 1e-3);
    assert_eq!(d[(0, 2)], 0.0);
    let err = symmetric_kl_matrix(&[pmf(vec![1.0, 0.0]), pmf(vec![0.5, 0.5])]).unwrap_err();
    assert!(err.is_numeric());
}

fn distances(points: &[[f64; 2]]) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt()
    })
}

#[test]
fn mds_recovers_a_square() {
    let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let d = distances(&square);
    let e = classical_mds(&d).unwrap();
    let back = distances(&e);
    assert!((&back - &d).amax() < 1e-6);

    let zero = classical_mds(&DMatrix::zeros(3, 3)).unwrap();
    assert!(zero.iter().flatten().all(|&v| v == 0.0));

    let mut asym = d.clone();
    asym[(0, 1)] += 0.5;
    assert!(matches!(classical_mds(&asym), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn mds_recovers_planar_configurations(seed in 0u64..200, n in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let d = distances(&pts);
        let e = classical_mds(&d).unwrap();
        prop_assert!((&distances(&e) - &d).amax() < 1e-6);
    }
}

#[test]
fn duplicated_point_coincides() {
    let pts = [[0.0, 0.0], [2.0, 0.0], [0.5, 1.5], [2.0, 0.0], [-1.0, 0.7]];
    let d = distances(&pts);
    let e = classical_mds(&d).unwrap();
    assert!((e[1][0] - e[3][0]).abs() < 1e-9 && (e[1][1] - e[3][1]).abs() < 1e-9);
    // t-SNE starts the copies apart, so they only end up mutual nearest neighbours.
    let t = distances(&tsne(&d, &TsneConfig::default()).unwrap());
    assert!((0..5).filter(|&j| j != 1 && j != 3).all(|j| t[(1, 3)] < t[(1, j)]));
}

#[test]
fn tsne_is_seeded_and_separates_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pts = Vec::new();
    for c in [[0.0, 0.0], [10.0, 10.0]] {
        for _ in 0..8 {
            pts.push([c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]);
        }
    }
    let d = distances(&pts);
    let cfg = TsneConfig::default();
    let a = tsne(&d, &cfg).unwrap();
    assert_eq!(a, tsne(&d, &cfg).unwrap());
    assert_eq!(embed_2d(&d, &Embedding::Tsne(cfg)).unwrap(), a);
    let e = distances(&a);
    let (mut within, mut across) = (0.0f64, f64::INFINITY);
    for i in 0..16 {
        for j in 0..16 {
            if i / 8 == j / 8 {
                within = within.max(e[(i, j)]);
            } else {
                across = across.min(e[(i, j)]);
            }
        }
    }
    assert!(within < across, "within {within}, across {across}");
}

#[test]
fn pca_on_a_line_and_on_isotropic_noise() {
    let line: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64, 2.0 * t as f64 + 1.0, -(t as f64)]).collect();
    let p = pca(&line).unwrap();
    assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise: Vec<Vec<f64>> = (0..10_000)
        .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let p = pca(&noise).unwrap();
    for r in &p.explained_ratio {
        assert!((r - 1.0 / 3.0).abs() < 0.03, "{:?}", p.explained_ratio);
    }
    assert!(p.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
}

proptest! {
    #[test]
    fn pca_components_orthonormal_and_lossless(seed in 0u64..300, n in 4usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let p = pca(&rows).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(x, y)| x * y).sum();
                prop_assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-9);
            }
        }
        prop_assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        for r in &rows {
            let back = p.reconstruct(&p.project(r));
            for (x, y) in back.iter().zip(r) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

fn book(entries: &[[f64; 3]]) -> Codebook<f64> {
    let flat: Vec<f64> = entries.iter().flatten().copied().collect();
    Codebook::from_entries(Tensor::new(vec![entries.len(), 3], flat).unwrap(), 0.99, 1e-5)
}

#[test]
fn pca_codes_weights_by_usage_and_rejects_degenerate_sets() {
    let b = book(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]]);
    let s = seq(vec![0, 1, 1, 1, 2, 3], vec![0; 6]);
    let p = pca_codes(&[s], &b).unwrap();
    let manual: Vec<Vec<f64>> = [0, 1, 1, 1, 2, 3].iter().map(|&i| b.entry(i).to_vec()).collect();
    assert_eq!(p, pca(&manual).unwrap());
    assert!(matches!(pca_codes(&[seq(vec![0, 1], vec![0, 0])], &b), Err(Error::Analysis(_))));
    let collinear = seq(vec![0, 1, 3], vec![0; 3]);
    assert!(pca_codes(&[collinear], &b).unwrap_err().to_string().contains("rank"));
}

fn grid() -> Vec<PathCandidate> {
    let mut out = Vec::new();
    for i in 0..7 {
        for j in 0..5 {
            out.push(PathCandidate {
                code: i * 5 + j,
                coords: vec![i as f64 - 3.0, j as f64 - 2.0],
            });
        }
    }
    out
}

#[test]
fn path_on_a_grid() {
    let g = grid();
    let path = select_path_codes(&g, 1, 4, 0.1).unwrap();
    let coords: Vec<&Vec<f64>> = path.iter().map(|&c| &g[c].coords).collect();
    assert!(coords.iter().all(|c| c[1] == 0.0));
    let xs: Vec<f64> = coords.iter().map(|c| c[0]).collect();
    assert_eq!(xs, [-3.0, -1.0, 1.0, 3.0]);

    let ends = select_path_codes(&g, 1, 2, 0.1).unwrap();
    assert_eq!(ends.iter().map(|&c| g[c].coords[0]).collect::<Vec<_>>(), [-3.0, 3.0]);

    let vertical = select_path_codes(&g, 2, 5, 0.5).unwrap();
    assert_eq!(vertical.iter().map(|&c| g[c].coords[1]).collect::<Vec<_>>(), [-2.0, -1.0, 0.0, 1.0, 2.0]);

    let shifted: Vec<PathCandidate> = g
        .iter()
        .map(|c| PathCandidate {
            code: c.code,
            coords: vec![c.coords[0], c.coords[1] + 0.5],
        })
        .collect();
    let err = select_path_codes(&shifted, 1, 3, 0.1).unwrap_err();
    assert!(err.to_string().contains("widen"));
}

proptest! {
    #[test]
    fn path_is_strictly_ordered_and_distinct(seed in 0u64..200, n in 2usize..8, hw in 0.2f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<PathCandidate> = (0..40)
            .map(|i| PathCandidate { code: i, coords: vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)] })
            .collect();
        if let Ok(path) = select_path_codes(&cands, 1, n, hw) {
            prop_assert!(path.len() <= n && !path.is_empty());
            for w in path.windows(2) {
                prop_assert!(cands[w[0]].coords[0] < cands[w[1]].coords[0]);
            }
            prop_assert!(path.iter().all(|&c| cands[c].coords[1].abs() <= hw));
        }
    }
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // Ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4].
    let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
}

fn unit_projection() -> PcaProjection {
    PcaProjection {
        mean: vec![0.0; 3],
        components: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        variances: vec![1.0; 3],
        explained_ratio: vec![1.0 / 3.0; 3],
    }
}

#[test]
fn probe_measurement_on_harmonic_and_silent_audio() {
    let sr = 22_050u32;
    let samples: Vec<f64> = (0..sr as usize / 2)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (1..=5).map(|h| 0.1 / h as f64 * (2.0 * PI * 150.0 * h as f64 * t).sin()).sum()
        })
        .collect();
    let audio = AudioBuffer::new(samples, sr).unwrap();
    let cfg = ProbeConfig::default();
    let m = measure_probe(&audio, 4, &[0.5, -1.0, 2.0], &unit_projection(), 1, &cfg).unwrap();
    let f0 = m.f0.unwrap();
    assert!((f0 - 150.0).abs() < 0.03 * 150.0, "{f0}");
    assert_eq!((m.pc1, m.pc2), (0.5, -1.0));
    assert!(m.rms > 0.0);

    let silent = AudioBuffer::new(vec![0.0; 8000], sr).unwrap();
    let m = measure_probe(&silent, 4, &[0.0; 3], &unit_projection(), 0, &cfg).unwrap();
    assert!(!m.voiced() && m.f0.is_none());
}

#[test]
fn low_pitch_survives_inversion_under_probe_settings() {
    let sr = 22_050u32;
    let f0 = 120.0;
    let samples: Vec<f64> = (0..sr as usize / 2)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (1..=40).map(|h| 0.3 / (h * h) as f64 * (2.0 * PI * f0 * h as f64 * t).sin()).sum()
        })
        .collect();
    let audio = AudioBuffer::new(samples, sr).unwrap();
    let fc = FeatureConfig::default();
    let inverted = crate::signal::invert_mel(&crate::signal::mel_spectrogram(&audio, &fc).unwrap(), 32).unwrap();
    let c = probe_pitch(&inverted, &ProbeConfig::default()).unwrap();
    assert!(c.voiced_count() * 10 >= c.len() * 6, "{} of {}", c.voiced_count(), c.len());
    let mean = c.mean_voiced_f0().unwrap();
    assert!((mean - f0).abs() < 0.05 * f0, "{mean}");
}

fn tiny_model() -> CodecModel<f64> {
    let cfg = ModelConfig {
        model_dim: 16,
        layers: 1,
        heads: 2,
        conv_kernel: 3,
        levels: 2,
        codes: 8,
        code_dim: 3,
        mel_bands: 80,
        ..ModelConfig::default()
    };
    let mut vocab = PhonemeVocab::new();
    for i in 1..=4 {
        vocab.insert(&format!("p{i}"));
    }
    let mut m = CodecModel::new(cfg, FeatureConfig::default(), vocab, vec!["a".into(), "b".into()], 5).unwrap();
    m.mel_mean = vec![-4.0; 80];
    m
}

fn reference(speaker: usize) -> Utterance {
    let durations = vec![3, 4, 2];
    let frames = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vals = (0..frames * 80).map(|_| rng.random_range(-6.0..0.0)).collect();
    Utterance {
        id: "ref".into(),
        speaker_id: speaker,
        phonemes: vec![1, 2, 3],
        durations,
        mel: MelSpectrogram::new(vals, frames, 80, &FeatureConfig::default()).unwrap(),
        transcript: None,
    }
}

#[test]
fn probes_are_deterministic_and_sized_by_durations() {
    let m = tiny_model();
    let r = reference(0);
    let cfg = ProbeConfig {
        griffin_lim_iters: 4,
        ..ProbeConfig::default()
    };
    let a = synth_probe(&m, &r, &[3, 5], 1, &cfg).unwrap();
    assert_eq!(a.mel.frames(), 9);
    let b = synth_probe(&m, &r, &[3, 5], 1, &cfg).unwrap();
    assert_eq!(a.audio.samples(), b.audio.samples());

    let report = speaker_relative_report(&m, &[1, 6, 2], &[0], &r, &[1, 1], &unit_projection(), &cfg).unwrap();
    assert_eq!(report[0], report[1]);
    assert_eq!(report[0].iter().map(|p| p.code).collect::<Vec<_>>(), [1, 6, 2]);
    assert!(speaker_relative_report(&m, &[1], &[0], &r, &[1], &unit_projection(), &cfg).is_err());
}

#[test]
fn speaker_label_does_not_change_code_statistics() {
    let m = tiny_model();
    let a: Vec<Utterance> = (0..3).map(|_| reference(0)).collect();
    let b: Vec<Utterance> = (0..3).map(|_| reference(1)).collect();
    let ca: Vec<CodeSequence> = a.iter().map(|u| m.encode_utterance(u).unwrap()).collect();
    let cb: Vec<CodeSequence> = b.iter().map(|u| m.encode_utterance(u).unwrap()).collect();
    assert_eq!(ca, cb);
    let pa = conditional_pmfs(&phoneme_code_pairs(&a, &ca, 0).unwrap(), 8, DEFAULT_ALPHA).unwrap();
    let pb = conditional_pmfs(&phoneme_code_pairs(&b, &cb, 0).unwrap(), 8, DEFAULT_ALPHA).unwrap();
    assert_eq!(pa, pb);
    let sa = conditional_pmfs(&speaker_code_pairs(&a, &ca, 0).unwrap(), 8, DEFAULT_ALPHA).unwrap();
    let sb = conditional_pmfs(&speaker_code_pairs(&b, &cb, 0).unwrap(), 8, DEFAULT_ALPHA).unwrap();
    assert_eq!(sa[0].probs, sb[0].probs);
    assert_eq!(most_frequent_code(&ca, 1, 8), most_frequent_code(&cb, 1, 8));
    assert_eq!(speaker_entropies(&a, &ca, 8, DEFAULT_ALPHA).unwrap().len(), 2);
}

#[test]
fn reports_render() {
    let pmfs = conditional_pmfs(&[(0, 1), (1, 0), (1, 0)], 2, 0.5).unwrap();
    let csv = pmf_csv(&pmfs);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("1,2,"));
    let svg = scatter_svg(&[[0.0, 1.0], [2.0, -1.0]], &["a<b".into(), "c".into()], Some(&[0, 1]), "t");
    assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.matches("<circle").count() == 2);
    let rows = [ProbeMeasurement {
        code: 3,
        speaker: 1,
        f0: None,
        rms: 0.1,
        pc1: 0.0,
        pc2: 0.0,
    }];
    assert_eq!(probes_csv(&rows).lines().nth(1).unwrap(), "1,3,,0.100000,0.000000,0.000000,false");
}
