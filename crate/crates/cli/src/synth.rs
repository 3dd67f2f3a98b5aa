use std::path::Path;

use prosody_core::corpus::Utterance;
use prosody_core::model::{CodecModel, ReconstructOptions};
use prosody_core::quantizer::CodeSequence;
use prosody_core::{Error, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context::Context;
use crate::{CliResult, OutputArgs, UtteranceSet};

/// Speaker index by name, falling back to a numeric index.
pub fn resolve_speaker<T: Scalar>(model: &CodecModel<T>, s: &str) -> CliResult<usize> {
    if let Some(i) = model.speakers.iter().position(|n| n == s) {
        return Ok(i);
    }
    match s.parse::<usize>() {
        Ok(i) if i < model.speakers.len() => Ok(i),
        _ => Err(Error::Contract(format!(
            "unknown speaker `{s}`; the model knows {}",
            model.speakers.join(", ")
        ))
        .into()),
    }
}

fn reconstruct_set<T: Scalar>(ctx: &Context, args: &OutputArgs, default_dir: &str, speaker: Option<&str>) -> CliResult<()> {
    let model = ctx.load_model::<T>(None)?;
    let speaker = speaker.map(|s| resolve_speaker(&model, s)).transpose()?;
    let utts = ctx.model_set(&model, args.set)?;
    let dir = ctx.out_dir(args.out.as_deref(), default_dir);
    let opts = ReconstructOptions {
        speaker,
        ..Default::default()
    };
    for u in &utts {
        let mel = model.reconstruct(u, &opts)?;
        ctx.write_mel(&dir, &u.id, &mel, args.wav)?;
    }
    println!("wrote {} mels to {}", utts.len(), dir.display());
    Ok(())
}

pub fn resynth<T: Scalar>(ctx: &Context, args: &OutputArgs) -> CliResult<()> {
    reconstruct_set::<T>(ctx, args, "resynth", None)
}

pub fn cross_resynth<T: Scalar>(ctx: &Context, target: &str, args: &OutputArgs) -> CliResult<()> {
    reconstruct_set::<T>(ctx, args, "cross_resynth", Some(target))
}

/// Permutes code positions (all levels together) with one seeded generator
/// consumed in utterance order.
pub fn shuffle_codes<T: Scalar>(ctx: &Context, seed: Option<u64>, args: &OutputArgs) -> CliResult<()> {
    let model = ctx.load_model::<T>(None)?;
    let rvq = model
        .rvq
        .as_ref()
        .ok_or_else(|| Error::Contract("shuffle-codes needs a quantized model".into()))?;
    let seed = seed.unwrap_or(ctx.cfg.analysis.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utts = ctx.model_set(&model, args.set)?;
    let dir = ctx.out_dir(args.out.as_deref(), "shuffle");
    let mut perms = serde_json::Map::new();
    for u in &utts {
        let codes = model.encode_utterance(u)?;
        let mut perm: Vec<usize> = (0..codes.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<usize>> = (0..codes.depth())
            .map(|l| perm.iter().map(|&p| codes.level(l)[p]).collect())
            .collect();
        let seq = CodeSequence::from_indices(shuffled, rvq)?;
        let mel = model.decode_codes(&seq, &u.phonemes, &u.durations, u.speaker_id)?;
        ctx.write_mel(&dir, &u.id, &mel, args.wav)?;
        perms.insert(u.id.clone(), perm.into());
    }
    ctx.write_json(
        &dir.join("permutations.json"),
        &serde_json::json!({ "seed": seed, "permutations": perms }),
    )?;
    println!("wrote {} shuffled mels to {}", utts.len(), dir.display());
    Ok(())
}

fn find(utts: &[Utterance], id: &str) -> CliResult<Utterance> {
    utts.iter()
        .find(|u| u.id == id)
        .cloned()
        .ok_or_else(|| Error::Contract(format!("no utterance `{id}` in the manifest")).into())
}

/// Source codes decoded with the target's phonemes and durations, voiced by
/// the source speaker.
pub fn transfer<T: Scalar>(ctx: &Context, source: &str, target: &str, wav: bool, out: Option<&Path>) -> CliResult<()> {
    let model = ctx.load_model::<T>(None)?;
    let mut utts = ctx.model_set(&model, UtteranceSet::All)?;
    if let Some(m) = &ctx.cfg.paths.analysis_manifest {
        utts.extend(ctx.load_for_model(&model, m)?);
    }
    let (src, tgt) = (find(&utts, source)?, find(&utts, target)?);
    if src.len() != tgt.len() {
        return Err(Error::Contract(format!(
            "phoneme count mismatch: source `{source}` has {} phonemes, target `{target}` has {}",
            src.len(),
            tgt.len()
        ))
        .into());
    }
    let codes = model.encode_utterance(&src)?;
    let mel = model.decode_codes(&codes, &tgt.phonemes, &tgt.durations, src.speaker_id)?;
    let dir = ctx.out_dir(out, "transfer");
    ctx.write_mel(&dir, &format!("{source}_to_{target}"), &mel, wav)?;
    println!("wrote {}", dir.join(format!("{source}_to_{target}.json")).display());
    Ok(())
}
