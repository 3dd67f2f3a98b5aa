//! Command-line workflow: data preparation, training, resynthesis, latent
//! analysis and metric reports. [`run`] is the whole program; the binary only
//! forwards its exit code.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prosody_core::Scalar;

pub mod analyze;
pub mod config;
pub mod context;
pub mod eval;
pub mod synth;
pub mod train;

pub use config::{load_config, Precision, RunConfig};
pub use context::Context;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration.
    Usage(String),
    Core(prosody_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<prosody_core::Error> for CliError {
    fn from(e: prosody_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "prosody", version, about = "Phoneme-level RVQ prosody codec workflow")]
pub struct Cli {
    /// Run configuration (JSON). Relative paths inside it resolve against its directory.
    #[arg(short, long, global = true, default_value = "prosody.json")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UtteranceSet {
    /// The held-out analysis subset.
    Extraction,
    /// Everything outside the extraction subset.
    Train,
    All,
    /// The analysis manifest, or the extraction subset without one.
    Analysis,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "extraction")]
    pub set: UtteranceSet,
    /// Also invert every mel to a WAV file.
    #[arg(long)]
    pub wav: bool,
    /// Output directory; defaults to a subdirectory of the report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeTarget {
    Usage,
    Entropy,
    Klmap,
    Pca,
    Probes,
    SpeakerRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricTask {
    /// PSNR and MCD of reconstructions.
    Reconstruction,
    /// PSNR with only the first k levels decoded, for every k.
    Levels,
    /// MCD, VDE, GPE and FFE from Griffin-Lim inversions.
    Table8,
    /// WER and CER of external transcripts.
    Intelligibility,
    /// Cosine similarity of external speaker embeddings.
    Similarity,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and cache features for every manifest record.
    Prepare,
    /// Write the seeded synthetic corpus and its manifest.
    SynthData,
    /// Train the codec, writing checkpoints, a step log and a summary.
    Train {
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Reconstruct utterances through the codec.
    Resynth {
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Reconstruct utterances voiced by another speaker.
    CrossResynth {
        /// Speaker name or index.
        #[arg(long)]
        target_speaker: String,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Decode with each utterance's code positions randomly permuted.
    ShuffleCodes {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Decode the source's codes with the target's phonemes and durations,
    /// voiced by the source speaker.
    Transfer {
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        wav: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent-space reports.
    Analyze {
        #[arg(value_enum)]
        target: AnalyzeTarget,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation reports.
    Metrics {
        #[arg(long, value_enum)]
        task: MetricTask,
        #[arg(long, value_enum, default_value = "extraction")]
        set: UtteranceSet,
        /// Model to evaluate instead of the configured checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON object mapping utterance id to hypothesis transcript.
        #[arg(long)]
        hyp_transcripts: Option<PathBuf>,
        /// JSON array of `{id, reference, hypothesis}` embedding pairs.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the unquantized variant and compare it with the trained codec.
    AblateContinuous {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(&cli.config)?;
    let ctx = Context::new(cfg);
    ctx.echo_config()?;
    match ctx.cfg.precision {
        Precision::F32 => dispatch::<f32>(&ctx, &cli.command),
        Precision::F64 => dispatch::<f64>(&ctx, &cli.command),
    }
}

fn dispatch<T: Scalar>(ctx: &Context, cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Prepare => ctx.prepare(),
        Command::SynthData => ctx.synth_data(),
        Command::Train { seed, resume, max_steps } => train::train::<T>(ctx, *seed, *resume, *max_steps),
        Command::Resynth { out } => synth::resynth::<T>(ctx, out),
        Command::CrossResynth { target_speaker, out } => synth::cross_resynth::<T>(ctx, target_speaker, out),
        Command::ShuffleCodes { seed, out } => synth::shuffle_codes::<T>(ctx, *seed, out),
        Command::Transfer {
            source,
            target,
            wav,
            out,
        } => synth::transfer::<T>(ctx, source, target, *wav, out.as_deref()),
        Command::Analyze { target, out } => analyze::analyze::<T>(ctx, *target, out.as_deref()),
        Command::Metrics {
            task,
            set,
            checkpoint,
            hyp_transcripts,
            embeddings,
            out,
        } => eval::metrics::<T>(
            ctx,
            &eval::MetricArgs {
                task: *task,
                set: *set,
                checkpoint: checkpoint.clone(),
                hyp_transcripts: hyp_transcripts.clone(),
                embeddings: embeddings.clone(),
                out: out.clone(),
            },
        ),
        Command::AblateContinuous { seed, max_steps } => train::ablate_continuous::<T>(ctx, *seed, *max_steps),
    }
}
