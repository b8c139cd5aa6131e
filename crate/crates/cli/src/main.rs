//! `ctarnn` command-line runner.
//!
//! Exit codes: 0 success, 1 failed check or run error, 2 usage or
//! configuration error, 3 unreadable or malformed input.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ctarnn", version, about = "Channel/temporal attention models over stacked encoder embeddings")]
pub struct Cli {
    /// Worker threads for data-parallel loops; 1 runs sequentially.
    #[arg(long, global = true, env = "CTARNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Log mel filterbank features of a 16 kHz mono WAV file, written as SEQF.
    Lmfb(LmfbArgs),
    /// Generate the synthetic planted-salience corpus.
    Synth(SynthArgs),
    /// Train one fold of the leave-one-speaker-out plan.
    Train(TrainArgs),
    /// Leave-one-speaker-out cross-validation.
    Cv(CvArgs),
    /// Evaluate saved checkpoints on another corpus.
    Eval(EvalArgs),
    /// Finite-difference gradient check of a toy model.
    Gradcheck(GradcheckArgs),
    /// Dump the attention weights of one utterance.
    AttnDump(AttnDumpArgs),
    /// Time CTA attention against flat global attention.
    BenchAttn(BenchArgs),
}

#[derive(Args, Debug)]
pub struct LmfbArgs {
    #[arg(long)]
    pub wav: PathBuf,
    /// Output SEQF file.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding the filterbank settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// TOML file overriding the corpus settings.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Flat TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// JSON Lines manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print per-epoch progress to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fold index in the plan.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directories, or directories holding `fold*` checkpoints.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// rnn, wf, ef, lf, cta or cta_nornn.
    #[arg(long, default_value = "cta")]
    pub model: String,
    /// N,m,d_e,d_h,heads,d_alpha,classes.
    #[arg(long, default_value = "3,5,4,8,2,4,3")]
    pub dims: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Maximum relative error accepted.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Scale the adjoint of one op kind (e.g. `matmul`) as a negative control.
    #[arg(long)]
    pub corrupt_adjoint: Option<String>,
    /// Factor applied by `--corrupt-adjoint`.
    #[arg(long, default_value_t = 1.5)]
    pub corrupt_factor: f64,
    /// Directory for report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Utterance id in `--manifest`, or a stacked-embedding SEQF file.
    #[arg(long)]
    pub utterance: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long = "N-list", alias = "n-list", value_delimiter = ',', default_value = "4,8,16")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub m: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    Lib(ctarnn::Error),
}

impl From<ctarnn::Error> for Failure {
    fn from(e: ctarnn::Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Lib(e) if e.is_io_or_format() => 3,
            Failure::Lib(ctarnn::Error::Validation(_)) => 3,
            Failure::Lib(ctarnn::Error::Config(_)) => 2,
            Failure::Lib(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
