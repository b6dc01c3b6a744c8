//! `ep`: exemplar-partitioning dictionaries from the command line.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ep_core::Basis;

#[derive(Parser, Debug)]
#[command(name = "ep", version, about = "Build and analyse exemplar-partitioning dictionaries")]
pub struct Cli {
    /// Worker threads (defaults to every core).
    #[arg(long, global = true, env = "EP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate the centre and distance threshold from a stream prefix.
    Calibrate(CalibrateArgs),
    /// Stream activations into a dictionary until saturation.
    Build(BuildArgs),
    /// Nearest region of every vector in a stream.
    Assign(AssignArgs),
    /// Distance-to-cover statistics of a probe stream.
    Ood(OodArgs),
    /// One-hot codes of every vector in a stream.
    Encode(EncodeArgs),
    /// Hungarian matching of two dictionaries.
    Match(MatchArgs),
    /// Nearest region in the other dictionary, both ways.
    CrossTab(CrossTabArgs),
    /// Cross-seed stability of several dictionaries built on shuffles.
    Stability(StabilityArgs),
    /// Regions closer to both of two anchors than they are to each other.
    Neighbourhood(NeighbourhoodArgs),
    /// Top-activating token ids per region.
    Tokens(TokensArgs),
    /// Best-match F1 between two sets of token profiles.
    Correspond(CorrespondArgs),
    /// Mean behavioural score per region.
    Label(LabelArgs),
    /// Select the region that best separates a concept and score it.
    Concept(ConceptArgs),
    /// Compare saturation curves of several builds.
    Saturation(SaturationArgs),
    /// Seeded permutation of a stream and its provenance sidecar.
    Shuffle(ShuffleArgs),
    /// Print a dictionary manifest or a stream header.
    Info(InfoArgs),
    /// Write a seeded von Mises-Fisher mixture stream.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CalibrationFlags {
    /// Percentile of pairwise calibration distances, in (0, 100).
    #[arg(long, value_parser = io::parse_percentile)]
    p: f64,
    /// Leading stream vectors used for calibration.
    #[arg(long, default_value_t = ep_core::calibration::DEFAULT_BUDGET, value_parser = io::parse_positive)]
    budget: usize,
    /// Seed for pair subsampling.
    #[arg(long, default_value_t = 0)]
    calibration_seed: u64,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    stream: PathBuf,
    #[command(flatten)]
    calibration: CalibrationFlags,
    /// Calibration JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Percentile for in-stream calibration; conflicts with --calibration.
    #[arg(long, value_parser = io::parse_percentile, required_unless_present = "calibration", conflicts_with = "calibration")]
    p: Option<f64>,
    /// Calibration JSON from `ep calibrate`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = ep_core::calibration::DEFAULT_BUDGET, value_parser = io::parse_positive)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    calibration_seed: u64,
    /// Vectors per batch.
    #[arg(long, default_value_t = ep_core::builder::DEFAULT_BATCH_SIZE, value_parser = io::parse_positive)]
    batch: usize,
    /// Consecutive zero-spawn batches that stop the build.
    #[arg(long, default_value_t = 1, value_parser = io::parse_positive)]
    window: usize,
    /// Stop after this many vectors.
    #[arg(long)]
    max_activations: Option<u64>,
    /// Recorded in the manifest.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    hook: Option<String>,
    #[arg(long)]
    layer: Option<u32>,
    /// Per-batch saturation trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AssignArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
    /// Also write the n nearest regions per vector.
    #[arg(long, value_parser = io::parse_positive)]
    top: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OodArgs {
    #[arg(long)]
    dict: PathBuf,
    /// Probe stream.
    #[arg(long)]
    stream: PathBuf,
    /// Held-in stream to compare against.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
    /// Statistics JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
    #[arg(long, default_value_t = ep_core::matching::DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CrossTabArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "mean")]
    basis: Basis,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    /// Two or more dictionaries built on different shuffles.
    #[arg(long = "dict", required = true, num_args = 1..)]
    dicts: Vec<PathBuf>,
    /// Per-region CSV.
    #[arg(long)]
    out: PathBuf,
    /// Spearman and quintile summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NeighbourhoodArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    a: u32,
    #[arg(long)]
    b: u32,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
}

#[derive(Args, Debug)]
pub struct TokensArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Token ids, one per line, aligned with the stream.
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = io::parse_positive)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    min_activations: u64,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorrespondArgs {
    /// Profiles CSV of the dictionary side.
    #[arg(long)]
    a: PathBuf,
    /// Profiles CSV of the reference side.
    #[arg(long)]
    b: PathBuf,
    /// Dictionary behind `a`, for the size-controlled coherence quintile.
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long, default_value_t = ep_core::analysis::STRONG_F1)]
    strong: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    dict: PathBuf,
    /// One vector per scored item.
    #[arg(long)]
    stream: PathBuf,
    /// Scores in [0, 1], one per line, aligned with the stream.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = ep_core::analysis::DEFAULT_LABEL_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value = "exemplar")]
    basis: Basis,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConceptArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    name: String,
    #[arg(long)]
    positives: PathBuf,
    #[arg(long)]
    contrastives: PathBuf,
    /// Held-out positives for AUROC.
    #[arg(long, requires = "held_out_negatives")]
    held_out_positives: Option<PathBuf>,
    #[arg(long, requires = "held_out_positives")]
    held_out_negatives: Option<PathBuf>,
    #[arg(long, default_value = "mean")]
    basis: Basis,
    /// Centre examples on this stream's mean instead of the dictionary centre.
    #[arg(long)]
    centre_from: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SaturationArgs {
    /// `NAME=TRACE.csv`, one per build.
    #[arg(long = "run", required = true, num_args = 1.., value_parser = io::parse_named_path)]
    runs: Vec<(String, PathBuf)>,
    /// Window the builds used, to mark saturation.
    #[arg(long, default_value_t = 1, value_parser = io::parse_positive)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
    /// Long-form curves CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ShuffleArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Provenance sidecar to permute alongside.
    #[arg(long, requires = "sidecar_out")]
    sidecar: Option<PathBuf>,
    #[arg(long, requires = "sidecar")]
    sidecar_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long, required_unless_present = "stream", conflicts_with = "stream")]
    dict: Option<PathBuf>,
    #[arg(long)]
    stream: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = io::parse_positive)]
    clusters: usize,
    #[arg(long, value_parser = io::parse_positive)]
    dim: usize,
    #[arg(long, value_parser = io::parse_positive)]
    n: usize,
    #[arg(long, default_value_t = 2000.0)]
    kappa: f64,
    /// Distance of the mixture centre from the origin.
    #[arg(long, default_value_t = 3.0)]
    offset: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw uniform directions around the mixture centre instead.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    out: PathBuf,
    /// Component label per vector, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
