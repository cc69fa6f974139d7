//! `fae`: dataset generation, training, explanation and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code for an invalid command line or config.
const EXIT_CONFIG: u8 = 2;
/// Exit code for failures while running (missing files, bad formats, divergence).
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fae", version, about = "Attention explanations for a synthetic-image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic parts-on-a-grid dataset.
    GenData(GenDataArgs),
    /// Train the convolutional classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train the explainer and aligner on a trained classifier's features.
    TrainExplainer(TrainExplainerArgs),
    /// Generate explanations for one image or a dataset split.
    Explain(ExplainArgs),
    /// GradCAM maps of the predicted (or given) class.
    Gradcam(GradcamArgs),
    /// Score predictions with caption metrics and FER.
    Eval(EvalArgs),
    /// Write per-step attention of explanation records as P5 graymaps.
    DumpAttn(DumpAttnArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    #[arg(long, default_value_t = 800)]
    train_size: usize,
    #[arg(long, default_value_t = 100)]
    test_size: usize,
}

#[derive(Debug, Args)]
struct TrainClassifierArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with classifier training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainExplainerArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint holding the trained classifier.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file `{"train": {...}, "dims": {...}}`; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_align: Option<f64>,
    #[arg(long)]
    lambda_ds: Option<f64>,
    /// `per_paper` or `sat`.
    #[arg(long)]
    context_scale: Option<String>,
    /// Align on decoded sequences instead of ground truth.
    #[arg(long)]
    two_pass: bool,
    /// Detach the realigned attention in the alignment loss.
    #[arg(long)]
    stop_grad_realign: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Train in 64-bit precision.
    #[arg(long)]
    f64: bool,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Single P6 image.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    image: Option<PathBuf>,
    /// Dataset directory; explains every image of `--split`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Extrinsic saliency map (P5 or JSON) to enforce.
    #[arg(long)]
    enforce: Option<PathBuf>,
    /// Enforced steps, e.g. `1..3,5` (1-based). Without it no step is enforced.
    #[arg(long, requires = "enforce")]
    steps: Option<String>,
    /// Beam width; greedy when omitted.
    #[arg(long, conflicts_with = "enforce")]
    beam: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    image: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Class to explain; the predicted class when omitted.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Explanation records (JSON array or single record).
    #[arg(long)]
    preds: PathBuf,
    /// Dataset directory supplying references, annotations and lexicon.
    #[arg(long)]
    data: Option<PathBuf>,
    /// References JSON `{id: [sentence, ...]}`.
    #[arg(long, required_unless_present = "data")]
    refs: Option<PathBuf>,
    /// Part annotations JSON `{id: [{name, cx, cy}, ...]}`.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Lexicon JSON `{word: adjective|noun|other}`.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Directory of `<id>.json` or `<id>.pgm` GradCAM maps.
    #[arg(long)]
    gradcam: Option<PathBuf>,
    /// Comma-separated subset of bleu4, rougeL, ciderD, fer.
    #[arg(long, default_value = "bleu4,rougeL,ciderD,fer")]
    metrics: String,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DumpAttnArgs {
    /// Explanation records (JSON array or single record).
    #[arg(long)]
    records: PathBuf,
    /// Side of the upsampled square graymaps.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::TrainExplainer(a) => commands::train_explainer(a),
        Command::Explain(a) => commands::explain(a),
        Command::Gradcam(a) => commands::gradcam(a),
        Command::Eval(a) => commands::eval(a),
        Command::DumpAttn(a) => commands::dump_attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fae: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
