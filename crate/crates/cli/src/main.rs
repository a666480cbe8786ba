//! `nisqa`: predict, evaluate, train, ablate and synthesize from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nisqa", version, about = "Single-ended speech quality prediction")]
struct Cli {
    /// Worker threads for file-level parallelism (predict, evaluate, synth,
    /// ablate). Results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Predict(PredictArgs),
    Evaluate(EvaluateArgs),
    Train(TrainArgs),
    Ablate(AblateArgs),
    Synth(SynthArgs),
    SynthClean(SynthCleanArgs),
}

/// Score WAV files with a trained bundle.
#[derive(Debug, Args)]
#[command(after_help = "Output columns: filepath, mos, noi, col, dis, lou[, segments]\n\
    Attention sidecar (<output>.attention.json): [{filepath, segments, weights: {mos, noi, col, dis, lou}}]")]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// A WAV file or a directory of WAV files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Write per-task attention weights to a JSON sidecar next to the output.
    #[arg(long)]
    pub dump_attention: bool,
    /// Append the number of valid segments per file.
    #[arg(long)]
    pub segments: bool,
}

/// Score a manifest and report correlation and RMSE per dataset and task.
#[derive(Debug, Args)]
#[command(after_help = "Report columns: dataset, level, task, r, rmse, rmse_raw, a, b, n, n_files, n_conditions, failures\n\
    Predictions columns: filepath, mos, noi, col, dis, lou")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Add metrics on condition means.
    #[arg(long)]
    pub per_condition: bool,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the per-file predictions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

/// Train a model; writes the best run's bundle and a per-epoch run CSV.
#[derive(Debug, Args)]
#[command(after_help = "Run CSV columns: config_id, seed, epoch, train_loss, train_pcc, val_pcc, best_epoch, best_val_pcc")]
pub struct TrainArgs {
    /// Training configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: PathBuf,
    /// Output weight bundle.
    #[arg(long)]
    pub out: PathBuf,
    /// Run CSV path; defaults to the bundle path with `.runs.csv`.
    #[arg(long)]
    pub runs_csv: Option<PathBuf>,
    /// Replaces the configured seeds with this single seed.
    #[arg(long, env = "NISQA_SEED")]
    pub seed: Option<u64>,
}

/// Train every variant of one model stage over several seeds and tabulate
/// the median best validation correlation.
#[derive(Debug, Args)]
#[command(after_help = "Table layout:\n  Model  <variant>  ...\n  r      <median>   ...\n\
    Run CSV columns: variant, seed, val_pcc, best_epoch, epochs, error")]
pub struct AblateArgs {
    /// framewise, td or pooling.
    #[arg(long)]
    pub stage: String,
    /// Comma-separated variants; defaults to every variant of the stage.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Seeded runs per variant.
    #[arg(long, default_value_t = 12)]
    pub runs: usize,
    /// First seed; runs use consecutive seeds from here.
    #[arg(long, env = "NISQA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: PathBuf,
    /// Where to write the table; it is printed to stdout as well.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub runs_csv: Option<PathBuf>,
}

/// Degrade clean speech under a condition grid into a labelled corpus.
#[derive(Debug, Args)]
#[command(after_help = "Writes <out-dir>/wav/cNNNN_fNNN.wav and <out-dir>/manifest.csv\n\
    Manifest columns: filepath, condition_id, mos, noi, col, dis, lou, dataset_name")]
pub struct SynthArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// Condition grid (JSON).
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, env = "NISQA_SEED", default_value_t = 0)]
    pub seed: u64,
}

/// Synthesize clean speech-like signals to feed `synth`.
#[derive(Debug, Args)]
pub struct SynthCleanArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 3.0)]
    pub duration: f64,
    #[arg(long, env = "NISQA_SEED", default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    }

    let result = match cli.command {
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::SynthClean(a) => commands::synth_clean(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
