//! `tlb` — timeline modeling toolkit CLI.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tlb_core::data::{
    dataset_stats, generate_synthetic, parse_dataset, parse_predictions, write_dataset,
    write_predictions, Dataset, GenConfig,
};
use tlb_core::metrics::{score_dataset, MetricBlock, MetricsReport, ScoreConfig, Sigma};
use tlb_core::models::{ModelConfig, ModelKind};
use tlb_core::train::{
    evaluate_params, grid_search, load_checkpoint_file, predict_dataset, save_checkpoint_file,
    train, GridConfig, TrainConfig,
};
use tlb_core::Error;

#[derive(Parser)]
#[command(name = "tlb", version, about = "Video timeline modeling toolkit")]
struct Cli {
    /// Worker threads for parallel scoring/evaluation (falls back to the
    /// TLB_THREADS environment variable, then to the core count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    V,
    Tri,
    #[value(name = "tri-distill")]
    TriDistill,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> ModelKind {
        match m {
            ModelArg::V => ModelKind::V,
            ModelArg::Tri => ModelKind::Tri,
            ModelArg::TriDistill => ModelKind::TriDistill,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic timeline dataset.
    Gen {
        /// Generator config JSON (defaults apply for missing fields).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset distribution statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a prediction file against ground truth.
    Score {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// IoU matching threshold (decimal, compared exactly).
        #[arg(long, default_value = "0.5")]
        sigma: String,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Training config JSON (defaults apply for missing fields).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Ablation: drop the video positional encoding.
        #[arg(long)]
        no_video_pe: bool,
        /// Ablation: drop the node-only and video-only encoders.
        #[arg(long)]
        no_encoders_23: bool,
        /// Optionally write the per-epoch training report JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write model predictions for a dataset.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "0.5")]
        sigma: String,
    },
    /// Grid search over learning rate and dropout.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Base training config JSON; the grid overrides lr and dropout.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid definition JSON; defaults to the standard lr/dropout grids.
        #[arg(long)]
        grid_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Save the winning checkpoint here.
        #[arg(long)]
        out_ckpt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("TLB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn read_to_string(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    parse_dataset(&read_to_string(path)?)
}

fn parse_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Gen { config, seed, out } => {
            let mut cfg: GenConfig = match config {
                Some(path) => parse_json_file(&path)?,
                None => GenConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dataset = generate_synthetic(&cfg)?;
            std::fs::write(&out, write_dataset(&dataset)?)?;
            eprintln!(
                "wrote {} timelines ({} videos) to {}",
                dataset.len(),
                dataset.samples.iter().map(|s| s.num_videos()).sum::<usize>(),
                out.display()
            );
            Ok(())
        }
        Command::Stats { data } => {
            let dataset = load_dataset(&data)?;
            let stats = dataset_stats(&dataset);
            println!("{}", serde_json::to_string_pretty(&stats).unwrap());
            Ok(())
        }
        Command::Score {
            gt,
            pred,
            sigma,
            format,
            out,
        } => {
            let gt_data = load_dataset(&gt)?;
            let predictions = parse_predictions(&read_to_string(&pred)?)?;
            let cfg = ScoreConfig {
                sigma: Sigma::from_decimal_str(&sigma)?,
            };
            let report = score_dataset(&gt_data, &predictions, &cfg)?;
            let rendered = match format {
                OutputFormat::Json => serde_json::to_string_pretty(&report).unwrap() + "\n",
                OutputFormat::Table => render_table(&report),
            };
            match out {
                Some(path) => std::fs::write(path, rendered)?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
        Command::Train {
            data,
            val,
            model,
            config,
            seed,
            out_ckpt,
            no_video_pe,
            no_encoders_23,
            report,
        } => {
            let train_data = load_dataset(&data)?;
            let val_data = load_dataset(&val)?;
            let mut cfg: TrainConfig = match config {
                Some(path) => parse_json_file(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(model) = model {
                cfg.model.model_kind = model.into();
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if no_video_pe {
                cfg.model.use_video_pe = false;
            }
            if no_encoders_23 {
                cfg.model.use_encoders_2_3 = false;
            }
            apply_dataset_dims(&mut cfg.model, &train_data)?;

            let outcome = train(&train_data, &val_data, &cfg)?;
            save_checkpoint_file(&out_ckpt, &outcome.model_cfg, &outcome.params)?;
            if let Some(path) = report {
                std::fs::write(
                    path,
                    serde_json::to_string_pretty(&outcome.report).unwrap(),
                )?;
            }
            eprintln!(
                "trained {} for {} epochs (best epoch {}, selection {:.6}, {:.1}s); checkpoint: {}",
                outcome.model_cfg.model_kind,
                outcome.report.epochs.len(),
                outcome.report.best_epoch,
                outcome.report.best_selection_value,
                outcome.report.wall_time_secs,
                out_ckpt.display()
            );
            Ok(())
        }
        Command::Predict { data, ckpt, out } => {
            let dataset = load_dataset(&data)?;
            let (cfg, params) = load_checkpoint_file(&ckpt)?;
            let predictions = predict_dataset(&cfg, &params, &dataset)?;
            std::fs::write(&out, write_predictions(&predictions)?)?;
            Ok(())
        }
        Command::Eval { data, ckpt, sigma } => {
            let dataset = load_dataset(&data)?;
            let (cfg, params) = load_checkpoint_file(&ckpt)?;
            let sigma = Sigma::from_decimal_str(&sigma)?;
            let report = evaluate_params(&cfg, &params, &dataset, sigma)?;
            print!("{}", render_table(&report));
            Ok(())
        }
        Command::Grid {
            data,
            val,
            model,
            config,
            grid_config,
            seed,
            out_ckpt,
        } => {
            let train_data = load_dataset(&data)?;
            let val_data = load_dataset(&val)?;
            let grid: GridConfig = match grid_config {
                Some(path) => parse_json_file(&path)?,
                None => GridConfig::default(),
            };
            let mut base: TrainConfig = match config {
                Some(path) => parse_json_file(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(model) = model {
                base.model.model_kind = model.into();
            }
            if let Some(seed) = seed {
                base.seed = seed;
            }
            apply_dataset_dims(&mut base.model, &train_data)?;
            let (best_cfg, outcome) = grid_search(&train_data, &val_data, &base, &grid)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "best_learning_rate": best_cfg.learning_rate,
                    "best_dropout": best_cfg.model.dropout_p,
                    "selection_value": outcome.report.best_selection_value,
                }))
                .unwrap()
            );
            if let Some(path) = out_ckpt {
                save_checkpoint_file(&path, &outcome.model_cfg, &outcome.params)?;
            }
            Ok(())
        }
    }
}

/// The model's input dimensions come from the dataset, not the config file.
fn apply_dataset_dims(model: &mut ModelConfig, data: &Dataset) -> Result<(), Error> {
    let dim = data.embedding_dim.ok_or_else(|| {
        Error::Input("dataset is metrics-only (no embeddings); cannot train on it".into())
    })?;
    model.input_dim = dim;
    if model.d_text.is_none() {
        model.d_text = data
            .samples
            .iter()
            .find_map(|s| s.node_text_embeddings.as_ref())
            .and_then(|t| t.first())
            .map(|v| v.len());
    }
    Ok(())
}

fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
        "", "Precision", "Recall", "Hamming", "Euclidean", "Agreement"
    ));
    let row = |name: &str, b: &MetricBlock| {
        format!(
            "{:<8}{:>12.6}{:>12.6}{:>12.6}{:>12.6}{:>12.6}\n",
            name, b.precision, b.recall, b.hamming, b.euclidean, b.agreement
        )
    };
    out.push_str(&row("Macro", &report.macro_avg));
    out.push_str(&row("Micro", &report.micro));
    out.push_str(&format!("samples: {}\n", report.per_sample.len()));
    out
}
