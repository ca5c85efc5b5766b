//! Command-line front end: dataset synthesis, training, evaluation, and a
//! few inspection utilities. Human-readable progress goes to stderr;
//! machine-readable artifacts go to files or stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wkws::audio_io::load_wav;
use wkws::eval::{evaluate, EvalReport};
use wkws::features::{log_mel, spectrogram_to_csv};
use wkws::manifest::{DatasetManifest, SynthConfig, Variant};
use wkws::model::checkpoint::load_checkpoint_file;
use wkws::smoke::{end_to_end_smoke, SmokeConfig};
use wkws::synth::{
    build_dataset, gen_noise, label_histogram, list_noise_files, scan_keyword_corpus, NoiseKind,
};
use wkws::train::{run_training, TrainConfig};
use wkws::Error;

const CHECKPOINT_FORMAT_VERSION: u16 = wkws::model::checkpoint::VERSION;

#[derive(Parser)]
#[command(
    name = "wkws",
    about = "Weakly supervised keyword spotting toolkit",
    version = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format v1)"),
    disable_version_flag = true
)]
struct Cli {
    /// Print version information
    #[arg(long, short = 'V', action = clap::ArgAction::SetTrue)]
    version: bool,
    /// Worker threads for parallel stages (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a weakly labeled dataset from a keyword corpus
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset
    Eval(EvalArgs),
    /// Export ROC curves from a saved evaluation report as CSV
    RocExport(RocExportArgs),
    /// Dump the log-mel spectrogram of a WAV file as CSV
    FeaturesDump(FeaturesDumpArgs),
    /// Generate a white or pink noise WAV
    GenNoise(GenNoiseArgs),
    /// Run the full pipeline end to end on a synthetic micro-corpus
    Smoke(SmokeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Keyword corpus root (one folder per word, plus validation/testing lists)
    #[arg(long)]
    keyword_dir: PathBuf,
    /// Noise corpus directory (required for weak variants)
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Output dataset directory; the manifest is written here
    #[arg(long)]
    out_dir: PathBuf,
    /// clean | weak | weak-snr | weak-pos
    #[arg(long, default_value = "weak")]
    variant: String,
    /// Target clip length in seconds
    #[arg(long, default_value_t = 1.0)]
    target_seconds: f64,
    /// Keyword-to-noise SNR in dB (weak-snr only)
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Abort on the first failing record instead of skipping it
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Random crop length in seconds, or "none"
    #[arg(long)]
    crop_seconds: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of best checkpoints to average
    #[arg(long)]
    topk_average: Option<usize>,
    /// full | small
    #[arg(long)]
    model_size: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report JSON output path (stdout if omitted)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write ROC curves as CSV to this path
    #[arg(long)]
    roc_csv: Option<PathBuf>,
}

#[derive(Args)]
struct RocExportArgs {
    /// Evaluation report JSON produced by `wkws eval`
    #[arg(long)]
    report: PathBuf,
    /// CSV output path (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesDumpArgs {
    wav: PathBuf,
    /// CSV output path (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenNoiseArgs {
    /// white | pink
    #[arg(long, default_value = "white")]
    kind: String,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SmokeArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    clips_per_class: usize,
    /// weak | weak-snr | weak-pos
    #[arg(long, default_value = "weak")]
    variant: String,
    #[arg(long)]
    snr_db: Option<f64>,
}

fn write_or_stdout(path: &Option<PathBuf>, content: &str) -> wkws::Result<()> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| Error::io(p, e)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> wkws::Result<()> {
    if cli.version {
        println!(
            "wkws {} (checkpoint format v{})",
            env!("CARGO_PKG_VERSION"),
            CHECKPOINT_FORMAT_VERSION
        );
        return Ok(());
    }
    wkws::par::configure_jobs(cli.jobs);
    let command = cli
        .command
        .ok_or_else(|| Error::Config("no subcommand given; see --help".into()))?;

    match command {
        Command::Synth(a) => {
            let config = SynthConfig {
                variant: a.variant.parse()?,
                target_seconds: a.target_seconds,
                snr_db: a.snr_db,
                sample_rate: a.sample_rate,
                seed: a.seed,
                keyword_dir: a.keyword_dir.clone(),
                noise_dir: a.noise_dir.clone(),
                out_dir: a.out_dir.clone(),
            };
            config.validate()?;
            eprintln!("scanning keyword corpus {}", a.keyword_dir.display());
            let keywords = scan_keyword_corpus(&a.keyword_dir)?;
            eprintln!("found {} keyword clips", keywords.len());
            let noise_paths = match &a.noise_dir {
                Some(d) => list_noise_files(d)?,
                None => Vec::new(),
            };
            if config.variant != Variant::Clean {
                eprintln!("found {} noise clips", noise_paths.len());
            }
            let manifest = build_dataset(&config, &keywords, &noise_paths, a.strict)?;
            let manifest_path = a.out_dir.join("manifest.jsonl");
            manifest.save(&manifest_path)?;
            eprintln!(
                "wrote {} records to {}",
                manifest.records.len(),
                manifest_path.display()
            );
            for (label, count) in label_histogram(&manifest.records) {
                eprintln!("  class {label:2}: {count} clips");
            }
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = a.train_manifest {
                cfg.train_manifest = v;
            }
            if let Some(v) = a.out_dir {
                cfg.out_dir = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.max_epochs {
                cfg.max_epochs = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = &a.crop_seconds {
                cfg.set("crop_seconds", v)?;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.topk_average {
                cfg.topk_average = v;
            }
            if let Some(v) = &a.model_size {
                cfg.model_size = v.parse()?;
            }
            if cfg.train_manifest.as_os_str().is_empty() {
                return Err(Error::Config("train_manifest is required".into()));
            }
            if cfg.out_dir.as_os_str().is_empty() {
                return Err(Error::Config("out_dir is required".into()));
            }
            let outcome = run_training(&cfg, |msg| eprintln!("{msg}"))?;
            eprintln!(
                "averaged model: {}\nmetrics: {}",
                outcome.averaged_path.display(),
                outcome.metrics_path.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let params = load_checkpoint_file(&a.checkpoint)?;
            let manifest = DatasetManifest::load(&a.manifest)?;
            let report = evaluate(&params, &manifest, &a.manifest)?;
            eprintln!(
                "accuracy {:.4}  macro mAP {:.4}  macro AUC {:.4}",
                report.accuracy, report.macro_map, report.macro_auc
            );
            let json =
                serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            write_or_stdout(&a.report, &json)?;
            if let Some(p) = &a.roc_csv {
                std::fs::write(p, report.roc_csv()).map_err(|e| Error::io(p, e))?;
            }
            Ok(())
        }
        Command::RocExport(a) => {
            let report = EvalReport::load_json(&a.report)?;
            write_or_stdout(&a.out, &report.roc_csv())
        }
        Command::FeaturesDump(a) => {
            let clip = load_wav(&a.wav)?;
            let spec = log_mel(&clip)?;
            write_or_stdout(&a.out, &spectrogram_to_csv(&spec))
        }
        Command::GenNoise(a) => {
            let kind: NoiseKind = a.kind.parse()?;
            let clip = gen_noise(kind, a.seconds, a.sample_rate, a.seed)?;
            wkws::audio_io::save_wav(&clip, &a.out)?;
            eprintln!("wrote {} samples to {}", clip.samples.len(), a.out.display());
            Ok(())
        }
        Command::Smoke(a) => {
            let config = SmokeConfig {
                out_dir: a.out_dir,
                seed: a.seed,
                clips_per_class: a.clips_per_class,
                epochs: a.epochs,
                variant: a.variant.parse()?,
                snr_db: a.snr_db,
            };
            let arts = end_to_end_smoke(&config, |msg| eprintln!("{msg}"))?;
            println!("{}", arts.report_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; usage errors exit 2
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
