use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphcage::harness::data::{parse_jsonl, Sample};
use graphcage::harness::{ablate, config::TrainConfig, inspect, synth, train};
use graphcage::tensor::checkpoint::Checkpoint;
use graphcage::GraphCage;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "graphcage", version, about = "Graph capsule aggregation for unaligned multimodal sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic long-range task as train/val/test JSON lines.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train.log, best.ckpt and metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a JSON-lines dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Emit the report as JSON (the only format).
        #[arg(long)]
        json: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export routing coefficients of one example.
    InspectRouting {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        example: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii_heatmap: bool,
    },
    /// Train one model per strategy and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: capsule, mean, attention, recurrent, no-caps.
        #[arg(long)]
        strategies: String,
        /// Keep every run and the table in this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> CliResult<GraphCage> {
    Ok(GraphCage::from_checkpoint(&Checkpoint::load(ckpt)?)?)
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynth { spec, seed, out } => {
            let spec = synth::SynthSpec::load(&spec)?;
            let data = synth::generate(&spec, seed)?;
            synth::write_splits(&data, &out)?;
            emit(
                &serde_json::json!({
                    "seed": seed,
                    "out": out,
                    "train": data.train.len(),
                    "val": data.val.len(),
                    "test": data.test.len(),
                }),
                None,
            )
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (report, _) = train::run(&cfg, &out)?;
            emit(&report, None)
        }
        Command::Eval { ckpt, data, json: _, out } => {
            let model = load_model(&ckpt)?;
            let samples = parse_jsonl(&read(&data)?)?;
            train::check_dataset(&model, &samples, &data.display().to_string())?;
            let report = train::evaluate(&model, &samples)?;
            if report.corr_undefined {
                eprintln!("warning: predictions or labels have zero variance; corr reported as 0");
            }
            emit(&report, out.as_deref())
        }
        Command::InspectRouting {
            ckpt,
            example,
            out,
            ascii_heatmap,
        } => {
            let model = load_model(&ckpt)?;
            let samples: Vec<Sample> = parse_jsonl(&read(&example)?)?;
            let [sample] = &samples[..] else {
                return Err(format!(
                    "{}: expected exactly one example, found {}",
                    example.display(),
                    samples.len()
                )
                .into());
            };
            let mut report = inspect::inspect(&model, sample)?;
            inspect::write_traces(&mut report, &out, ascii_heatmap)?;
            emit(&report, Some(&out.join("summary.json")))?;
            emit(&report, None)
        }
        Command::Ablate {
            config,
            strategies,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let strategies = ablate::parse_strategies(&strategies)?;
            let table = ablate::ablate(&cfg, &strategies, out.as_deref())?;
            if let Some(dir) = &out {
                emit(&table, Some(&dir.join("table.json")))?;
            }
            emit(&table, None)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
