use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aquacast::cdm::{build_synth, Scenario, SynthPreset};
use aquacast::data::{summarize, Dataset, RainConfig, Split};
use aquacast::experiment::{
    eval_report, run_cell, run_grid, series_set, write_report, EvalReport, ExperimentSpec, GridSpec, Overrides,
    HORIZONS,
};
use aquacast::model::AquaCast;
use aquacast::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

/// Multi-input transformer forecasting for urban drainage series.
#[derive(Parser)]
#[command(name = "aquacast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, gap-fill and resample a directory of sensor CSVs.
    Preprocess {
        /// Directory of `timestamp,value` CSV files, one per sensor.
        #[arg(long)]
        dataset_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic drainage dataset.
    Synth {
        /// Scenario JSON file or preset name (SynthLow, SynthMid, SynthHigh).
        #[arg(long)]
        scenario: String,
        #[arg(long, env = "AQUACAST_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one rain configuration at one horizon, then score it on the test split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        rain: RainArg,
        #[arg(long)]
        horizon: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a trained checkpoint.
    Eval {
        /// Checkpoint file, or a `train` output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine evaluation reports into a metric table and forecast plots.
    Report {
        /// `eval.json` files or directories containing one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the rain-configuration × horizon grid end to end.
    Grid {
        #[command(flatten)]
        data: DataArgs,
        /// Rain configurations (default: all three).
        #[arg(long, value_enum)]
        rain: Vec<RainArg>,
        /// Horizons (default: 96, 192, 480, 720).
        #[arg(long)]
        horizon: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Processed dataset directory (containing dataset.json).
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    dataset_root: Option<PathBuf>,
    /// Synthesize the dataset from a scenario file or preset instead.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON overrides: {"model": {...}, "train": {...}, "eval_stride": n, "targets": [...], "units": "original"}.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "AQUACAST_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RainArg {
    None,
    Hist,
    Full,
}

impl From<RainArg> for RainConfig {
    fn from(r: RainArg) -> Self {
        match r {
            RainArg::None => RainConfig::NoRain,
            RainArg::Hist => RainConfig::RainHist,
            RainArg::Full => RainConfig::RainFull,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 3 })
        }
        Err(_) => ExitCode::from(3),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { dataset_root, out } => preprocess(&dataset_root, &out),
        Command::Synth { scenario, seed, out } => synth(&scenario, seed, &out),
        Command::Train {
            data,
            rain,
            horizon,
            run,
        } => train(&data, rain.into(), horizon, &run),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, split.into(), &out),
        Command::Report { inputs, out } => report(&inputs, &out),
        Command::Grid {
            data,
            rain,
            horizon,
            jobs,
            run,
        } => grid(&data, rain, horizon, jobs, &run),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Top-level index of everything a command wrote under `--out`.
fn write_index(out: &Path, command: &str, args: Value, artifacts: &[PathBuf]) -> Result<()> {
    let rel: Vec<String> = artifacts
        .iter()
        .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
        .collect();
    let index = json!({
        "tool": "aquacast",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "created": chrono::Utc::now().to_rfc3339(),
        "args": args,
        "artifacts": rel,
    });
    write_json(&out.join("run.json"), &index)
}

fn load_scenario(arg: &str, seed: Option<u64>) -> Result<Scenario> {
    let mut scenario = match SynthPreset::parse(arg) {
        Ok(p) => Scenario::preset(p, 0),
        Err(_) => {
            let path = Path::new(arg);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "`{arg}` is neither a preset nor a scenario file"
                )));
            }
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Scenario::from_json(&text)?
        }
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    Ok(scenario)
}

fn load_dataset(data: &DataArgs, seed: Option<u64>) -> Result<(String, Dataset)> {
    match (&data.dataset_root, &data.scenario) {
        (Some(root), _) => {
            let name = root
                .canonicalize()
                .ok()
                .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "dataset".into());
            Ok((name, Dataset::load(root)?))
        }
        (None, Some(s)) => {
            let scenario = load_scenario(s, seed)?;
            let synth = build_synth(&scenario)?;
            Ok((scenario.name.clone(), synth.to_dataset()?))
        }
        (None, None) => Err(Error::Config("pass --dataset-root or --scenario".into())),
    }
}

fn load_overrides(path: Option<&Path>) -> Result<Overrides> {
    match path {
        None => Ok(Overrides::default()),
        Some(p) => Overrides::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

fn preprocess(input: &Path, out: &Path) -> Result<()> {
    let dataset = Dataset::preprocess_dir(input)?;
    dataset.write(out)?;
    let mut artifacts = vec![out.join(aquacast::data::MANIFEST_FILE)];
    artifacts.extend(dataset.manifest.channels.iter().map(|c| out.join(&c.file)));
    for (entry, values) in dataset.manifest.channels.iter().zip(&dataset.values) {
        let summary = summarize(values)?;
        let path = out.join("summaries").join(format!("{}.json", entry.id));
        write_json(&path, &summary)?;
        println!(
            "{}\tmean={:.6}\tstd={:.6}\thistogram={}",
            entry.id,
            summary.mean,
            summary.std,
            path.display()
        );
        artifacts.push(path);
    }
    write_index(out, "preprocess", json!({ "dataset_root": input }), &artifacts)
}

fn synth(arg: &str, seed: Option<u64>, out: &Path) -> Result<()> {
    let scenario = load_scenario(arg, seed)?;
    let synth = build_synth(&scenario)?;
    let dataset = synth.to_dataset()?;
    dataset.write(out)?;
    let summary = out.join("complexity.json");
    write_json(
        &summary,
        &json!({
            "scenario": scenario.name,
            "source": synth.source,
            "nodes": dataset.manifest.channels.iter().filter(|c| !c.kind.is_precipitation()).map(|c| &c.id).collect::<Vec<_>>(),
            "complexity": synth.complexity,
        }),
    )?;
    write_json(&out.join("scenario.json"), &scenario)?;
    println!(
        "{}: {} nodes × {} steps, median entropy {:.4}, median complexity {:.4}",
        scenario.name,
        synth.flows.len(),
        scenario.steps,
        synth.complexity.median_entropy,
        synth.complexity.median_complexity
    );
    let artifacts = [
        out.join(aquacast::data::MANIFEST_FILE),
        summary,
        out.join("scenario.json"),
    ];
    write_index(
        out,
        "synth",
        json!({ "scenario": arg, "seed": scenario.seed }),
        &artifacts,
    )
}

fn train(data: &DataArgs, rain: RainConfig, horizon: usize, run: &RunArgs) -> Result<()> {
    let seed = run.seed.unwrap_or(0);
    let (name, dataset) = load_dataset(data, run.seed)?;
    let spec = ExperimentSpec {
        dataset: name,
        rain,
        horizon,
        seed,
        overrides: load_overrides(run.config.as_deref())?,
    };
    let cell = run_cell(&dataset, &spec)?;
    let out = &run.out;
    let files = [
        out.join("model.json"),
        out.join("train.json"),
        out.join("spec.json"),
        out.join("eval.json"),
    ];
    cell.model.save(&files[0])?;
    write_json(&files[1], &cell.manifest)?;
    write_json(&files[2], &spec)?;
    cell.report.write(&files[3])?;
    println!(
        "{} h={} best epoch {} val {:.6} test mse {:.6}",
        rain.name(),
        horizon,
        cell.manifest.best_epoch,
        cell.manifest.best_val_loss,
        cell.report.mean.mse
    );
    write_index(
        out,
        "train",
        json!({ "rain": rain.flag(), "horizon": horizon, "seed": seed }),
        &files,
    )
}

fn eval(checkpoint: &Path, data: &DataArgs, split: Split, out: &Path) -> Result<()> {
    let (model_path, dir) = if checkpoint.is_dir() {
        (checkpoint.join("model.json"), checkpoint.to_path_buf())
    } else {
        (
            checkpoint.to_path_buf(),
            checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    };
    if !model_path.exists() {
        return Err(Error::Input(format!("checkpoint {} not found", model_path.display())));
    }
    let spec_path = dir.join("spec.json");
    let spec: ExperimentSpec =
        serde_json::from_str(&fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?)?;
    let model = AquaCast::load(&model_path)?;
    let (_, dataset) = load_dataset(data, Some(spec.seed))?;
    let set = series_set(&dataset, &spec)?;
    let report = eval_report(&model, &set, split, &spec, spec.fingerprint(&dataset)?)?;
    let path = out.join("eval.json");
    report.write(&path)?;
    println!(
        "{:?} split: mean mse {:.6}, mean auc {:.4}",
        split, report.mean.mse, report.mean.auc
    );
    write_index(out, "eval", json!({ "checkpoint": checkpoint }), &[path])
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let reports = inputs
        .iter()
        .map(|p| EvalReport::load(&if p.is_dir() { p.join("eval.json") } else { p.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let files = write_report(&reports, out)?;
    print!(
        "{}",
        fs::read_to_string(&files[0]).map_err(|e| Error::io(&files[0], e))?
    );
    write_index(out, "report", json!({ "inputs": inputs }), &files)
}

fn grid(data: &DataArgs, rain: Vec<RainArg>, horizons: Vec<usize>, jobs: usize, run: &RunArgs) -> Result<()> {
    let seed = run.seed.unwrap_or(0);
    let (name, dataset) = load_dataset(data, run.seed)?;
    let spec = GridSpec {
        dataset: name,
        configs: if rain.is_empty() {
            RainConfig::ALL.to_vec()
        } else {
            rain.into_iter().map(Into::into).collect()
        },
        horizons: if horizons.is_empty() {
            HORIZONS.to_vec()
        } else {
            horizons
        },
        seed,
        overrides: load_overrides(run.config.as_deref())?,
    };
    let output = run_grid(&dataset, &spec, &run.out, jobs)?;
    let mut artifacts: Vec<PathBuf> = output.cells.iter().map(|c| c.dir.join("eval.json")).collect();
    artifacts.extend(output.report_files.iter().cloned());
    print!("{}", aquacast::experiment::report_table(&output.reports));
    write_index(
        &run.out,
        "grid",
        json!({ "spec": spec, "jobs": jobs, "cells": output.cells }),
        &artifacts,
    )
}
