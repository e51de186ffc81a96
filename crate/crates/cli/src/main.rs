//! `dethub`: synthetic data, training, evaluation, ablations and plots for the
//! query-adapted multi-dataset detector.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dethub::data::{synth_conflict_datasets, write_synth_dataset, LoadedDataset, SynthSpec};
use dethub::engine::{
    config_key_help, evaluate_checkpoint, load_datasets, preset_cells, read_metrics,
    run_ablation, write_predictions, AblationPreset, AblationTable, CheckpointManifest,
    EvalReport, TrainConfig, Trainer,
};
use dethub::{Error, Result};
use serde::Serialize;
use serde_json::json;

/// Environment variable naming the root directory for relative `--out` paths.
const OUTPUT_ROOT_ENV: &str = "DETHUB_OUTPUT_ROOT";

fn keys_help() -> String {
    format!(
        "Configuration keys (TOML sections or --set section.key=value):\n{}",
        config_key_help()
    )
}

#[derive(Parser)]
#[command(name = "dethub", version, about, after_help = keys_help())]
struct Cli {
    /// Root for relative output paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic conflicting-taxonomy datasets.
    SynthData(SynthArgs),
    /// Train a detector.
    #[command(after_help = keys_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Run ablation grids at toy scale.
    #[command(after_help = keys_help())]
    Ablate(AblateArgs),
    /// Draw plots from metrics logs, ablation tables or evaluation reports.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults are used for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `queries.count=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        let config = base.with_overrides(&self.overrides)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (relative to the output root).
    #[arg(long, default_value = "synth")]
    out: PathBuf,
    /// Number of datasets; the third onwards reuse shapes under new names.
    #[arg(long, default_value_t = 2)]
    datasets: usize,
    /// Training images per dataset.
    #[arg(long, default_value_t = 200)]
    images: usize,
    /// Held-out images per dataset, written to `<dataset>/val`.
    #[arg(long, default_value_t = 50)]
    val_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    image_size: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "train")]
    out: PathBuf,
    /// Continue from a checkpoint directory instead of starting fresh.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory containing `manifest.json`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to evaluate as NAME=DIR (repeatable); defaults to the training datasets.
    #[arg(long = "dataset", value_name = "NAME=DIR")]
    datasets: Vec<String>,
    /// Overrides for `embedder.*` and `eval.*` keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Grid to run (repeatable): modes, queries, components, layers, kernels,
    /// lengths, datasets, or all.
    #[arg(long = "grid", required = true)]
    grids: Vec<String>,
    /// Held-out split per dataset as NAME=DIR (repeatable); defaults to training data.
    #[arg(long = "eval-dataset", value_name = "NAME=DIR")]
    eval_datasets: Vec<String>,
    #[arg(long, default_value = "ablate")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    LossCurve,
    AblationBars,
    JointVsSeparate,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Input file; for joint-vs-separate use LABEL=REPORT.json (repeatable).
    #[arg(long = "input", required = true)]
    inputs: Vec<String>,
    /// Output SVG file (relative to the output root).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.code() {
        "config" | "embedder-mismatch" => 2,
        "data" | "io" | "json" => 3,
        _ => 4,
    }
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .filter(|(a, b)| !a.is_empty() && !b.is_empty())
        .ok_or_else(|| Error::config(format!("expected NAME=VALUE, got `{s}`")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn synth_data(args: &SynthArgs, out: &Path) -> Result<serde_json::Value> {
    let mut spec = SynthSpec::with_datasets(args.datasets, args.images);
    spec.image_size = args.image_size;
    let train = synth_conflict_datasets(&spec, args.seed)?;
    let mut val_spec = spec.clone();
    for d in &mut val_spec.datasets {
        d.images = args.val_images;
    }
    let val = if args.val_images > 0 {
        synth_conflict_datasets(&val_spec, args.seed.wrapping_add(0x5eed))?
    } else {
        Vec::new()
    };
    let mut written = Vec::new();
    for (i, ds) in train.iter().enumerate() {
        let dir = out.join(&ds.vocabulary.dataset_name);
        write_synth_dataset(&dir, ds)?;
        if let Some(v) = val.get(i) {
            write_synth_dataset(&dir.join("val"), v)?;
        }
        written.push(json!({
            "name": ds.vocabulary.dataset_name,
            "categories": ds.vocabulary.categories(),
            "images": ds.records.len(),
        }));
    }
    let manifest = json!({
        "command": "synth-data",
        "seed": args.seed,
        "spec": spec,
        "val_images": args.val_images,
        "datasets": written,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn train(args: &TrainArgs, out: &Path) -> Result<serde_json::Value> {
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let manifest = CheckpointManifest::read(ckpt)?;
            let datasets = load_datasets(&manifest.config)?;
            Trainer::resume(ckpt, datasets)?
        }
        None => {
            let config = args.config.resolve()?;
            let datasets = load_datasets(&config)?;
            Trainer::new(config, datasets)?
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, trainer.config.to_toml_string()?)
        .map_err(|e| Error::io(&config_path, e))?;
    let summary = trainer.run(Some(out))?;
    let result = json!({
        "command": "train",
        "config_hash": trainer.config.hash()?,
        "seed": trainer.config.train.seed,
        "sampler_seed": trainer.config.sampler.seed,
        "steps": summary.steps,
        "final": trainer.history().last(),
        "checkpoints": summary.checkpoints,
        "frozen_embedding_hash": summary.frozen_hash_after,
    });
    write_json(&out.join("run.json"), &result)?;
    Ok(result)
}

fn eval(args: &EvalArgs, out: &Path) -> Result<serde_json::Value> {
    let manifest = CheckpointManifest::read(&args.checkpoint)?;
    for o in &args.overrides {
        let key = o.split('=').next().unwrap_or_default();
        if !(key.starts_with("embedder.") || key.starts_with("eval.")) {
            return Err(Error::config(format!(
                "eval accepts only embedder.* and eval.* overrides, got `{key}`"
            )));
        }
    }
    let config = manifest.config.with_overrides(&args.overrides)?;
    let size = config.model.image_size as u32;
    let datasets: Vec<LoadedDataset> = if args.datasets.is_empty() {
        load_datasets(&config)?
    } else {
        args.datasets
            .iter()
            .map(|s| {
                let (name, dir) = split_pair(s)?;
                LoadedDataset::load(name, Path::new(dir), size)
            })
            .collect::<Result<_>>()?
    };
    let (report, preds) = evaluate_checkpoint(
        &args.checkpoint,
        &datasets,
        &config.embedder,
        config.eval.max_images,
    )?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_predictions(&out.join("predictions.jsonl"), &preds)?;
    Ok(json!({
        "command": "eval",
        "report": out.join("eval_report.json"),
        "predictions": preds.len(),
        "ap": report
            .datasets
            .iter()
            .map(|(k, v)| (k.clone(), json!(v.ap * 100.0)))
            .collect::<serde_json::Map<_, _>>(),
    }))
}

fn ablate(args: &AblateArgs, out: &Path) -> Result<serde_json::Value> {
    let config = args.config.resolve()?;
    let train = load_datasets(&config)?;
    let size = config.model.image_size as u32;
    let eval: Vec<LoadedDataset> = args
        .eval_datasets
        .iter()
        .map(|s| {
            let (name, dir) = split_pair(s)?;
            LoadedDataset::load(name, Path::new(dir), size)
        })
        .collect::<Result<_>>()?;
    let presets: Vec<AblationPreset> = if args.grids.iter().any(|g| g == "all") {
        AblationPreset::ALL.to_vec()
    } else {
        args.grids.iter().map(|g| g.parse()).collect::<Result<_>>()?
    };
    let names: Vec<String> = train.iter().map(|d| d.name.clone()).collect();
    let mut tables = serde_json::Map::new();
    for preset in presets {
        let cells = preset_cells(preset, &names);
        let table = run_ablation(&config, &train, &eval, &cells, config.eval.max_images);
        table.write(out, preset.as_str())?;
        tables.insert(
            preset.as_str().to_string(),
            json!({
                "rows": table.rows.len(),
                "failed": table.rows.iter().filter(|r| r.status != "ok").count(),
                "csv": out.join(format!("{}.csv", preset.as_str())),
            }),
        );
    }
    let result = json!({
        "command": "ablate",
        "config_hash": config.hash()?,
        "seed": config.train.seed,
        "tables": tables,
    });
    write_json(&out.join("run.json"), &result)?;
    Ok(result)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn plot(args: &PlotArgs, root: &Path) -> Result<serde_json::Value> {
    let default_name = match args.kind {
        PlotKind::LossCurve => "loss-curve.svg",
        PlotKind::AblationBars => "ablation-bars.svg",
        PlotKind::JointVsSeparate => "joint-vs-separate.svg",
    };
    let out = root.join(args.out.clone().unwrap_or_else(|| Path::new("plots").join(default_name)));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let summary = match args.kind {
        PlotKind::LossCurve => {
            let mut metrics = Vec::new();
            for p in &args.inputs {
                metrics.extend(read_metrics(Path::new(p))?);
            }
            plot::loss_curve(&metrics, &out)?
        }
        PlotKind::AblationBars => {
            let mut table = AblationTable::default();
            for p in &args.inputs {
                table.rows.extend(read_json::<AblationTable>(Path::new(p))?.rows);
            }
            plot::ablation_bars(&table, &out)?
        }
        PlotKind::JointVsSeparate => {
            let reports = args
                .inputs
                .iter()
                .map(|s| {
                    let (label, path) = split_pair(s)?;
                    Ok((label.to_string(), read_json::<EvalReport>(Path::new(path))?))
                })
                .collect::<Result<Vec<_>>>()?;
            plot::joint_vs_separate(&reports, &out)?
        }
    };
    Ok(serde_json::to_value(summary)?)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let root = &cli.output_root;
    match &cli.command {
        Command::SynthData(a) => synth_data(a, &root.join(&a.out)),
        Command::Train(a) => train(a, &root.join(&a.out)),
        Command::Eval(a) => eval(a, &root.join(&a.out)),
        Command::Ablate(a) => ablate(a, &root.join(&a.out)),
        Command::Plot(a) => plot(a, root),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                json!({"error": {"code": e.code(), "message": e.to_string(), "exit_code": code}})
            );
            ExitCode::from(code)
        }
    }
}
