//! aircast command line: one subcommand per pipeline stage, each writing a
//! self-describing run directory (resolved config, deterministic log,
//! artifacts). Values resolve as defaults, then the `--config` file, then
//! flags. Exit codes: 0 success, 1 failed run (error JSON on stderr),
//! 2 usage.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use aircast_core::run::{parse_run_config, RunConfig};
use aircast_core::{Error, Result};

mod exec;

#[derive(Parser)]
#[command(
    name = "aircast",
    version,
    about = "Station-level air-quality forecasting over coupled observation, meteorology and emission data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-city dataset.
    Synth(SynthArgs),
    /// Train the 6-hour forecast model.
    Train(TrainArgs),
    /// Train the hourly interpolator and bundle it with 6-hour weights.
    TrainInterp(TrainInterpArgs),
    /// Forecast from a checkpoint at one initialization hour.
    Forecast(ForecastArgs),
    /// Score held-out forecasts and write the metrics report.
    Evaluate(EvaluateArgs),
    /// Train and score modality-ablation arms.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render per-metric CSV tables and SVG charts from a report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run; created, and must be empty if present.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Master seed for the generator.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset root directory as written by synth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// City to train on.
    #[arg(long)]
    city: Option<String>,
    /// Training seed (parameter init and batch order).
    #[arg(long)]
    seed: Option<u64>,
    /// Quantile levels, e.g. 0.1,0.5,0.9.
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainInterpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    city: Option<String>,
    /// Checkpoint with the 6-hour weights to bundle with.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    city: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Initialization hour on the dataset axis.
    #[arg(long)]
    anchor: Option<usize>,
    /// Rollout length in 6-hour steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    city: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    city: Option<String>,
    /// Arms to run, e.g. ALL,DEMET,DEEMS,STN_ONLY.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    /// Replace the seed list with N, N+1, N+2.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Seed for the probe inputs and initial weights.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Metrics report JSON written by evaluate.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AIRCAST_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::from(1)
        }
    }
}

/// Load the base document for `command`: the config file if given, else an
/// empty object, with the command tag checked and inserted.
fn load_doc(command: &str, common: &Common) -> Result<Map<String, Value>> {
    let doc: Value = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::MissingArtifact(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    let Value::Object(mut obj) = doc else {
        return Err(Error::InvalidConfig("run configuration must be a JSON object".into()));
    };
    match obj.get("command").and_then(Value::as_str) {
        None => {
            obj.insert("command".into(), json!(command));
        }
        Some(c) if c == command => {}
        Some(c) => {
            return Err(Error::InvalidConfig(format!(
                "configuration file is for command {c:?}, not {command:?}"
            )))
        }
    }
    Ok(obj)
}

/// Insert `value` at a dotted `path`, creating intermediate objects.
fn set_path(obj: &mut Map<String, Value>, path: &str, value: Value) -> Result<()> {
    match path.split_once('.') {
        None => {
            obj.insert(path.to_string(), value);
            Ok(())
        }
        Some((head, rest)) => {
            let child = obj.entry(head.to_string()).or_insert_with(|| json!({}));
            match child.as_object_mut() {
                Some(m) => set_path(m, rest, value),
                None => Err(Error::InvalidConfig(format!(
                    "cannot override {path}: {head} is not an object"
                ))),
            }
        }
    }
}

fn set_opt<T: serde::Serialize>(
    obj: &mut Map<String, Value>,
    path: &str,
    v: &Option<T>,
) -> Result<()> {
    if let Some(v) = v {
        set_path(obj, path, serde_json::to_value(v)?)?;
    }
    Ok(())
}

/// Quantiles feed the trainer, and the model section too when one is spelled
/// out (a derived model copies the trainer's quantiles anyway).
fn set_quantiles(obj: &mut Map<String, Value>, q: &Option<Vec<f64>>) -> Result<()> {
    if let Some(q) = q {
        set_path(obj, "train.quantiles", json!(q))?;
        if obj.get("model").map_or(false, Value::is_object) {
            set_path(obj, "model.quantiles", json!(q))?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut doc = load_doc("synth", &a.common)?;
            set_opt(&mut doc, "synth.seed", &a.seed)?;
            execute(doc, &a.common.out)
        }
        Command::Train(a) => {
            let mut doc = load_doc("train", &a.common)?;
            set_opt(&mut doc, "data", &a.data)?;
            set_opt(&mut doc, "city", &a.city)?;
            set_opt(&mut doc, "train.seed", &a.seed)?;
            set_quantiles(&mut doc, &a.quantiles)?;
            execute(doc, &a.common.out)
        }
        Command::TrainInterp(a) => {
            let mut doc = load_doc("train-interp", &a.common)?;
            set_opt(&mut doc, "data", &a.data)?;
            set_opt(&mut doc, "city", &a.city)?;
            set_opt(&mut doc, "checkpoint", &a.checkpoint)?;
            set_opt(&mut doc, "train.seed", &a.seed)?;
            set_quantiles(&mut doc, &a.quantiles)?;
            execute(doc, &a.common.out)
        }
        Command::Forecast(a) => {
            let mut doc = load_doc("forecast", &a.common)?;
            set_opt(&mut doc, "data", &a.data)?;
            set_opt(&mut doc, "city", &a.city)?;
            set_opt(&mut doc, "checkpoint", &a.checkpoint)?;
            set_opt(&mut doc, "anchor_hour", &a.anchor)?;
            set_opt(&mut doc, "steps", &a.steps)?;
            execute(doc, &a.common.out)
        }
        Command::Evaluate(a) => {
            let mut doc = load_doc("evaluate", &a.common)?;
            set_opt(&mut doc, "data", &a.data)?;
            set_opt(&mut doc, "city", &a.city)?;
            set_opt(&mut doc, "checkpoint", &a.checkpoint)?;
            set_opt(&mut doc, "steps", &a.steps)?;
            execute(doc, &a.common.out)
        }
        Command::Ablate(a) => {
            let mut doc = load_doc("ablate", &a.common)?;
            set_opt(&mut doc, "data", &a.data)?;
            set_opt(&mut doc, "city", &a.city)?;
            set_opt(&mut doc, "arms", &a.arms)?;
            if let Some(s) = a.seed {
                set_path(&mut doc, "seeds", json!([s, s + 1, s + 2]))?;
            }
            set_quantiles(&mut doc, &a.quantiles)?;
            execute(doc, &a.common.out)
        }
        Command::Gradcheck(a) => {
            let mut doc = load_doc("gradcheck", &a.common)?;
            set_opt(&mut doc, "seed", &a.seed)?;
            execute(doc, &a.common.out)
        }
        Command::Plot(a) => {
            let mut doc = load_doc("plot", &a.common)?;
            set_opt(&mut doc, "report", &a.report)?;
            execute(doc, &a.common.out)
        }
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    if out.exists() {
        if !out.is_dir() || fs::read_dir(out)?.next().is_some() {
            return Err(Error::InvalidInput(format!(
                "output directory {} must be empty or absent",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)?;
    }
    Ok(())
}

fn execute(doc: Map<String, Value>, out: &Path) -> Result<()> {
    let cfg = parse_run_config(&Value::Object(doc).to_string())?;
    prepare_out(out)?;
    let mut log = Vec::new();
    let resolved = match cfg {
        RunConfig::Synth(r) => exec::synth(r, out, &mut log)?,
        RunConfig::Train(r) => exec::train(r, out, &mut log)?,
        RunConfig::TrainInterp(r) => exec::train_interp(r, out, &mut log)?,
        RunConfig::Forecast(r) => exec::forecast(r, out, &mut log)?,
        RunConfig::Evaluate(r) => exec::evaluate(r, out, &mut log)?,
        RunConfig::Ablate(r) => exec::ablate(r, out, &mut log)?,
        RunConfig::Gradcheck(r) => exec::gradcheck(r, out, &mut log)?,
        RunConfig::Plot(r) => exec::plot(r, out, &mut log)?,
    };
    fs::write(out.join("config.json"), resolved.to_json()?)?;
    log.push(format!("done: {}", resolved.command()));
    fs::write(out.join("run.log"), log.join("\n") + "\n")?;
    Ok(())
}
