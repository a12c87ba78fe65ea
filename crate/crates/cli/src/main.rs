//! `prompate`: generate data, pre-train the source model, run experiments
//! and sweeps, and compute privacy budgets from the command line.
//!
//! Exit status is 0 on success, 1 for configuration or validation errors and
//! 2 for failures while running.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use prompate::accountant::{default_orders, DEFAULT_DELTA, rdp_to_dp, LedgerMode, PrivacyLedger};
use prompate::data::{save_labels, save_source, save_tensor, Dataset};
use prompate::harness::{
    parse_scalar, round_to, run_experiment, run_sweep, set_dotted, target_splits,
    train_source_section, ExperimentConfig, ExperimentReport, HarnessError, RunOptions,
};

const SEED_ENV: &str = "PROMPATE_SEED";

#[derive(Parser, Debug)]
#[command(name = "prompate", version, about = "Prompted teacher ensembles with private aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML or JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the config is read, e.g. `aggregator.threshold=480`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; beats the config file and PROMPATE_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the target splits of a config as PTNS files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the source model and save it as a checkpoint directory.
    TrainSource {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "source")]
        out: PathBuf,
    },
    /// Run one experiment and print its report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: one per logical core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// JSONL stream of aggregator decisions.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dotted key or alias (masked, rescale, map_kind, threshold, ...).
        #[arg(long)]
        axis: String,
        /// JSON array, or comma-separated scalars.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append one CSV row per report.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Privacy budget of a ledger given by flags or a TOML/JSON file.
    Account(AccountArgs),
    /// Audit a saved report and print it.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Ledger parameters. Flags override the file; sigma1 defaults to 1 and is
/// ignored in paper-simple mode.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AccountArgs {
    /// File with any of the keys below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    queries: Option<u64>,
    #[arg(long)]
    answered: Option<u64>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Default 1e-5.
    #[arg(long)]
    delta: Option<f64>,
    /// Default 1.
    #[arg(long)]
    sensitivity: Option<f64>,
    /// Default per-step.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(ValueEnum, Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    PerStep,
    PaperSimple,
}

/// Error with the exit status it maps to.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime(context: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", context.display()))
}

/// File, then environment seed if the file has none, then `--set`, then `--seed`.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let document = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::parse_document(&text, path)?
        }
        None => Value::Object(Map::new()),
    };
    let file_has_seed = document.get("master_seed").is_some();
    let mut tree = ExperimentConfig::from_value(document)?.to_value();
    if !file_has_seed {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Failure::Config(format!("{SEED_ENV}: {raw:?} is not an unsigned integer")))?;
            tree["master_seed"] = json!(seed);
        }
    }
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set {item:?}: expected KEY=VALUE")))?;
        set_dotted(&mut tree, key.trim(), parse_scalar(value.trim()))?;
    }
    if let Some(seed) = args.seed {
        tree["master_seed"] = json!(seed);
    }
    let config = ExperimentConfig::from_value(tree)?;
    config.validate()?;
    Ok(config)
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, format!("{text}\n")).map_err(|e| runtime(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_split(dir: &Path, name: &str, data: &Dataset) -> Result<Value, Failure> {
    let images = format!("{name}_images.ptns");
    let labels = format!("{name}_labels.ptns");
    save_tensor(&dir.join(&images), data.images()).map_err(|e| Failure::Runtime(e.to_string()))?;
    save_labels(&dir.join(&labels), data.labels()).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(json!({
        "images": images,
        "labels": labels,
        "count": data.len(),
        "split": data.split(),
        "provenance": data.provenance(),
    }))
}

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let config = load_config(args)?;
    let splits = target_splits(&config)?;
    fs::create_dir_all(out).map_err(|e| runtime(out, e))?;
    let manifest = json!({
        "master_seed": config.master_seed,
        "target": config.target,
        "splits": {
            "private": write_split(out, "private", &splits.private)?,
            "public": write_split(out, "public", &splits.public)?,
            "test": write_split(out, "test", &splits.test)?,
        },
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let path = out.join("manifest.json");
    fs::write(&path, format!("{text}\n")).map_err(|e| runtime(&path, e))?;
    println!("{text}");
    Ok(())
}

fn train_source_cmd(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let config = load_config(args)?;
    let model = train_source_section(&config.source)?;
    let manifest = save_source(out, &model, config.source.train.seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serialises"));
    Ok(())
}

fn run_cmd(args: &ConfigArgs, out: Option<&Path>, workers: usize, audit: Option<&Path>) -> Result<(), Failure> {
    let config = load_config(args)?;
    let mut audit_file = match audit {
        Some(path) => Some(BufWriter::new(fs::File::create(path).map_err(|e| runtime(path, e))?)),
        None => None,
    };
    let options = RunOptions {
        workers,
        audit: audit_file.as_mut().map(|w| w as &mut (dyn Write + Send)),
    };
    let report = run_experiment(&config, options)?;
    if let (Some(mut w), Some(path)) = (audit_file, audit) {
        w.flush().map_err(|e| runtime(path, e))?;
    }
    emit(&report.to_json(), out)
}

fn parse_values(raw: &str) -> Result<Vec<Value>, Failure> {
    let raw = raw.trim();
    if raw.starts_with('[') {
        match serde_json::from_str::<Value>(raw) {
            Ok(Value::Array(items)) if !items.is_empty() => Ok(items),
            _ => Err(Failure::Config(format!("--values: {raw:?} is not a non-empty JSON array"))),
        }
    } else {
        let items: Vec<Value> = raw.split(',').map(|v| parse_scalar(v.trim())).collect();
        if raw.is_empty() {
            return Err(Failure::Config("--values: no values given".into()));
        }
        Ok(items)
    }
}

const CSV_COLUMNS: [&str; 11] = [
    "sweep_axis",
    "sweep_value",
    "epsilon",
    "queries",
    "answered_queries",
    "answer_accuracy_pct",
    "threshold",
    "sigma1",
    "sigma2",
    "accuracy_mean_pct",
    "accuracy_std_pct",
];

fn csv_cell(v: &Value) -> String {
    let text = match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text
    }
}

fn append_csv(path: &Path, reports: &[ExperimentReport]) -> Result<(), Failure> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| runtime(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&CSV_COLUMNS.join(","));
        text.push('\n');
    }
    for report in reports {
        let value = serde_json::to_value(report).expect("report serialises");
        let row: Vec<String> = CSV_COLUMNS.iter().map(|c| csv_cell(&value[*c])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| runtime(path, e))
}

fn sweep_cmd(
    args: &ConfigArgs,
    axis: &str,
    values: &str,
    out: Option<&Path>,
    csv: Option<&Path>,
    workers: usize,
) -> Result<(), Failure> {
    let config = load_config(args)?;
    let values = parse_values(values)?;
    let reports = run_sweep(&config, axis, &values, workers)?;
    if let Some(path) = csv {
        append_csv(path, &reports)?;
    }
    let all = serde_json::to_value(&reports).expect("reports serialise");
    emit(&serde_json::to_string_pretty(&all).expect("value serialises"), out)
}

fn account_cmd(flags: &AccountArgs) -> Result<(), Failure> {
    let file = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            let tree = ExperimentConfig::parse_document(&text, path)?;
            serde_path_to_error::deserialize::<_, AccountArgs>(tree)
                .map_err(|e| Failure::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?
        }
        None => AccountArgs::default(),
    };
    let required = |flag: Option<u64>, from_file: Option<u64>, key: &str| {
        flag.or(from_file)
            .ok_or_else(|| Failure::Config(format!("{key}: required (flag or config file)")))
    };
    let queries = required(flags.queries, file.queries, "queries")?;
    let answered = required(flags.answered, file.answered, "answered")?;
    let sigma2 = flags
        .sigma2
        .or(file.sigma2)
        .ok_or_else(|| Failure::Config("sigma2: required (flag or config file)".into()))?;
    let sigma1 = flags.sigma1.or(file.sigma1).unwrap_or(1.0);
    let delta = flags.delta.or(file.delta).unwrap_or(DEFAULT_DELTA);
    let sensitivity = flags.sensitivity.or(file.sensitivity).unwrap_or(1.0);
    let mode = match flags.mode.or(file.mode).unwrap_or(Mode::PerStep) {
        Mode::PerStep => LedgerMode::PerStep,
        Mode::PaperSimple => LedgerMode::PaperSimple,
    };
    let ledger = PrivacyLedger::new(sigma1, sigma2, mode)
        .with_counts(queries, answered)
        .with_sensitivity(sensitivity);
    let budget = rdp_to_dp(&ledger, delta, &default_orders()).map_err(|e| Failure::Config(e.to_string()))?;
    let out = json!({
        "epsilon": round_to(budget.epsilon, 4),
        "alpha_star": budget.alpha_star.get(),
        "delta": delta,
        "mode": mode.as_str(),
        "threshold_checks": queries,
        "answered": answered,
        "sigma1": sigma1,
        "sigma2": sigma2,
        "sensitivity": sensitivity,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("value serialises"));
    Ok(())
}

fn report_cmd(input: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(input)
        .map_err(|e| Failure::Config(format!("cannot read report {}: {e}", input.display())))?;
    let report = ExperimentReport::from_json(&text).map_err(|e| match e {
        HarnessError::Config(m) => Failure::Config(format!("{}: {m}", input.display())),
        other => Failure::Config(format!("{}: {other}", input.display())),
    })?;
    println!("{}", report.to_json());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::TrainSource { config, out } => train_source_cmd(&config, &out),
        Command::Run {
            config,
            out,
            workers,
            audit,
        } => run_cmd(&config, out.as_deref(), workers, audit.as_deref()),
        Command::Sweep {
            config,
            axis,
            values,
            out,
            csv,
            workers,
        } => sweep_cmd(&config, &axis, &values, out.as_deref(), csv.as_deref(), workers),
        Command::Account(args) => account_cmd(&args),
        Command::Report { input } => report_cmd(&input),
    }
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
