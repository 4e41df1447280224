use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use geoaqp::dataset::{load_csv, EncodedDataset, SchemaConfig};
use geoaqp::eval::{generate_workload, run_eval, Estimator, ModelEstimator, SampleEstimator, Workload, WorkloadConfig};
use geoaqp::model::{io, DensityModel};
use geoaqp::query::{aggregate, Query};
use geoaqp::synth::{self, SynthConfig};
use geoaqp::trainer::{train, TrainConfig};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::server::{router, ServiceState};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "geoaqp", version, about = "Approximate geospatial aggregates from a learned density model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a CSV file.
    Train(TrainArgs),
    /// Answer one query (JSON file, `-` for stdin).
    Query(QueryArgs),
    /// Score the model and sampling baselines on a workload.
    Eval(EvalArgs),
    /// Serve the HTTP query API.
    Serve(ServeArgs),
    /// Generate a query workload with exact answers.
    Workload(WorkloadArgs),
    /// Write the synthetic taxi-like dataset and its schema.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Schema config (attributes, domain, CSV column mapping).
    #[arg(long)]
    pub schema: PathBuf,
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Training config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: DataArgs,
    /// Generate the workload from this config.
    #[arg(long, conflicts_with = "workload", required_unless_present = "workload")]
    pub workload_config: Option<PathBuf>,
    /// Or read a workload written by `workload`.
    #[arg(long)]
    pub workload: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling rates of the baselines.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.005])]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub sample_seed: u64,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw data for comparison mode.
    #[arg(long, requires = "schema")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub schema: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01])]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub sample_seed: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the matching schema config.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = if path == Path::new("-") {
        std::io::read_to_string(std::io::stdin())
    } else {
        std::fs::read_to_string(path)
    }
    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    path.as_deref().map(read_json).unwrap_or_else(|| Ok(T::default()))
}

pub fn load_data(schema: &Path, data: &Path) -> Result<EncodedDataset, CliError> {
    let config: SchemaConfig = read_json(schema)?;
    let schema = config.schema()?;
    let data = load_csv(data, &schema, &config.columns)?;
    if data.dropped.dropped > 0 {
        log::warn!("dropped {} rows: {:?}", data.dropped.dropped, data.dropped.reasons);
    }
    Ok(data)
}

pub fn load_model(path: &Path) -> Result<DensityModel, CliError> {
    io::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_compatible(model: &DensityModel, data: &EncodedDataset) -> Result<(), CliError> {
    if model.schema != data.schema {
        return Err(CliError::Config("the data schema differs from the model's".into()));
    }
    Ok(())
}

fn samples(data: &EncodedDataset, rates: &[f64], seed: u64) -> Result<Vec<SampleEstimator>, CliError> {
    rates
        .iter()
        .map(|&r| SampleEstimator::new(data, r, seed).map_err(CliError::from))
        .collect()
}

fn print_line(out: &mut impl Write, value: &serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{value}").map_err(|e| CliError::Data(e.to_string()))
}

pub fn run_train(args: &TrainArgs, out: &mut impl Write) -> Result<(), CliError> {
    let config: TrainConfig = read_or_default(&args.config)?;
    let data = load_data(&args.input.schema, &args.input.data)?;
    print_line(out, &json!({ "event": "loaded", "rows": data.n_total(), "dropped": data.dropped.dropped }))?;
    let mut write_err = None;
    let (model, report) = train(&data, &config, |e| {
        if let Err(err) = print_line(out, &json!({ "event": "epoch", "record": e })) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let bytes = io::save(&model, &args.out)?;
    print_line(
        out,
        &json!({
            "event": "done",
            "best_epoch": report.best_epoch,
            "stopped_epoch": report.stopped_epoch,
            "best_probe_nll": report.best_probe_nll,
            "wall_time_s": report.wall_time_s,
            "model_bytes": bytes,
            "warnings": report.warnings,
        }),
    )
}

pub fn run_query(args: &QueryArgs, out: &mut impl Write) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let query: Query = read_json(&args.query)?;
    let result = aggregate(&model, &query)?;
    let text = serde_json::to_string_pretty(&result).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| CliError::Data(e.to_string()))
}

pub fn run_eval_cmd(args: &EvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let data = load_data(&args.input.schema, &args.input.data)?;
    check_compatible(&model, &data)?;
    let workload = match (&args.workload, &args.workload_config) {
        (Some(path), _) => Workload::read_jsonl(path)?,
        (None, Some(cfg)) => generate_workload(&data, &read_json::<WorkloadConfig>(cfg)?, args.seed)?,
        (None, None) => return Err(CliError::Config("need --workload or --workload-config".into())),
    };
    let me = ModelEstimator::new(&model)?;
    let baselines = samples(&data, &args.rates, args.sample_seed)?;
    let mut estimators: Vec<&dyn Estimator> = vec![&me];
    estimators.extend(baselines.iter().map(|s| s as &dyn Estimator));
    let report = run_eval(&estimators, &workload);
    report.write_dir(&args.out)?;
    write!(out, "{}", report.to_text()).map_err(|e| CliError::Data(e.to_string()))
}

pub fn run_workload(args: &WorkloadArgs, out: &mut impl Write) -> Result<(), CliError> {
    let config: WorkloadConfig = read_or_default(&args.config)?;
    let data = load_data(&args.input.schema, &args.input.data)?;
    let workload = generate_workload(&data, &config, args.seed)?;
    workload.write_jsonl(&args.out)?;
    print_line(out, &json!({ "queries": workload.entries.len(), "out": args.out }))
}

pub fn run_synth(args: &SynthArgs, out: &mut impl Write) -> Result<(), CliError> {
    let config: SynthConfig = read_or_default(&args.config)?;
    let trips = synth::trips(&config)?;
    synth::write_csv(&trips, &args.out)?;
    if let Some(path) = &args.schema_out {
        let text = serde_json::to_string_pretty(&synth::schema_config(&config)).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    print_line(out, &json!({ "rows": trips.len(), "out": args.out }))
}

pub fn run_serve(args: &ServeArgs, threads: Option<usize>) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let baselines = match (&args.schema, &args.data) {
        (Some(schema), Some(data)) => {
            let data = load_data(schema, data)?;
            check_compatible(&model, &data)?;
            samples(&data, &args.rates, args.sample_seed)?
        }
        _ => Vec::new(),
    };
    let state = Arc::new(ServiceState::new(model, baselines)?);
    let mut runtime = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        runtime.worker_threads(n).max_blocking_threads(n);
    }
    let runtime = runtime.enable_all().build().map_err(|e| CliError::Config(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.listen)
            .await
            .map_err(|e| CliError::Config(format!("cannot listen on {}: {e}", args.listen)))?;
        eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::Config(e.to_string()))?);
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Data(e.to_string()))
    })
}

pub fn run(cli: &Cli, threads: Option<usize>) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Train(a) => run_train(a, &mut out),
        Command::Query(a) => run_query(a, &mut out),
        Command::Eval(a) => run_eval_cmd(a, &mut out),
        Command::Serve(a) => {
            drop(out);
            run_serve(a, threads)
        }
        Command::Workload(a) => run_workload(a, &mut out),
        Command::Synth(a) => run_synth(a, &mut out),
    }
}
