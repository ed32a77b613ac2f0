//! `sparse-npls`: generate synthetic streams, replay λ grids, inspect models.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use sparse_npls::io::{load_model, save_model};
use sparse_npls::stream::{format_zero_slices, metrics_jsonl, parse_zero_slices, percentile, read_stream, write_stream, GridResult};
use sparse_npls::{
    replay, synth_generate, AlsConfig, FormatError, PlsError, ReplayConfig, StreamError, SynthConfig,
};

use config::{grid_label, parse_grid, parse_list, Settings};

const THREADS_ENV: &str = "SPARSE_NPLS_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

fn pls_code(e: &PlsError) -> u8 {
    match e {
        PlsError::InvalidForgetting(_)
        | PlsError::ZeroComponents
        | PlsError::ModeOutOfRange(_)
        | PlsError::LatentOutOfRange { .. } => 2,
        PlsError::EmptyBatch
        | PlsError::BatchLength { .. }
        | PlsError::InputDims { .. }
        | PlsError::OutputDims { .. }
        | PlsError::NonFinite
        | PlsError::Tensor(_) => 3,
        PlsError::NoData | PlsError::Parafac(_) => 4,
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        let code = match &e {
            StreamError::InvalidConfig { .. } | StreamError::PrefixTooLong { .. } | StreamError::Threshold(_) => 2,
            StreamError::Inconsistent(_) | StreamError::Format(_) | StreamError::Tensor(_) => 3,
            StreamError::MetricUndefined | StreamError::MetricLength(..) => 4,
            StreamError::GridPoint { source, .. } | StreamError::Pls(source) => pls_code(source),
        };
        Self { code, message: e.to_string() }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "sparse-npls", version, about = "Streaming sparse N-way PLS: synthetic data, grid replays, model reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stream (manifest, batches, true coefficients).
    Generate(GenerateArgs),
    /// Train on a stream prefix and score the tail for every grid point.
    Replay(ReplayArgs),
    /// Print a saved model's shape, penalty, latent selection and sparsity.
    Inspect {
        model: PathBuf,
    },
}

#[derive(clap::Args)]
struct GenerateArgs {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Input mode sizes, e.g. 8,10,5.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    outputs: Option<String>,
    #[arg(long)]
    batches: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Planted zero slices (1-based), e.g. "mode1:3-8;mode3:1,4".
    #[arg(long)]
    zero_slices: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Noise std relative to the signal.
    #[arg(long, conflicts_with = "snr")]
    noise: Option<String>,
    /// Signal-to-noise power ratio (alternative to --noise).
    #[arg(long)]
    snr: Option<String>,
    /// Per-batch rotation angle of the true coefficients (radians).
    #[arg(long)]
    drift: Option<String>,
    /// Inputs span this many rank-1 patterns (noiseless latent structure).
    #[arg(long)]
    latent_rank: Option<String>,
    /// True coefficients are a sum of this many rank-1 terms.
    #[arg(long)]
    coef_rank: Option<String>,
}

#[derive(clap::Args)]
struct ReplayArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stream directory written by `generate`.
    #[arg(long)]
    stream: Option<String>,
    /// Grid of norms and lambdas, e.g. "l1:0..1:0.1;l0:0,0.05".
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    f_max: Option<String>,
    /// Forgetting factor in [0, 1].
    #[arg(long)]
    mu: Option<String>,
    /// Number of leading batches used for training.
    #[arg(long)]
    train_prefix: Option<String>,
    /// 1-based input modes carrying the penalty, e.g. 1 or 1,3.
    #[arg(long)]
    penalized_modes: Option<String>,
    /// Evaluation batches per session (default: the whole tail).
    #[arg(long)]
    session_length: Option<String>,
    /// Keep training on evaluation batches after scoring them.
    #[arg(long)]
    adapt: bool,
    /// ALS relative-change tolerance.
    #[arg(long)]
    tolerance: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    /// Save each grid point's final model here.
    #[arg(long)]
    models_dir: Option<String>,
    /// Metrics JSON-lines file.
    #[arg(long)]
    out: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Replay(a) => run_replay(a),
        Command::Inspect { model } => inspect(&model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref())?;
    let out: String = s.required("out", a.out.as_deref())?;
    let dims: Vec<usize> = s
        .parse("dims", a.dims.as_deref(), parse_list)?
        .ok_or_else(|| CliError::invalid("dims: required, e.g. --dims 8,10,5"))?;
    let outputs = s.value("outputs", a.outputs.as_deref())?.unwrap_or(1);
    let batches = s.value("batches", a.batches.as_deref())?.unwrap_or(20);
    let batch_size = s.value("batch_size", a.batch_size.as_deref())?.unwrap_or(50);
    let seed = s.value("seed", a.seed.as_deref())?.unwrap_or(0);
    let mut cfg = SynthConfig::new(dims, outputs, batch_size, batches, seed);
    if let Some(text) = s.raw("zero_slices", a.zero_slices.as_deref()) {
        cfg.zero_slices = parse_zero_slices(&text, cfg.dims.len()).map_err(|e| CliError::invalid(format!("zero_slices: {e}")))?;
    }
    let noise: Option<f64> = s.value("noise", a.noise.as_deref())?;
    let snr: Option<f64> = s.value("snr", a.snr.as_deref())?;
    cfg.noise = match (noise, snr) {
        (Some(_), Some(_)) => return Err(CliError::invalid("noise: give either noise or snr, not both")),
        (_, Some(snr)) if !(snr > 0.0) => return Err(CliError::invalid(format!("snr: {snr} must be > 0"))),
        (_, Some(snr)) => 1.0 / snr.sqrt(),
        (Some(n), None) => n,
        (None, None) => 0.1,
    };
    cfg.drift = s.value("drift", a.drift.as_deref())?.unwrap_or(0.0);
    cfg.latent_rank = s.value("latent_rank", a.latent_rank.as_deref())?;
    cfg.coef_rank = s.value("coef_rank", a.coef_rank.as_deref())?;
    s.finish()?;

    cfg.validate()?;
    let stream = synth_generate(&cfg)?;
    write_stream(&out, &cfg, &stream)?;

    let dims: Vec<String> = cfg.dims.iter().map(usize::to_string).collect();
    let planted: Vec<String> = cfg
        .zero_slices
        .iter()
        .zip(&cfg.dims)
        .enumerate()
        .map(|(m, (z, d))| format!("mode{}={:.4}", m + 1, z.len() as f64 / *d as f64))
        .collect();
    let zero = format_zero_slices(&cfg.zero_slices);
    println!(
        "generated {} batches x {} samples, dims {} -> {}, seed {}, noise {}, zero slices [{}], planted sparse_idx {} -> {}",
        cfg.batches,
        cfg.batch_size,
        dims.join("x"),
        cfg.outputs,
        cfg.seed,
        cfg.noise,
        if zero.is_empty() { "none" } else { &zero },
        planted.join(" "),
        out
    );
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::invalid(format!("{THREADS_ENV}: {v:?} is not a positive integer"))),
        },
    }
}

fn run_replay(a: ReplayArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref())?;
    let stream_dir: String = s.required("stream", a.stream.as_deref())?;
    let grid = s
        .parse("grid", a.grid.as_deref(), parse_grid)?
        .unwrap_or_else(|| parse_grid("l1:0..1:0.1").expect("default grid"));
    let f_max: usize = s.value("f_max", a.f_max.as_deref())?.unwrap_or(5);
    let mu: f64 = s.value("mu", a.mu.as_deref())?.unwrap_or(1.0);
    let train_prefix: Option<usize> = s.value("train_prefix", a.train_prefix.as_deref())?;
    let modes: Vec<usize> = s
        .parse("penalized_modes", a.penalized_modes.as_deref(), parse_list)?
        .unwrap_or_else(|| vec![1]);
    let session_length: Option<usize> = s.value("session_length", a.session_length.as_deref())?;
    let adapt = s.switch("adapt", a.adapt)?;
    let defaults = AlsConfig::default();
    let tolerance: f64 = s.value("tolerance", a.tolerance.as_deref())?.unwrap_or(defaults.tolerance);
    let max_iterations: usize = s
        .value("max_iterations", a.max_iterations.as_deref())?
        .unwrap_or(defaults.max_iterations);
    let models_dir: Option<String> = s.value("models_dir", a.models_dir.as_deref())?;
    let out: String = s.value("out", a.out.as_deref())?.unwrap_or_else(|| "metrics.jsonl".into());
    s.finish()?;

    if f_max == 0 {
        return Err(CliError::invalid("f_max: must be >= 1"));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(CliError::invalid(format!("mu: {mu} outside [0, 1]")));
    }
    if modes.contains(&0) {
        return Err(CliError::invalid("penalized_modes: modes are 1-based"));
    }
    if session_length == Some(0) {
        return Err(CliError::invalid("session_length: must be >= 1"));
    }
    let threads = threads_from_env()?;

    let (manifest, batches) = read_stream(&stream_dir)?;
    let train_prefix = train_prefix.unwrap_or((batches.len() / 2).max(1));
    let mut cfg = ReplayConfig::new(grid.clone(), f_max, mu, train_prefix);
    cfg.penalized_modes = modes.iter().map(|m| m - 1).collect();
    cfg.session_length = session_length;
    cfg.adapt = adapt;
    cfg.threads = threads;
    cfg.als = AlsConfig {
        tolerance,
        max_iterations,
        ..defaults
    };
    cfg.als.validate().map_err(|e| CliError::invalid(format!("tolerance/max_iterations: {e}")))?;

    let labels: Vec<String> = grid.iter().map(grid_label).collect();
    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    header.insert("command".into(), "replay".into());
    header.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    header.insert("stream".into(), stream_dir.clone().into());
    header.insert(
        "stream_manifest".into(),
        Value::Object(manifest.extra.iter().map(|(k, v)| (k.clone(), Value::from(v.clone()))).collect()),
    );
    header.insert("stream_batches".into(), batches.len().into());
    header.insert("grid".into(), labels.clone().into());
    header.insert("f_max".into(), f_max.into());
    header.insert("mu".into(), mu.into());
    header.insert("train_prefix".into(), train_prefix.into());
    header.insert("penalized_modes".into(), modes.clone().into());
    header.insert("session_length".into(), session_length.map_or(Value::Null, Value::from));
    header.insert("adapt".into(), adapt.into());
    header.insert("tolerance".into(), tolerance.into());
    header.insert("max_iterations".into(), max_iterations.into());
    header.insert("models_dir".into(), models_dir.clone().map_or(Value::Null, Value::from));
    header.insert("out".into(), out.clone().into());
    header.insert(
        "config".into(),
        s.path().map_or(Value::Null, |p| Value::from(p.display().to_string())),
    );

    println!(
        "stream {stream_dir} (seed {}), {} batches, train prefix {train_prefix}, f_max {f_max}, mu {mu}",
        manifest.extra.get("seed").map_or("?", String::as_str),
        batches.len()
    );
    println!("grid {}", labels.join(" "));

    let results = replay(&batches, &cfg)?;
    write_file(&out, metrics_jsonl(&header, &results).as_bytes())?;
    if let Some(dir) = &models_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{dir}: {e}")))?;
        for r in &results {
            if let Some(model) = &r.model {
                let path = Path::new(dir).join(format!("model_{}_lambda{}.nplsm", r.point.order, r.point.lambda));
                save_model(&path, model)?;
            }
        }
    }
    print_table(&results, batches[0].x[0].order());
    println!("metrics -> {out}");
    Ok(())
}

fn write_file(path: &str, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = Path::new(path).parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("{path}: {e}")))
}

fn print_table(results: &[GridResult], modes: usize) {
    let sparse_cols: Vec<String> = (1..=modes).map(|m| format!("sparse_idx_mode_{m}")).collect();
    println!("{:<6} {:>8} {:>4} {:>12}  {}", "p", "lambda", "f*", "dotp_median", sparse_cols.join("  "));
    for r in results {
        let mut cos: Vec<f64> = r
            .records
            .iter()
            .filter_map(|rec| rec.dotp.as_ref())
            .flat_map(|d| d.samples.iter().copied())
            .collect();
        cos.sort_by(f64::total_cmp);
        let median = if cos.is_empty() { "n/a".to_string() } else { format!("{:.4}", percentile(&cos, 0.5)) };
        let (f_star, sparse) = match &r.model {
            Some(m) => (
                m.f_star.to_string(),
                (0..modes)
                    .map(|k| format!("{:>w$.4}", m.sparse_idx(k).unwrap_or(f64::NAN), w = sparse_cols[k].len()))
                    .collect::<Vec<_>>()
                    .join("  "),
            ),
            None => ("-".into(), String::new()),
        };
        println!("{:<6} {:>8} {:>4} {:>12}  {}", r.point.order.label(), r.point.lambda, f_star, median, sparse);
    }
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let model = load_model(path)?;
    println!("model: {}", path.display());
    print!("{}", model.summary());
    if model.components.iter().any(|c| c.bias.iter().any(|b| !b.is_finite())) {
        return Err(CliError::numerical("model contains non-finite coefficients"));
    }
    Ok(())
}
