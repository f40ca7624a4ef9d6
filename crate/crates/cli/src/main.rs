mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use tc4tl::event::Grain;
use tc4tl::features::{fit_scalers, write_feature_tsv, DeviceTiers, DEFAULT_DEVICE_TIERS};
use tc4tl::gbm::GbmError;
use tc4tl::ingest::{load_dataset, load_events, load_key, load_system_output, write_system_output, Dataset};
use tc4tl::mlp::MlpError;
use tc4tl::pathloss::{
    calibrate_grid, formula_predict, parse_calibration, write_calibration, CalibrationParams,
    ParamsByGrain, PathLossError,
};
use tc4tl::pipeline::{
    features_for, predict_pipeline, remap_devices, train_pipeline, ModelBundle, ModelKind,
    PipelineConfig, PipelineError, TrainReport,
};
use tc4tl::scorer::{score_run, ScoreError};
use tc4tl::synthgen::{generate_dataset, SynthSpec};

use config::FileConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "tc4tl", version, about = "BLE proximity detection: calibrate, train, predict, score")]
struct Cli {
    /// Seed for every random stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Grid-search path-loss constants per grain.
    Calibrate(CalibrateArgs),
    /// Write the feature matrix of a dataset as TSV.
    Extract(ExtractArgs),
    /// Train an MLP or GBM model.
    Train(TrainArgs),
    /// Predict distances for every event in a directory.
    Predict(PredictArgs),
    /// Score a system output against a key.
    Score(ScoreArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Benchmark,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Starting spec before config and flags are applied.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    n_events: Option<usize>,
    #[arg(long)]
    grain_mix: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    tx_power_gain: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GrainArg {
    Fine,
    Coarse,
    Both,
}

impl GrainArg {
    fn grains(self) -> Vec<Grain> {
        match self {
            GrainArg::Fine => vec![Grain::Fine],
            GrainArg::Coarse => vec![Grain::Coarse],
            GrainArg::Both => Grain::BOTH.to_vec(),
        }
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Directory of training event files.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    grain: GrainArg,
    /// Output directory; receives `<grain>.cal`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tx_min: Option<f64>,
    #[arg(long)]
    tx_max: Option<f64>,
    #[arg(long)]
    tx_step: Option<f64>,
    #[arg(long)]
    n_min: Option<f64>,
    #[arg(long)]
    n_max: Option<f64>,
    #[arg(long)]
    n_step: Option<f64>,
    /// Also write the full objective surface as `<grain>_surface.tsv`.
    #[arg(long)]
    surface: bool,
}

#[derive(Args, Debug, Clone)]
struct ParamArgs {
    /// Fine-grain calibration file (default: shipped constants).
    #[arg(long)]
    fine_cal: Option<PathBuf>,
    /// Coarse-grain calibration file (default: shipped constants).
    #[arg(long)]
    coarse_cal: Option<PathBuf>,
    /// Use the single global constants for both grains.
    #[arg(long, conflicts_with_all = ["fine_cal", "coarse_cal"])]
    global: bool,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reuse this model's scalers, calibration and device vocabulary instead
    /// of fitting scalers on `--events`.
    #[arg(long, conflicts_with_all = ["fine_cal", "coarse_cal", "global"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Mlp,
    Gbm,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Model bundle path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
    /// GBM: search the hyperparameter grid instead of one config.
    #[arg(long)]
    grid: bool,
    /// GBM: keep the shipped binary threshold instead of tuning it.
    #[arg(long)]
    no_tune_threshold: bool,
    /// MLP: number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    events: PathBuf,
    /// System-output TSV path.
    #[arg(long)]
    out: PathBuf,
    /// Trained model bundle; without it the path-loss formula is used.
    #[arg(long, conflicts_with_all = ["fine_cal", "coarse_cal", "global"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// System-output TSV.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Machine-readable report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    tool_version: &'static str,
    seed: u64,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    duration_s: f64,
}

struct Run {
    name: &'static str,
    seed: u64,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(name: &'static str, seed: u64) -> Self {
        Run {
            name,
            seed,
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn write(&mut self, path: &Path, contents: &str) -> anyhow::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes the manifest next to `anchor` (inside it when it is a directory).
    fn finish(self, anchor: &Path, started: Instant) -> anyhow::Result<()> {
        let path = if anchor.is_dir() {
            anchor.join("manifest.json")
        } else {
            let mut name = anchor.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            anchor.with_file_name(name)
        };
        let manifest = RunManifest {
            command: self.name.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            duration_s: started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_params(args: &ParamArgs, run: &mut Run) -> anyhow::Result<ParamsByGrain> {
    if args.global {
        return Ok(ParamsByGrain::global());
    }
    let mut params = ParamsByGrain::shipped_default();
    for (path, grain) in [(&args.fine_cal, Grain::Fine), (&args.coarse_cal, Grain::Coarse)] {
        let Some(path) = path else { continue };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cal: CalibrationParams =
            parse_calibration(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cal.grain != grain {
            bail!("{} holds {} constants, expected {grain}", path.display(), cal.grain);
        }
        match grain {
            Grain::Fine => params.fine = cal,
            Grain::Coarse => params.coarse = cal,
        }
        run.inputs.push(path.clone());
    }
    Ok(params)
}

fn device_tiers(cfg: &FileConfig) -> anyhow::Result<String> {
    match &cfg.device_tiers {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading tier table {path}")),
        None => Ok(DEFAULT_DEVICE_TIERS.to_string()),
    }
}

fn cmd_synth(args: &SynthArgs, cfg: &FileConfig, seed: Option<u64>) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut spec = match args.preset {
        Preset::Default => cfg.synth.clone(),
        Preset::Benchmark => SynthSpec {
            seed: cfg.synth.seed,
            ..SynthSpec::benchmark()
        },
    };
    if let Some(n) = args.n_events {
        spec.n_events = n;
    }
    if let Some(m) = args.grain_mix {
        spec.grain_mix = m;
    }
    if let Some(s) = args.noise_sigma {
        spec.noise_sigma_db = s;
    }
    if let Some(g) = args.tx_power_gain {
        spec.tx_power_gain = g;
    }
    if let Some(s) = seed.or(cfg.seed) {
        spec.seed = s;
    }
    let layout = generate_dataset(&spec, &args.out)?;
    let mut run = Run::new("synth", spec.seed);
    run.config = serde_json::to_value(&spec)?;
    run.outputs = vec![layout.events_dir, layout.key, layout.debug];
    println!("wrote {} events to {}", spec.n_events, args.out.display());
    run.finish(&args.out, started)
}

fn cmd_calibrate(args: &CalibrateArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut grid = cfg.calibration;
    for (flag, slot) in [
        (args.tx_min, &mut grid.tx_min),
        (args.tx_max, &mut grid.tx_max),
        (args.tx_step, &mut grid.tx_step),
        (args.n_min, &mut grid.n_min),
        (args.n_max, &mut grid.n_max),
        (args.n_step, &mut grid.n_step),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let dataset = load_dataset(&args.train, Some(&args.key))?;
    let mut run = Run::new("calibrate", 0);
    run.inputs = vec![args.train.clone(), args.key.clone()];
    run.config = json!({ "grid": grid, "score": cfg.score, "grains": format!("{:?}", args.grain) });
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for grain in args.grain.grains() {
        let result = calibrate_grid(&dataset, grain, &grid, &cfg.score)?;
        println!(
            "{grain}: tx_ref_dbm={} n_exponent={} objective={:.4}",
            result.best.tx_ref_dbm, result.best.n_exponent, result.objective
        );
        run.write(
            &args.out.join(format!("{grain}.cal")),
            &write_calibration(&result.best, Some(result.objective)),
        )?;
        if args.surface {
            run.write(&args.out.join(format!("{grain}_surface.tsv")), &result.surface_tsv())?;
        }
    }
    run.finish(&args.out, started)
}

fn cmd_extract(args: &ExtractArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut run = Run::new("extract", 0);
    let events = load_events(&args.events)?;
    if events.is_empty() {
        bail!("no event files in {}", args.events.display());
    }
    run.inputs.push(args.events.clone());
    let (fvs, ids) = match &args.model {
        Some(path) => {
            let bundle = load_bundle(path)?;
            run.inputs.push(path.clone());
            let tiers = DeviceTiers::parse(&bundle.device_tiers)?;
            let remapped: Vec<_> = events.iter().map(|e| remap_devices(e, &bundle.known_devices)).collect();
            let fvs = features_for(&remapped, &bundle.params, &bundle.scalers, &tiers)?;
            (fvs, events.iter().map(|e| e.file_id().to_string()).collect::<Vec<_>>())
        }
        None => {
            let params = load_params(&args.params, &mut run)?;
            let tiers = DeviceTiers::parse(&device_tiers(cfg)?)?;
            let scalers = fit_scalers(&events)?;
            run.config = json!({ "params": params, "scalers": scalers });
            let fvs = features_for(&events, &params, &scalers, &tiers)?;
            (fvs, events.iter().map(|e| e.file_id().to_string()).collect())
        }
    };
    let tsv = write_feature_tsv(ids.iter().map(String::as_str).zip(&fvs));
    run.write(&args.out, &tsv)?;
    println!("wrote {} feature rows to {}", fvs.len(), args.out.display());
    run.finish(&args.out, started)
}

fn load_bundle(path: &Path) -> anyhow::Result<ModelBundle> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    ModelBundle::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_train(args: &TrainArgs, cfg: &FileConfig, seed: Option<u64>) -> anyhow::Result<()> {
    let started = Instant::now();
    let seed = seed.or(cfg.seed);
    let mut run = Run::new("train", 0);
    let mut pc = PipelineConfig {
        params: load_params(&args.params, &mut run)?,
        mlp: cfg.mlp.clone(),
        gbm: cfg.gbm.clone(),
        gbm_grid: args.grid.then(|| cfg.gbm_grid.clone()),
        tune_binary_threshold: !args.no_tune_threshold && cfg.tune_binary_threshold.unwrap_or(true),
        device_tiers: device_tiers(cfg)?,
    };
    if let Some(s) = seed {
        pc.mlp.seed = s;
        pc.gbm.seed = s;
    }
    if let Some(e) = args.epochs {
        pc.mlp.epochs = e;
    }
    let dataset = load_dataset(&args.train, Some(&args.key))?;
    if dataset.is_empty() {
        bail!("no event files in {}", args.train.display());
    }
    run.inputs.extend([args.train.clone(), args.key.clone()]);
    let kind = match args.model {
        ModelArg::Mlp => ModelKind::Mlp,
        ModelArg::Gbm => ModelKind::Gbm,
    };
    let (bundle, report) = train_pipeline(&dataset, kind, &pc)?;
    run.seed = match kind {
        ModelKind::Mlp => pc.mlp.seed,
        ModelKind::Gbm => pc.gbm.seed,
    };
    run.config = json!({
        "model": format!("{kind:?}").to_lowercase(),
        "params": pc.params,
        "mlp": pc.mlp,
        "gbm": pc.gbm,
        "gbm_grid": pc.gbm_grid,
        "tune_binary_threshold": pc.tune_binary_threshold,
    });
    run.write(&args.out, &bundle.to_json())?;
    let stem = args.out.with_extension("");
    match &report {
        TrainReport::Mlp(log) => {
            let mut tsv = String::from("epoch\ttrain_loss\tvalidation_loss\n");
            tsv.push_str(&format!("0\t{}\t\n", log.initial_train_loss));
            for e in &log.epochs {
                tsv.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_loss, e.validation_loss));
            }
            run.write(&with_suffix(&stem, "_epochs.tsv"), &tsv)?;
            if let Some(last) = log.epochs.last() {
                println!("mlp: {} epochs, final train loss {:.6}", last.epoch, last.train_loss);
            }
        }
        TrainReport::Gbm(reports) => {
            for r in reports {
                println!(
                    "gbm {}: {} rows, {} rounds kept{}",
                    r.grain,
                    r.rows,
                    r.log.kept_rounds,
                    r.binary_threshold
                        .map_or_else(String::new, |t| format!(", binary threshold {t:.4}"))
                );
                if let Some(lb) = &r.leaderboard {
                    run.write(&with_suffix(&stem, &format!("_{}_leaderboard.tsv", r.grain)), lb)?;
                }
            }
        }
    }
    run.finish(&args.out, started)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    stem.with_file_name(name)
}

fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut run = Run::new("predict", 0);
    let dataset = Dataset::new(load_events(&args.events)?, None)?;
    run.inputs.push(args.events.clone());
    let predictions: BTreeMap<String, f64> = match &args.model {
        Some(path) => {
            let bundle = load_bundle(path)?;
            run.inputs.push(path.clone());
            run.config = json!({ "mode": "model", "kind": bundle.kind() });
            predict_pipeline(&bundle, &dataset.events)?
        }
        None => {
            let params = load_params(&args.params, &mut run)?;
            run.config = json!({ "mode": "formula", "params": params });
            formula_predict(&params, &dataset)?
        }
    };
    run.write(&args.out, &write_system_output(&predictions))?;
    println!("wrote {} predictions to {}", predictions.len(), args.out.display());
    run.finish(&args.out, started)
}

fn cmd_score(args: &ScoreArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut run = Run::new("score", 0);
    let predictions = load_system_output(&args.output)?;
    let key = load_key(&args.key)?;
    run.inputs = vec![args.output.clone(), args.key.clone()];
    run.config = json!({ "score": cfg.score });
    let report = score_run(&predictions, &key, &cfg.score)?;
    print!("{report}");
    let anchor = match &args.report {
        Some(path) => {
            run.write(path, &report.to_key_values())?;
            path.clone()
        }
        None => args.output.clone(),
    };
    run.finish(&anchor, started)
}

fn is_numeric_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(e.downcast_ref::<MlpError>(), Some(MlpError::NonFiniteLoss { .. }))
            || matches!(
                e.downcast_ref::<PipelineError>(),
                Some(PipelineError::Mlp(MlpError::NonFiniteLoss { .. }))
            )
            || matches!(e.downcast_ref::<PathLossError>(), Some(PathLossError::DegenerateGrid(_)))
            || matches!(e.downcast_ref::<ScoreError>(), Some(ScoreError::InvalidWeights))
            || matches!(e.downcast_ref::<GbmError>(), Some(GbmError::InvalidConfig(_)))
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg, cli.seed),
        Command::Calibrate(a) => cmd_calibrate(a, &cfg),
        Command::Extract(a) => cmd_extract(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg, cli.seed),
        Command::Predict(a) => cmd_predict(a),
        Command::Score(a) => cmd_score(a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_numeric_failure(&err) { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}
