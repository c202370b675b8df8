//! `reforecast`: synthesize, diagnose, fit, sample, rebuild, evaluate and
//! benchmark forecast-update generators.
//!
//! Every output embeds the format version, the command, the seed and the
//! resolved configuration. Failures print a single `error[Kind]: message`
//! line to stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reforecast::data::{
    diagnose_updates, extract_updates, load_observations, load_trajectories, load_updates, write_observations,
    write_trajectories, write_updates, ObservationSchema, TrajectorySchema,
};
use reforecast::metrics::{evaluate_generator, summary_table, write_report_csv, EvalConfig, EvaluationReport, SpreadTerm};
use reforecast::model::{FittedModel, ModelConfig, ModelKind};
use reforecast::reconstruct::{rebuild_trajectory, RebuildConfig};
use reforecast::synthbench::{generate_synthetic_trajectory, run_benchmark, BenchConfig, ProcessKind, SyntheticProcessConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

const FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "reforecast", version, about = "Generative re-forecasting of power-system forecast trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory, its observations, updates and ground truth.
    Synth(SynthArgs),
    /// Check the update hypotheses on a trajectory.
    Diagnose(DiagnoseArgs),
    /// Fit a generator on the updates of a trajectory.
    Fit(FitArgs),
    /// Draw update sequences from a fitted model.
    Sample(SampleArgs),
    /// Rebuild a trajectory from updates and pseudo-observations.
    Rebuild(RebuildArgs),
    /// Score fitted models against a held-out trajectory.
    Evaluate(EvaluateArgs),
    /// Fit and score every model family on synthetic data.
    Bench(BenchArgs),
    /// Long-format CSV for fan charts.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    kind: Option<ProcessArg>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    weather_period: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcessArg {
    IidGaussianFactor,
    DgpvarGroundTruth,
    Comonotone,
    Heteroscedastic,
}

impl From<ProcessArg> for ProcessKind {
    fn from(p: ProcessArg) -> Self {
        match p {
            ProcessArg::IidGaussianFactor => ProcessKind::IidGaussianFactor,
            ProcessArg::DgpvarGroundTruth => ProcessKind::DgpvarGroundTruth,
            ProcessArg::Comonotone => ProcessKind::Comonotone,
            ProcessArg::Heteroscedastic => ProcessKind::Heteroscedastic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Copula,
    Nf,
    Dgpvar,
    Rnnnf,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Copula => ModelKind::Copula,
            ModelArg::Nf => ModelKind::Nf,
            ModelArg::Dgpvar => ModelKind::Dgpvar,
            ModelArg::Rnnnf => ModelKind::Rnnnf,
        }
    }
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    /// Trajectory CSV.
    #[arg(long)]
    input: PathBuf,
    /// JSON report; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    weather_period: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Trajectory CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Model artifact to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum training epochs (flow and autoregressive models).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Model artifact.
    #[arg(long)]
    artifact: PathBuf,
    /// Updates CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of update sequences.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct RebuildArgs {
    #[command(flatten)]
    common: Common,
    /// Updates CSV.
    #[arg(long)]
    input: PathBuf,
    /// Pseudo-observations CSV.
    #[arg(long)]
    obs: PathBuf,
    /// Trajectory CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Upper bound in MW: one value for every area or a comma-separated list.
    #[arg(long)]
    clip_max: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Held-out trajectory CSV.
    #[arg(long)]
    input: PathBuf,
    /// Pseudo-observations CSV; the trajectory's own horizon-0 values when omitted.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Model artifacts, comma-separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    artifact: Vec<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    clip_max: Option<String>,
    /// Use the all-pairs Energy Score spread term.
    #[arg(long)]
    all_pairs: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Models to fit, comma-separated; all four when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    model: Vec<ModelArg>,
    /// Report CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PlotKind {
    Trajectory,
    Updates,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Trajectory or updates CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "trajectory")]
    kind: PlotKind,
    /// Long-format CSV to write.
    #[arg(long)]
    out: PathBuf,
}

/// Optional sections of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    scenarios: Option<usize>,
    count: Option<usize>,
    weather_period: Option<usize>,
    clip_max: Option<Vec<f64>>,
    train_fraction: Option<f64>,
    process: Option<SyntheticProcessConfig>,
    model: Option<ModelConfig>,
    eval: Option<EvalConfig>,
}

struct CliError {
    kind: String,
    message: String,
    exit: u8,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            exit: 1,
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: 2,
            ..Self::new("Usage", message)
        }
    }
}

/// Error variant name as the machine-readable kind.
fn variant_name(e: &reforecast::Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

impl From<reforecast::Error> for CliError {
    fn from(e: reforecast::Error) -> Self {
        Self::new(&variant_name(&e), e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Attach the flag and path a module error came from.
trait Context<T> {
    fn at(self, flag: &str, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for reforecast::Result<T> {
    fn at(self, flag: &str, path: &Path) -> CliResult<T> {
        self.map_err(|e| {
            let mut err = CliError::from(e);
            let shown = path.display().to_string();
            if !err.message.contains(&shown) {
                err.message = format!("{flag} {shown}: {}", err.message);
            } else {
                err.message = format!("{flag}: {}", err.message);
            }
            err
        })
    }
}

fn read_config(common: &Common) -> CliResult<FileConfig> {
    let Some(path) = &common.config else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("Io", format!("--config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let detail = e.to_string().lines().next().unwrap_or_default().to_string();
        CliError::new("InvalidConfig", format!("--config {}: {detail}", path.display()))
    })
}

fn setup_threads(common: &Common) -> CliResult<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("Threads", format!("--threads {n}: {e}")))?;
    }
    Ok(())
}

/// `# ` header lines shared by every output.
fn echo(command: &str, seed: u64, config: &serde_json::Value) -> Vec<String> {
    vec![
        format!("reforecast format {FORMAT_VERSION}"),
        format!("command: {command}"),
        format!("seed: {seed}"),
        format!("config: {config}"),
    ]
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable config")
}

fn parse_clip_max(flag: Option<&str>, file: Option<Vec<f64>>, d: usize) -> CliResult<Option<Vec<f64>>> {
    let values = match flag {
        Some(s) => Some(
            s.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| CliError::usage(format!("--clip-max: '{s}' is not a number or comma-separated list")))?,
        ),
        None => file,
    };
    match values {
        None => Ok(None),
        Some(v) if v.len() == 1 => Ok(Some(vec![v[0]; d])),
        Some(v) if v.len() == d => Ok(Some(v)),
        Some(v) => Err(CliError::usage(format!("--clip-max: {} values for {d} areas", v.len()))),
    }
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json") + "\n";
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::new("Io", format!("--out {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let mut cfg = file.process.unwrap_or_default();
    if let Some(s) = a.seed.or(file.seed) {
        cfg.seed = s;
    }
    if let Some(k) = a.kind {
        cfg.kind = k.into();
    }
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.d = a.d.unwrap_or(cfg.d);
    if a.weather_period.is_some() {
        cfg.weather_period = a.weather_period;
    }
    let data = generate_synthetic_trajectory(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::new("Io", format!("--out {}: {e}", a.out.display())))?;
    let comments = echo("synth", cfg.seed, &to_json(&cfg));
    let path = |name: &str| a.out.join(name);
    write_trajectories(&path("trajectories.csv"), &data.trajectory, &comments).at("--out", &a.out)?;
    write_observations(&path("observations.csv"), &data.observations, &comments).at("--out", &a.out)?;
    write_updates(&path("updates.csv"), &data.updates, &comments).at("--out", &a.out)?;
    write_json(
        Some(&path("truth.json")),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "synth",
            "seed": cfg.seed,
            "truth": to_json(&data.truth),
        }),
    )
}

fn diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let period = a.weather_period.or(file.weather_period).unwrap_or(6);
    let traj = load_trajectories(&a.input, &TrajectorySchema::default()).at("--input", &a.input)?;
    let updates = extract_updates(&traj).at("--input", &a.input)?;
    let report = diagnose_updates(&updates, period).at("--input", &a.input)?;
    write_json(
        a.out.as_deref(),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "diagnose",
            "config": {"weather_period": period},
            "report": to_json(&report),
        }),
    )
}

fn fit(a: FitArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let mut cfg = file.model.unwrap_or_default().with_seed(seed);
    if let Some(e) = a.epochs {
        cfg.nf.train.max_epochs = e;
        cfg.ar.train.max_epochs = e;
    }
    let traj = load_trajectories(&a.input, &TrajectorySchema::default()).at("--input", &a.input)?;
    let updates = extract_updates(&traj).at("--input", &a.input)?;
    let kind = ModelKind::from(a.model);
    let model = FittedModel::fit(kind, &updates, &cfg)
        .map_err(CliError::from)
        .map_err(|mut e| {
            e.message = format!("--model {}: {}", kind.name(), e.message);
            e
        })?;
    let config = json!({"model": kind.name(), "input": a.input.display().to_string(), "model_config": to_json(&cfg)});
    model.save(&a.out, &echo("fit", seed, &config)).at("--out", &a.out)
}

fn load_model(path: &Path) -> CliResult<FittedModel> {
    FittedModel::load(path).at("--artifact", path)
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let count = a.count.or(file.count).unwrap_or(100);
    let model = load_model(&a.artifact)?;
    let updates = model.sample(count, seed)?;
    let config = json!({"artifact": a.artifact.display().to_string(), "model": model.kind().name(), "count": count});
    write_updates(&a.out, &updates, &echo("sample", seed, &config)).at("--out", &a.out)
}

fn rebuild(a: RebuildArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let updates = load_updates(&a.input).at("--input", &a.input)?;
    let obs = load_observations(&a.obs, &ObservationSchema::default()).at("--obs", &a.obs)?;
    let cfg = RebuildConfig {
        clip_max: parse_clip_max(a.clip_max.as_deref(), file.clip_max, obs.d())?,
        ..RebuildConfig::default()
    };
    let traj = rebuild_trajectory(&obs, &updates, &cfg).at("--obs", &a.obs)?;
    let config = json!({
        "input": a.input.display().to_string(),
        "obs": a.obs.display().to_string(),
        "rebuild": to_json(&cfg),
    });
    write_trajectories(&a.out, &traj, &echo("rebuild", 0, &config)).at("--out", &a.out)
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let mut cfg = file.eval.unwrap_or_default();
    cfg.seed = a.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.scenarios = a.scenarios.or(file.scenarios).unwrap_or(cfg.scenarios);
    if a.all_pairs {
        cfg.spread = SpreadTerm::AllPairs;
    }
    let held_out = load_trajectories(&a.input, &TrajectorySchema::default()).at("--input", &a.input)?;
    let obs = match &a.obs {
        Some(p) => Some(load_observations(p, &ObservationSchema::default()).at("--obs", p)?),
        None => None,
    };
    if let Some(clip) = parse_clip_max(a.clip_max.as_deref(), file.clip_max, held_out.d())? {
        cfg.rebuild.clip_max = Some(clip);
    }
    let mut reports: Vec<EvaluationReport> = Vec::new();
    for path in &a.artifact {
        let model = load_model(path)?;
        let name = model.kind().name();
        let report = evaluate_generator(name, |c, s| model.sample(c, s), &held_out, obs.as_ref(), &cfg)
            .at("--artifact", path)?;
        reports.push(report);
    }
    let config = json!({
        "input": a.input.display().to_string(),
        "obs": a.obs.as_ref().map(|p| p.display().to_string()),
        "artifacts": a.artifact.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "eval": to_json(&cfg),
    });
    write_report_csv(&reports, &a.out, &echo("evaluate", cfg.seed, &config)).at("--out", &a.out)?;
    print!("{}", summary_table(&reports));
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let file = read_config(&a.common)?;
    let mut cfg = BenchConfig {
        process: file.process.unwrap_or_default(),
        model: file.model.unwrap_or_default(),
        eval: file.eval.unwrap_or_default(),
        train_fraction: file.train_fraction.unwrap_or(BenchConfig::default().train_fraction),
    };
    let seed = a.seed.or(file.seed).unwrap_or(0);
    cfg.process.seed = seed;
    cfg.model = cfg.model.with_seed(seed);
    cfg.eval.seed = seed;
    cfg.eval.scenarios = a.scenarios.or(file.scenarios).unwrap_or(cfg.eval.scenarios);
    if let Some(e) = a.epochs {
        cfg.model.nf.train.max_epochs = e;
        cfg.model.ar.train.max_epochs = e;
    }
    let models: Vec<ModelKind> = if a.model.is_empty() {
        ModelKind::ALL.to_vec()
    } else {
        a.model.iter().map(|&m| m.into()).collect()
    };
    let report = run_benchmark(&models, &cfg)?;
    let mut comments = echo(
        "bench",
        seed,
        &json!({"models": models.iter().map(|m| m.name()).collect::<Vec<_>>(), "bench": to_json(&cfg)}),
    );
    comments.push("ranking:".into());
    comments.extend(report.ranking_table().lines().map(String::from));
    write_report_csv(&report.reports, &a.out, &comments).at("--out", &a.out)?;
    print!("{}", summary_table(&report.reports));
    print!("{}", report.ranking_table());
    Ok(())
}

fn plotdata(a: PlotArgs) -> CliResult<()> {
    let (values, note) = match a.kind {
        PlotKind::Trajectory => {
            let t = load_trajectories(&a.input, &TrajectorySchema::default()).at("--input", &a.input)?;
            (t.values, t.area_ids)
        }
        PlotKind::Updates => {
            let u = load_updates(&a.input).at("--input", &a.input)?;
            (u.values, u.area_ids)
        }
    };
    let mut out = String::new();
    let config = json!({"input": a.input.display().to_string(), "kind": to_json(&a.kind)});
    for line in echo("plotdata", 0, &config) {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("sequence,horizon,area,value\n");
    for ((i, k, r), v) in values.indexed_iter() {
        out.push_str(&format!("{i},{k},{},{v}\n", note[r]));
    }
    std::fs::write(&a.out, out).map_err(|e| CliError::new("Io", format!("--out {}: {e}", a.out.display())))
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Synth(a) => &a.common,
        Command::Diagnose(a) => &a.common,
        Command::Fit(a) => &a.common,
        Command::Sample(a) => &a.common,
        Command::Rebuild(a) => &a.common,
        Command::Evaluate(a) => &a.common,
        Command::Bench(a) => &a.common,
        Command::Plotdata(a) => &a.common,
    };
    setup_threads(common)?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Fit(a) => fit(a),
        Command::Sample(a) => sample(a),
        Command::Rebuild(a) => rebuild(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::Plotdata(a) => plotdata(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::usage(first.trim_start_matches("error: "));
            eprintln!("error[{}]: {}", err.kind, err.message);
            return ExitCode::from(err.exit);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {}", err.kind, err.message.replace('\n', " "));
            ExitCode::from(err.exit)
        }
    }
}
