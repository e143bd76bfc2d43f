//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a check or training run failed, 2 usage, input or
//! I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{self, auto_d0_grid, latent_distances, CertificationConfig, CertificationReport};
use crate::data::{convert_csv, load_dataset, TrajectoryDataset};
use crate::dynamics::rollout;
use crate::error::{Error, Result};
use crate::evaluation::{default_eps, demo_rollouts, evaluate, export_vector_field, field_svg, StabilityProtocol};
use crate::geometry::{sample_uniform, ManifoldSpec};
use crate::network::{Checkpoint, NetworkConfig, Order, PolicyParams};
use crate::training::{train, write_log_csv, Preset, TrainConfig};

/// Rollout horizon of the stability protocol unless overridden.
pub const DEFAULT_PROTOCOL_STEPS: usize = 2500;
/// Initial conditions of the stability protocol unless overridden.
pub const DEFAULT_PROTOCOL_COUNT: usize = 2500;

#[derive(Debug, Parser)]
#[command(name = "puma", version, about = "Learn, evaluate and certify stable motion primitives")]
pub struct Cli {
    /// Worker threads for batched rollouts (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy from a run config or a preset and a dataset.
    Train(TrainArgs),
    /// Accuracy metrics and the stability protocol for a checkpoint.
    Eval(EvalArgs),
    /// Empirical class-KL certificate for a checkpoint or a linear fixture.
    Certify(CertifyArgs),
    /// Trajectory CSVs from demo starts or sampled initial states.
    Rollout(RolloutArgs),
    /// Vector field on a grid as CSV and SVG.
    SampleField(SampleFieldArgs),
    /// Plain CSV (`demo,t,x_1..x_n`) to a dataset document.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (JSON). Paths inside it are relative to the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for checkpoint, log and summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "PUMA_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Hidden width of both halves of the network.
    #[arg(long)]
    pub width: Option<usize>,
    /// Imitation and stability batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub boundary_weight: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Rollout steps per initial condition.
    #[arg(long = "L", default_value_t = DEFAULT_PROTOCOL_STEPS)]
    pub steps: usize,
    /// Number of sampled initial conditions.
    #[arg(long = "P", default_value_t = DEFAULT_PROTOCOL_COUNT)]
    pub count: usize,
    /// Success radius (default: 1% of the box diagonal, 0.06 rad on spheres).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, env = "PUMA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Report path; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    LinearStable,
    LinearUnstable,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long, required_unless_present = "fixture", conflicts_with = "fixture")]
    pub checkpoint: Option<PathBuf>,
    /// Scalar system `dy/dt = -y` or `+y` with identity latent.
    #[arg(long, value_enum)]
    pub fixture: Option<Fixture>,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub alpha: f64,
    /// Step size (default: the checkpoint's, 1e-3 for fixtures).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Horizon in seconds.
    #[arg(long, default_value_t = 6.0)]
    pub horizon: f64,
    /// Comma-separated shell radii (default: zero plus eight data quantiles).
    #[arg(long, value_delimiter = ',')]
    pub d0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    pub shell_samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub shell_tol: f64,
    #[arg(long, default_value_t = 20_000)]
    pub candidates: usize,
    #[arg(long, default_value_t = 64)]
    pub max_members: usize,
    #[arg(long, env = "PUMA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Directory for `certificate.json` and `surfaces.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Start from every demo's first state (otherwise sample uniformly).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Sampled initial states when no dataset is given.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Steps per rollout (default: demo length, or 1000 for sampled starts).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = "PUMA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleFieldArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Points per grid axis.
    #[arg(long, default_value_t = 20)]
    pub grid: usize,
    /// Demos and their rollouts are overlaid on the SVG.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output prefix; writes `<out>.csv` and `<out>.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ManifoldKind {
    /// Bounding box of the data.
    Box,
    /// Unit sphere in the data's ambient dimension.
    Sphere,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = ManifoldKind::Box)]
    pub manifold: ManifoldKind,
    #[arg(long, value_enum, default_value_t = OrderArg::First)]
    pub order: OrderArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    First,
    Second,
}

impl From<OrderArg> for Order {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::First => Order::First,
            OrderArg::Second => Order::Second,
        }
    }
}

/// Run config file. Everything except the dataset is optional and falls
/// back to the preset, which itself defaults to the one matching the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Must equal the dataset's manifold when given.
    #[serde(default)]
    pub manifold: Option<ManifoldSpec>,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Evaluated on the trained policy and stored in the summary.
    #[serde(default)]
    pub protocol: Option<StabilityProtocol>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Fully resolved run, embedded in the training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub dataset: PathBuf,
    pub preset: Preset,
    pub manifold: ManifoldSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub protocol: Option<StabilityProtocol>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: ResolvedRun,
    pub final_loss: crate::losses::LossValues,
    pub probes: Vec<crate::training::ProbeResult>,
    pub eval: Option<crate::evaluation::EvalReport>,
    pub seconds: f64,
}

/// Either a failed check (exit 1) or an error (exit 1 for training failures,
/// 2 otherwise).
#[derive(Debug)]
pub enum Failure {
    Check(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Error(Error::Training { .. }) => 1,
            Failure::Error(_) => 2,
        }
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
                Failure::Error(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    if let Some(n) = cli.threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::Train(a) => Ok(cmd_train(&a).map(|_| ())?),
        Command::Eval(a) => Ok(cmd_eval(&a).map(|_| ())?),
        Command::Certify(a) => {
            let report = cmd_certify(&a)?;
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                Err(Failure::Check(failed.join(", ")))
            }
        }
        Command::Rollout(a) => Ok(cmd_rollout(&a).map(|_| ())?),
        Command::SampleField(a) => Ok(cmd_sample_field(&a).map(|_| ())?),
        Command::Convert(a) => Ok(cmd_convert(&a).map(|_| ())?),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn load_checked(path: &Path) -> Result<TrajectoryDataset> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found")));
    }
    load_dataset(path)
}

/// Merges the config file, the preset and the flags. Flags win.
pub fn resolve_run(args: &TrainArgs) -> Result<(ResolvedRun, TrajectoryDataset)> {
    let (mut cfg, base) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg: RunConfig = serde_json::from_str(&text)?;
            (cfg, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    } else if args.config.is_some() {
        cfg.dataset = base.join(&cfg.dataset);
    } else {
        return Err(Error::config("dataset", "pass --dataset or --config"));
    }
    if let Some(p) = &args.preset {
        cfg.preset = Some(Preset::parse(p)?);
    }
    let dataset = load_checked(&cfg.dataset)?;
    if let Some(m) = &cfg.manifold {
        let file = crate::data::DatasetFile::read(&cfg.dataset)?;
        if *m != file.manifold {
            return Err(Error::config("manifold", "does not match the dataset's manifold"));
        }
    }
    let preset = cfg.preset.unwrap_or_else(|| Preset::for_space(dataset.order, &dataset.spec));
    if preset.order() != dataset.order {
        return Err(Error::config("preset", format!("`{}` does not match the dataset order", preset.name())));
    }
    let seed = args.seed.or(cfg.seed).or(cfg.train.as_ref().map(|t| t.seed)).unwrap_or(0);
    let mut train = cfg.train.clone().unwrap_or_else(|| preset.train_config(seed));
    train.seed = seed;
    let mut network = cfg.network.clone().unwrap_or_else(|| preset.network_config(dataset.state_dim()));
    if let Some(v) = args.iterations {
        train.iterations = v;
    }
    if let Some(v) = args.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = args.batch {
        train.loss.batch_imitation = v;
        train.loss.batch_stability = v;
    }
    if let Some(v) = args.lambda {
        train.loss.lambda = v;
    }
    if let Some(v) = args.margin {
        train.loss.margin = v;
    }
    if let Some(v) = args.boundary_weight {
        train.loss.boundary_weight = v;
    }
    if let Some(v) = args.eval_every {
        train.eval_every = v;
    }
    if let Some(w) = args.width {
        network = network.with_width(w);
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d)))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}", preset.name())));
    train.checkpoint = Some(out_dir.join("checkpoint.json"));
    train.validate()?;
    network.validate()?;
    if let Some(p) = &cfg.protocol {
        p.validate()?;
    }
    let run = ResolvedRun {
        dataset: cfg.dataset.clone(),
        preset,
        manifold: dataset.spec.clone(),
        network,
        train,
        protocol: cfg.protocol,
        out_dir,
        seed,
    };
    Ok((run, dataset))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let (run, dataset) = resolve_run(args)?;
    fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    let start = std::time::Instant::now();
    let report_every = (run.train.iterations / 20).max(1);
    let outcome = train(&dataset, &run.network, &run.train, |row| {
        if row.iteration % report_every == 0 {
            eprintln!(
                "iter {:>6}  imitation {:.4e}  stability {:.4e}  boundary {:.4e}",
                row.iteration, row.loss.imitation, row.loss.stability, row.loss.boundary
            );
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let log_path = run.out_dir.join("train_log.csv");
    write_log_csv(&outcome.log, create(&log_path)?).map_err(|e| Error::io(&log_path, e))?;
    let eval = run
        .protocol
        .as_ref()
        .map(|p| evaluate(&outcome.params, &dataset, p, run.seed))
        .transpose()?;
    let summary = TrainSummary {
        final_loss: outcome.log.last().expect("at least one iteration").loss,
        probes: outcome.probes,
        eval,
        seconds,
        config: run,
    };
    write(&summary.config.out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Checkpoint and dataset must describe the same normalized space.
fn check_compatible(ck: &Checkpoint, ds: &TrajectoryDataset) -> Result<()> {
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    if ck.manifold != ds.spec
        || ck.config.order != ds.order
        || !close(&ck.scaling.offset, &ds.scaling.offset)
        || !close(&ck.scaling.gain, &ds.scaling.gain)
    {
        return Err(Error::config("checkpoint", "manifold, order or scaling differ from the dataset"));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<crate::evaluation::EvalReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = load_checked(&args.dataset)?;
    check_compatible(&ck, &ds)?;
    let protocol = StabilityProtocol {
        steps: args.steps,
        count: args.count,
        eps: args.eps.unwrap_or_else(|| default_eps(&ds)),
    };
    protocol.validate()?;
    let report = evaluate(&ck.policy()?, &ds, &protocol, args.seed)?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(out) = &args.out {
        write(out, &json)?;
    }
    Ok(report)
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<CertificationReport> {
    let mut config = CertificationConfig {
        alpha: args.alpha,
        dt: args.dt.unwrap_or(1e-3),
        horizon: args.horizon,
        d0_grid: args.d0.clone().unwrap_or_default(),
        shell_samples: args.shell_samples,
        shell_tol: args.shell_tol,
        candidates: args.candidates,
        max_members: args.max_members,
        metric: crate::geometry::LatentMetric::Euclidean,
        seed: args.seed,
    };
    let report = match (args.fixture, &args.checkpoint) {
        (Some(fixture), _) => {
            let rate = match fixture {
                Fixture::LinearStable => -1.0,
                Fixture::LinearUnstable => 1.0,
            };
            let defaults = certify::fixtures::config();
            if config.d0_grid.is_empty() {
                config.d0_grid = defaults.d0_grid;
            }
            config.validate()?;
            let shells = certify::fixtures::shells(&config.d0_grid);
            certify::certify_shells(&certify::fixtures::field(rate), &certify::fixtures::spec(), &[0.0], &config, &shells)?
        }
        (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let policy = ck.policy()?;
            config.dt = args.dt.unwrap_or(ck.dt);
            config.metric = ck.metric;
            if config.d0_grid.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let c = sample_uniform(&ck.manifold, &mut rng, config.candidates.max(1));
                config.d0_grid = auto_d0_grid(&latent_distances(&policy, config.metric, &ck.goal, &c)?, 8);
            }
            certify::certify(&policy, &ck.manifold, &ck.goal, &config)?
        }
        (None, None) => return Err(Error::config("certify", "pass --checkpoint or --fixture")),
    };
    for c in &report.checks {
        eprintln!("{:<26} {}  margin {:+.3e}", c.name, if c.passed { "pass" } else { "FAIL" }, c.margin);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(dir) = &args.out {
        write(&dir.join("certificate.json"), &report.to_json()?)?;
        let csv = dir.join("surfaces.csv");
        report.write_surfaces_csv(create(&csv)?).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(report)
}

/// Writes `rollout_<i>.csv` per trajectory (normalized units) and returns the paths.
pub fn cmd_rollout(args: &RolloutArgs) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let policy = ck.policy()?;
    let (starts, default_steps): (Vec<Vec<f64>>, Vec<usize>) = match &args.dataset {
        Some(path) => {
            let ds = load_checked(path)?;
            check_compatible(&ck, &ds)?;
            ds.demos.iter().map(|d| (d.states[0].clone(), d.len() - 1)).unzip()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let x = sample_uniform(&ck.manifold, &mut rng, args.count);
            x.iter_rows().map(|r| (r.to_vec(), 1000)).unzip()
        }
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut paths = Vec::new();
    for (i, (x0, n)) in starts.iter().zip(default_steps).enumerate() {
        let trace = rollout(&policy, &ck.manifold, x0, args.steps.unwrap_or(n), ck.dt)?;
        let path = args.out.join(format!("rollout_{i}.csv"));
        trace.write_csv(create(&path)?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes `<out>.csv` and `<out>.svg`.
pub fn cmd_sample_field(args: &SampleFieldArgs) -> Result<(PathBuf, PathBuf)> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let policy: PolicyParams = ck.policy()?;
    let table = export_vector_field(&policy, &ck.manifold, args.grid)?;
    let mut paths = Vec::new();
    if let Some(path) = &args.dataset {
        let ds = load_checked(path)?;
        check_compatible(&ck, &ds)?;
        paths.extend(ds.demos.iter().map(|d| d.states.clone()));
        paths.extend(demo_rollouts(&policy, &ds)?);
    }
    let csv = args.out.with_extension("csv");
    let svg = args.out.with_extension("svg");
    table.write_csv(create(&csv)?).map_err(|e| Error::io(&csv, e))?;
    write(&svg, &field_svg(&table, &paths, &ck.goal))?;
    Ok((csv, svg))
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<crate::data::DatasetFile> {
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let mut file = convert_csv(&text, None, args.order.into())?;
    if args.manifold == ManifoldKind::Sphere {
        let dim = file.demos[0][0].len();
        file.manifold = ManifoldSpec::sphere(dim);
    }
    // Reject files that would not load.
    crate::data::prepare_dataset(file.clone())?;
    file.save(&args.output)?;
    Ok(file)
}
