//! Command-line interface. Every command is a pure function of its
//! configuration, input files and seed; every artifact carries the resolved
//! configuration and the tool version.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bounds::{self, BoundError, BoundInputs, SweepVar};
use crate::discovery::{run_pipeline_on, DiscoveryError, PipelineConfig, StageStore};
use crate::dsl::DslContext;
use crate::dynamics::{
    generate_dataset, hamiltonian, parse_trajectories_csv, write_trajectories_csv, Dataset, DynamicsError,
    SystemKind, SystemSpec, Trajectory,
};
use crate::tailoring::{
    meta_train_with, multi_inner_step_probe, per_step_mse, train_baseline, windows, Checkpoint, Embedding, InnerOptimizer,
    MetaTrainConfig, NoetherConfig, PredictorMlp, TailorError,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    /// Numeric or domain failure; exit code 1.
    #[error("{0}")]
    Domain(String),
    /// Unreadable/unwritable files or bad configuration; exit code 2.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Io(_) | DynamicsError::Parse { .. } => CliError::Io(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<TailorError> for CliError {
    fn from(e: TailorError) -> Self {
        match e {
            TailorError::Io(_) | TailorError::Json(_) | TailorError::Config(_) => CliError::Io(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<DiscoveryError> for CliError {
    fn from(e: DiscoveryError) -> Self {
        match e {
            DiscoveryError::Stage { .. } => CliError::Domain(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<BoundError> for CliError {
    fn from(e: BoundError) -> Self {
        CliError::Domain(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub inner_lr: f64,
    pub optimizer: InnerOptimizer,
    /// Index of the held-out window to probe.
    pub window: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            inner_lr: 3e-4,
            optimizer: InnerOptimizer::Sgd,
            window: 0,
        }
    }
}

/// Fully resolved run configuration: loaded from `--config`, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub system: SystemKind,
    /// Dissipative pendulum only; `None` keeps the system default.
    pub damping: Option<f64>,
    pub noise_std: Option<f64>,
    pub pipeline: PipelineConfig,
    /// Neural meta-training (`train-noether`).
    pub meta: MetaTrainConfig,
    pub embedding_hidden: Vec<usize>,
    pub embedding_out: usize,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::IdealPendulum,
            damping: None,
            noise_std: None,
            pipeline: PipelineConfig::default(),
            meta: MetaTrainConfig {
                epochs: 300,
                ..MetaTrainConfig::default()
            },
            embedding_hidden: vec![64, 64],
            embedding_out: 8,
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn spec(&self) -> SystemSpec {
        let mut spec = SystemSpec::default_for(self.system);
        if let Some(d) = self.damping {
            spec.damping = d;
        }
        if let Some(n) = self.noise_std {
            spec.noise_std = n;
        }
        spec
    }
}

#[derive(Debug, Parser)]
#[command(name = "noether", version, about = "Discover conserved quantities and meta-tailor predictors with them")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// ideal-spring, ideal-pendulum or dissipative-pendulum.
    #[arg(long, global = true)]
    pub system: Option<SystemKind>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub damping: Option<f64>,
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    /// Baseline hidden widths, e.g. `200,200`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub baseline_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub inner_lr: Option<f64>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate train/test trajectories and write CSVs plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the vanilla derivative-regression MLP.
    TrainBaseline {
        /// Directory with train.csv/test.csv, or one CSV file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate, screen and select a conserved formula.
    Discover {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse stage artifacts already present in `--out`.
        #[arg(long)]
        resume: bool,
        /// Maximum formula length.
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        shortlist: Option<usize>,
        #[arg(long)]
        metatailor_epochs: Option<usize>,
    },
    /// Meta-train a predictor with a neural conservation embedding.
    TrainNoether {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from this predictor checkpoint instead of training a baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-horizon RMSE with and without tailoring.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated inner steps on one held-out window (inner and task loss).
    ProbeInnerSteps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        probe_lr: Option<f64>,
        /// sgd or adam
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Generalization-bound sweep over one input.
    Bound {
        /// c, r, zeta, rho, delta, n, d or m.
        #[arg(long, default_value = "m")]
        var: String,
        /// Comma-separated values of the swept input.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 1.0)]
        zeta: f64,
        #[arg(long, default_value_t = 1)]
        rho: u32,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        n: u64,
        #[arg(long, default_value_t = 2)]
        d: u32,
        #[arg(long, default_value_t = 0)]
        m: u32,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check data (energy drift, CSV round trip) and checkpoints.
    Verify {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Largest accepted relative energy drift for noiseless ideal data.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

/// Config file contents with flag overrides applied.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.system {
        cfg.system = s;
    }
    if let Some(s) = common.seed {
        cfg.pipeline.seed = s;
        cfg.meta.seed = s;
    }
    if common.workers.is_some() {
        cfg.pipeline.workers = common.workers;
    }
    if common.damping.is_some() {
        cfg.damping = common.damping;
    }
    if common.noise.is_some() {
        cfg.noise_std = common.noise;
    }
    if let Some(h) = &common.hidden {
        cfg.pipeline.baseline.hidden = h.clone();
    }
    if let Some(e) = common.baseline_epochs {
        cfg.pipeline.baseline.epochs = e;
    }
    if let Some(l) = common.inner_lr {
        cfg.pipeline.noether.inner_lr = l;
    }
    if let Some(h) = common.horizon {
        cfg.pipeline.noether.horizon = h;
    }
    cfg.pipeline.noether.dt = cfg.pipeline.data.dt;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Sidecar `<file>.meta.json` holding the config and version for a CSV.
fn write_meta(csv_path: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".meta.json");
    write_json(
        Path::new(&name),
        &json!({ "tool_version": TOOL_VERSION, "command": command, "config": cfg }),
    )
}

fn read_csv_trajs(path: &Path, tag: &str) -> Result<Vec<Trajectory>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(parse_trajectories_csv(&text, tag)?)
}

/// Loads `train.csv`/`test.csv` from a directory, or splits a single CSV
/// (even-indexed trajectories train, odd test). Without a path the data is
/// simulated from the config.
pub fn load_or_generate(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset, CliError> {
    let tag = cfg.system.tag();
    match data {
        None => Ok(generate_dataset(&cfg.spec(), &cfg.pipeline.data, cfg.pipeline.seed)?),
        Some(p) if p.is_dir() => Ok(Dataset {
            train: read_csv_trajs(&p.join("train.csv"), tag)?,
            test: read_csv_trajs(&p.join("test.csv"), tag)?,
        }),
        Some(p) => {
            let all = read_csv_trajs(p, tag)?;
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, t) in all.into_iter().enumerate() {
                if i % 2 == 0 {
                    train.push(t);
                } else {
                    test.push(t);
                }
            }
            Ok(Dataset { train, test })
        }
    }
}

/// Largest `|H(x_t) − H(x_0)| / max(|H(x_0)|, 1e-12)` over all states.
pub fn max_relative_energy_drift(spec: &SystemSpec, trajs: &[Trajectory]) -> f64 {
    trajs
        .iter()
        .flat_map(|t| {
            let h0 = t.states.first().map(|&s| hamiltonian(spec, s)).unwrap_or(0.0);
            t.states
                .iter()
                .map(move |&s| (hamiltonian(spec, s) - h0).abs() / h0.abs().max(1e-12))
        })
        .fold(0.0, f64::max)
}

fn noether_cfg(cfg: &RunConfig, data: &Dataset) -> NoetherConfig {
    let dt = data.train.first().or(data.test.first()).map(|t| t.dt).unwrap_or(cfg.pipeline.data.dt);
    NoetherConfig {
        dt,
        ..cfg.pipeline.noether.clone()
    }
}

fn init_workers(cfg: &RunConfig) {
    if let Some(n) = cfg.pipeline.workers {
        // Fails only if the global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` and runs the command, writing progress to `log`.
pub fn run_with_args<I, T>(args: I, log: &mut impl Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Io(e.to_string()))?;
    run(cli, log)
}

pub fn run(cli: Cli, log: &mut impl Write) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli.common)?;
    init_workers(&cfg);
    match cli.command {
        Command::GenData { out } => cmd_gen_data(&cfg, &out, log),
        Command::TrainBaseline { data, out } => cmd_train_baseline(&cfg, data.as_deref(), &out, log),
        Command::Discover {
            data,
            out,
            resume,
            max_depth,
            shortlist,
            metatailor_epochs,
        } => {
            if let Some(d) = max_depth {
                cfg.pipeline.max_depth = d;
            }
            if let Some(s) = shortlist {
                cfg.pipeline.shortlist_size = s;
            }
            if let Some(e) = metatailor_epochs {
                cfg.pipeline.metatailor_epochs = e;
            }
            cmd_discover(&cfg, data.as_deref(), &out, resume, log)
        }
        Command::TrainNoether {
            data,
            out,
            baseline,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.meta.epochs = e;
            }
            cmd_train_noether(&cfg, data.as_deref(), &out, baseline.as_deref(), log)
        }
        Command::Eval { checkpoint, data, out } => cmd_eval(&cfg, &checkpoint, data.as_deref(), out.as_deref(), log),
        Command::ProbeInnerSteps {
            checkpoint,
            data,
            out,
            steps,
            probe_lr,
            optimizer,
            window,
        } => {
            if let Some(s) = steps {
                cfg.probe.steps = s;
            }
            if let Some(l) = probe_lr {
                cfg.probe.inner_lr = l;
            }
            if let Some(o) = optimizer {
                cfg.probe.optimizer = match o.as_str() {
                    "sgd" => InnerOptimizer::Sgd,
                    "adam" => InnerOptimizer::Adam,
                    other => return Err(CliError::Io(format!("unknown optimizer '{other}'"))),
                };
            }
            if let Some(w) = window {
                cfg.probe.window = w;
            }
            cmd_probe(&cfg, &checkpoint, data.as_deref(), &out, log)
        }
        Command::Bound {
            var,
            values,
            c,
            r,
            zeta,
            rho,
            delta,
            n,
            d,
            m,
            out,
        } => {
            let base = BoundInputs {
                c,
                r,
                zeta,
                rho,
                delta,
                n,
                d,
                m,
                conserved: true,
            };
            cmd_bound(&cfg, &base, &var, &values, out.as_deref(), log)
        }
        Command::Verify {
            data,
            checkpoint,
            tolerance,
        } => cmd_verify(&cfg, data.as_deref(), checkpoint.as_deref(), tolerance, log),
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, log: &mut impl Write) -> Result<(), CliError> {
    let spec = cfg.spec();
    let data = generate_dataset(&spec, &cfg.pipeline.data, cfg.pipeline.seed)?;
    fs::create_dir_all(out)?;
    write_trajectories_csv(&out.join("train.csv"), &data.train)?;
    write_trajectories_csv(&out.join("test.csv"), &data.test)?;
    let drift = max_relative_energy_drift(&spec, &data.train);
    write_json(
        &out.join("manifest.json"),
        &json!({
            "tool_version": TOOL_VERSION,
            "command": "gen-data",
            "config": cfg,
            "system": spec,
            "seed": cfg.pipeline.seed,
            "train_trajectories": data.train.len(),
            "test_trajectories": data.test.len(),
            "states_per_trajectory": cfg.pipeline.data.states_per_trajectory,
            "dt": cfg.pipeline.data.dt,
            "max_relative_energy_drift_train": drift,
        }),
    )?;
    writeln!(
        log,
        "wrote {} train and {} test trajectories to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    )?;
    Ok(())
}

pub fn cmd_train_baseline(cfg: &RunConfig, data: Option<&Path>, out: &Path, log: &mut impl Write) -> Result<(), CliError> {
    let ds = load_or_generate(cfg, data)?;
    let bcfg = crate::tailoring::BaselineConfig {
        seed: cfg.pipeline.seed,
        ..cfg.pipeline.baseline.clone()
    };
    let (f, history) = train_baseline(&ds.train, &bcfg)?;
    let ncfg = noether_cfg(cfg, &ds);
    let ck = Checkpoint::new(&f, None, Some(cfg.system), Some(&ncfg), serde_json::to_value(cfg)?);
    write_json(out, &ck)?;
    let hist_path = out.with_extension("history.csv");
    let mut text = String::from("epoch,train_derivative_mse\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&hist_path, text)?;
    write_meta(&hist_path, "train-baseline", cfg)?;
    writeln!(
        log,
        "baseline trained: final derivative MSE {:.6e}",
        history.last().copied().unwrap_or(f64::NAN)
    )?;
    Ok(())
}

pub fn cmd_discover(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    resume: bool,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let store = StageStore::new(out, resume)?;
    let ds = match data {
        Some(_) => load_or_generate(cfg, data)?,
        None => {
            let p = store.path("dataset.json");
            if resume && p.exists() {
                serde_json::from_str(&fs::read_to_string(&p)?)?
            } else {
                let d = load_or_generate(cfg, None)?;
                fs::write(&p, serde_json::to_string(&d)?)?;
                write_trajectories_csv(&store.path("train.csv"), &d.train)?;
                write_trajectories_csv(&store.path("test.csv"), &d.test)?;
                d
            }
        }
    };
    let mut pcfg = cfg.pipeline.clone();
    pcfg.noether.dt = ds.train.first().map(|t| t.dt).unwrap_or(pcfg.data.dt);
    write_json(
        &store.path("run.json"),
        &json!({ "tool_version": TOOL_VERSION, "command": "discover", "config": cfg }),
    )?;
    let result = run_pipeline_on(cfg.system, &ds, &pcfg, Some(&store))?;
    if store.path("screen.csv").exists() {
        write_meta(&store.path("screen.csv"), "discover", cfg)?;
    }
    let c = &result.counts;
    writeln!(
        log,
        "enumerated {} (trivial {}, unfittable {}), accepted {}, shortlisted {}",
        c.enumerated, c.trivial, c.unfittable, c.accepted, c.shortlisted
    )?;
    match &result.winner {
        Some(w) => writeln!(log, "winner: {}  [{}]", w.infix, w.sexpr)?,
        None => writeln!(log, "no candidate passed screening")?,
    }
    writeln!(
        log,
        "test RMSE: baseline {:.5}, vanilla {:.5}, meta-tailored {}",
        result.baseline_test_rmse,
        result.vanilla_test_rmse,
        result.tailored_test_rmse.map(|v| format!("{v:.5}")).unwrap_or("n/a".into())
    )?;
    if let Some(v) = result.oracle_test_rmse {
        writeln!(log, "true-Hamiltonian tailoring test RMSE {v:.5}")?;
    }
    Ok(())
}

pub fn cmd_train_noether(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    baseline: Option<&Path>,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let ds = load_or_generate(cfg, data)?;
    if ds.test.is_empty() {
        return Err(CliError::Domain("empty test set".into()));
    }
    fs::create_dir_all(out)?;
    let f = match baseline {
        Some(p) => Checkpoint::load(p)?.predictor()?,
        None => {
            let bcfg = crate::tailoring::BaselineConfig {
                seed: cfg.pipeline.seed,
                ..cfg.pipeline.baseline.clone()
            };
            train_baseline(&ds.train, &bcfg)?.0
        }
    };
    let g = Embedding::neural(&cfg.embedding_hidden, cfg.embedding_out, cfg.meta.seed.wrapping_add(1));
    let ncfg = noether_cfg(cfg, &ds);
    let val = windows(&ds.test, ncfg.horizon, ncfg.horizon);
    let mut last: Option<(PredictorMlp, Embedding)> = None;
    let result = meta_train_with(&f, &g, &ds.train, Some(&val), &ncfg, &cfg.meta, |_, f, g| {
        last = Some((f.clone(), g.clone()));
    });
    let trained = match result {
        Ok(t) => t,
        Err(e) => {
            // keep the last finished epoch (or the starting point)
            let (lf, lg) = last.unwrap_or((f, g));
            let ck = Checkpoint::new(&lf, Some(&lg), Some(cfg.system), Some(&ncfg), serde_json::to_value(cfg)?);
            write_json(&out.join("checkpoint.json"), &ck)?;
            return Err(e.into());
        }
    };
    let hist_path = out.join("history.csv");
    let mut text = String::from("epoch,train_task_loss,val_tailored,val_untailored\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for h in &trained.history {
        text.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_loss, opt(h.val_loss), opt(h.val_untailored)));
    }
    fs::write(&hist_path, text)?;
    write_meta(&hist_path, "train-noether", cfg)?;
    let ck = Checkpoint::new(
        &trained.predictor,
        Some(&trained.embedding),
        Some(cfg.system),
        Some(&ncfg),
        serde_json::to_value(cfg)?,
    );
    write_json(&out.join("checkpoint.json"), &ck)?;
    let tailored = crate::tailoring::evaluate_mse(&trained.predictor, Some(&trained.embedding), &val, &ncfg)?;
    let untailored = crate::tailoring::evaluate_mse(&trained.predictor, None, &val, &ncfg)?;
    writeln!(log, "held-out task MSE: tailored {tailored:.6e}, untailored {untailored:.6e}")?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, PredictorMlp), CliError> {
    let ck = Checkpoint::load(path)?;
    let f = ck.predictor()?;
    Ok((ck, f))
}

fn checkpoint_embedding(ck: &Checkpoint, cfg: &RunConfig) -> Result<Option<Embedding>, CliError> {
    let ctx = DslContext::for_system(ck.system.unwrap_or(cfg.system));
    Ok(ck.embedding(&ctx)?)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let (ck, f) = load_checkpoint(checkpoint)?;
    let ds = load_or_generate(cfg, data)?;
    if ds.test.is_empty() {
        return Err(CliError::Domain("empty test set".into()));
    }
    let ncfg = ck.tailoring.clone().unwrap_or_else(|| noether_cfg(cfg, &ds));
    let wins = windows(&ds.test, ncfg.horizon, ncfg.horizon);
    if wins.is_empty() {
        return Err(CliError::Domain(format!("no test window holds {} steps", ncfg.horizon)));
    }
    let g = checkpoint_embedding(&ck, cfg)?;
    let untailored = per_step_mse(&f, None, &wins, &ncfg)?;
    let tailored = match &g {
        Some(g) => Some(per_step_mse(&f, Some(g), &wins, &ncfg)?),
        None => None,
    };
    let agg = |v: &[f64]| (v.iter().sum::<f64>() / v.len() as f64).sqrt();
    let rmse = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<f64>>();
    let report = json!({
        "tool_version": TOOL_VERSION,
        "command": "eval",
        "config": cfg,
        "checkpoint": checkpoint,
        "tailoring": ncfg,
        "windows": wins.len(),
        "untailored": { "mse_per_step": untailored, "rmse_per_step": rmse(&untailored), "rmse": agg(&untailored) },
        "tailored": tailored.as_ref().map(|t| json!({
            "mse_per_step": t, "rmse_per_step": rmse(t), "rmse": agg(t)
        })),
    });
    if let Some(p) = out {
        write_json(p, &report)?;
    } else {
        writeln!(log, "{}", serde_json::to_string_pretty(&report)?)?;
    }
    writeln!(
        log,
        "aggregate RMSE: untailored {:.6}{}",
        agg(&untailored),
        tailored
            .as_ref()
            .map(|t| format!(", tailored {:.6}", agg(t)))
            .unwrap_or_default()
    )?;
    Ok(())
}

pub fn cmd_probe(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: &Path,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let (ck, f) = load_checkpoint(checkpoint)?;
    let g = checkpoint_embedding(&ck, cfg)?
        .ok_or_else(|| CliError::Domain("checkpoint has no embedding to probe".into()))?;
    let ds = load_or_generate(cfg, data)?;
    let ncfg = ck.tailoring.clone().unwrap_or_else(|| noether_cfg(cfg, &ds));
    let wins = windows(&ds.test, ncfg.horizon, ncfg.horizon);
    let w = wins
        .get(cfg.probe.window)
        .ok_or_else(|| CliError::Domain(format!("window {} out of range ({} windows)", cfg.probe.window, wins.len())))?;
    let curve = multi_inner_step_probe(
        &f,
        &g,
        w.x0,
        &w.truth,
        cfg.probe.steps,
        cfg.probe.inner_lr,
        cfg.probe.optimizer,
        &ncfg,
    )?;
    let mut text = String::from("step,inner_loss,task_loss\n");
    for p in &curve {
        text.push_str(&format!("{},{},{}\n", p.step, p.inner_loss, p.task_loss));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, text)?;
    write_meta(out, "probe-inner-steps", cfg)?;
    writeln!(log, "wrote {} probe points to {}", curve.len(), out.display())?;
    Ok(())
}

pub fn cmd_bound(
    cfg: &RunConfig,
    base: &BoundInputs,
    var: &str,
    values: &[f64],
    out: Option<&Path>,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let var: SweepVar = var.parse()?;
    // With a sweep the swept input may be the invalid one; rows report their own errors.
    if values.is_empty() {
        base.validate()?;
    }
    let values: Vec<f64> = if values.is_empty() {
        vec![match var {
            SweepVar::C => base.c,
            SweepVar::R => base.r,
            SweepVar::Zeta => base.zeta,
            SweepVar::Rho => base.rho as f64,
            SweepVar::Delta => base.delta,
            SweepVar::N => base.n as f64,
            SweepVar::D => base.d as f64,
            SweepVar::M => base.m as f64,
        }]
    } else {
        values.to_vec()
    };
    let rows = bounds::sweep(base, var, &values);
    let mut buf = Vec::new();
    bounds::write_sweep_csv(&mut buf, var, &rows)?;
    match out {
        Some(p) => {
            fs::write(p, &buf)?;
            write_meta(p, "bound", cfg)?;
            let mut name = p.as_os_str().to_owned();
            name.push(".inputs.json");
            write_json(Path::new(&name), &json!({ "tool_version": TOOL_VERSION, "inputs": base, "var": var.name() }))?;
        }
        None => log.write_all(&buf)?,
    }
    let failures = rows.iter().filter(|r| r.result.is_err()).count();
    if failures == rows.len() {
        return Err(CliError::Domain(format!("all {failures} sweep rows hit domain errors")));
    }
    Ok(())
}

pub fn cmd_verify(
    cfg: &RunConfig,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    tolerance: f64,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let mut failures = Vec::new();
    let mut report = serde_json::Map::new();
    report.insert("tool_version".into(), json!(TOOL_VERSION));
    report.insert("config".into(), serde_json::to_value(cfg)?);
    if data.is_some() || checkpoint.is_none() {
        let ds = load_or_generate(cfg, data)?;
        let spec = cfg.spec();
        let all: Vec<Trajectory> = ds.train.iter().chain(&ds.test).cloned().collect();
        let ideal = spec.noise_std == 0.0 && spec.kind != SystemKind::DissipativePendulum;
        if ideal {
            let drift = max_relative_energy_drift(&spec, &all);
            report.insert("max_relative_energy_drift".into(), json!(drift));
            if !(drift <= tolerance) {
                failures.push(format!("energy drift {drift:.3e} exceeds {tolerance:.1e}"));
            }
        } else {
            report.insert("max_relative_energy_drift".into(), json!(null));
        }
        let dir = std::env::temp_dir().join(format!("noether-verify-{}", std::process::id()));
        fs::create_dir_all(&dir)?;
        let path = dir.join("roundtrip.csv");
        write_trajectories_csv(&path, &all)?;
        let back = read_csv_trajs(&path, spec.kind.tag())?;
        let _ = fs::remove_dir_all(&dir);
        let mut err: f64 = if back.len() == all.len() { 0.0 } else { f64::INFINITY };
        for (a, b) in all.iter().zip(&back) {
            if a.states.len() != b.states.len() {
                err = f64::INFINITY;
                continue;
            }
            for (x, y) in a.states.iter().zip(&b.states) {
                err = err.max((x.q - y.q).abs()).max((x.p - y.p).abs());
            }
        }
        report.insert("csv_roundtrip_max_error".into(), json!(err));
        if !(err <= 1e-12) {
            failures.push(format!("CSV round trip error {err:.3e}"));
        }
        report.insert("trajectories".into(), json!(all.len()));
    }
    if let Some(p) = checkpoint {
        let (ck, f) = load_checkpoint(p)?;
        let g = checkpoint_embedding(&ck, cfg)?;
        report.insert(
            "checkpoint".into(),
            json!({
                "path": p,
                "predictor_params": f.params.len(),
                "embedding": g.as_ref().map(|g| g.kind()),
            }),
        );
    }
    report.insert("failures".into(), json!(failures));
    writeln!(log, "{}", serde_json::to_string_pretty(&report)?)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Domain(failures.join("; ")))
    }
}
