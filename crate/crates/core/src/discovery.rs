//! Symbolic discovery pipeline: enumerate formulas, fit their parameters,
//! screen them for conservation against null sequences, shortlist, and pick
//! the formula whose meta-tailoring gives the best long-horizon train error.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamVector;
use crate::dsl::{
    enumerate, expr_statistic, fit_compiled, is_trivial, probe_states, DslContext, DslError, Expr, FitConfig,
    PooledStates,
};
use crate::dynamics::{
    generate_dataset, sample_null_sequences, write_trajectories_csv, DataConfig, Dataset, DynamicsError, State,
    SystemKind, SystemSpec, Trajectory,
};
use crate::tailoring::{
    continue_baseline, evaluate_mse, meta_train, train_baseline, windows, BaselineConfig, Checkpoint, Embedding,
    MetaTrainConfig, NoetherConfig, PredictorMlp, TailorError,
};

pub const STAT_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> DiscoveryError {
    DiscoveryError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Last pipeline stage a candidate reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStage {
    /// Bare parameter or constant in its inputs.
    Trivial,
    /// Fitting or evaluation failed numerically.
    Unfittable,
    /// Screened and rejected.
    Rejected,
    /// Accepted by screening but not shortlisted.
    Accepted,
    /// Went through selection and lost.
    Selection,
    Winner,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    /// Position in the enumeration order.
    pub ordinal: usize,
    pub sexpr: String,
    #[serde(skip)]
    pub expr: Option<Expr>,
    pub size: usize,
    pub fitted_params: Vec<f64>,
    pub stat_true: f64,
    pub stat_null: f64,
    pub accepted: bool,
    pub exit_stage: ExitStage,
    #[serde(default)]
    pub reason: Option<String>,
    #[serde(default)]
    pub best_inner_lr: Option<f64>,
    #[serde(default)]
    pub tailored_train_mse: Option<f64>,
}

impl CandidateReport {
    /// Shortlisting key `stat_true / stat_null`; NaN-free, unfittable last.
    pub fn ratio(&self) -> f64 {
        if self.exit_stage == ExitStage::Unfittable {
            return f64::INFINITY;
        }
        let r = self.stat_true / self.stat_null;
        if r.is_nan() {
            f64::INFINITY
        } else {
            r
        }
    }

    pub fn expr(&self, ctx: &DslContext) -> Result<Expr, DslError> {
        match &self.expr {
            Some(e) => Ok(e.clone()),
            None => Expr::parse(&self.sexpr, ctx),
        }
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::with_prefix("c", self.fitted_params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_depth: usize,
    pub ratio_threshold: f64,
    pub degenerate_floor: f64,
    pub shortlist_size: usize,
    pub metatailor_epochs: usize,
    pub inner_lr_grid: Vec<f64>,
    pub seed: u64,
    pub data: DataConfig,
    pub fit: FitConfig,
    pub baseline: BaselineConfig,
    pub noether: NoetherConfig,
    pub batch_size: usize,
    /// Number of null sequences; `None` uses one per training trajectory.
    pub null_sequences: Option<usize>,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    /// Also meta-tailor with the system's true Hamiltonian for comparison.
    pub oracle: bool,
}

pub fn default_inner_lr_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect()
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_depth: 7,
            ratio_threshold: 100.0,
            degenerate_floor: 1e-10,
            shortlist_size: 20,
            metatailor_epochs: 100,
            inner_lr_grid: default_inner_lr_grid(),
            seed: 0,
            data: DataConfig::default(),
            fit: FitConfig::default(),
            baseline: BaselineConfig::default(),
            noether: NoetherConfig::default(),
            batch_size: 5,
            null_sequences: None,
            workers: None,
            oracle: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if !(self.ratio_threshold > 1.0) {
            return Err(DiscoveryError::Config("ratio_threshold must be > 1".into()));
        }
        if self.shortlist_size == 0 {
            return Err(DiscoveryError::Config("shortlist_size must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(DiscoveryError::Config("max_depth must be >= 1".into()));
        }
        if self.inner_lr_grid.is_empty() || self.inner_lr_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(DiscoveryError::Config("inner_lr_grid must hold nonnegative rates".into()));
        }
        self.noether.validate().map_err(|e| DiscoveryError::Config(e.to_string()))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, DiscoveryError> {
        let n = self
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| DiscoveryError::Config(e.to_string()))
    }
}

/// Accept rule: true-data statistic at least `ratio_threshold` times smaller
/// than on null data, and the null statistic above the degenerate floor.
pub fn is_accepted(stat_true: f64, stat_null: f64, cfg: &PipelineConfig) -> bool {
    stat_null / stat_true.max(STAT_FLOOR) >= cfg.ratio_threshold && stat_null > cfg.degenerate_floor
}

fn screen_one(
    ordinal: usize,
    e: &Expr,
    ctx: &DslContext,
    truth: &PooledStates,
    null: &PooledStates,
    probes: &[State],
    cfg: &PipelineConfig,
) -> CandidateReport {
    let mut r = CandidateReport {
        ordinal,
        sexpr: e.to_sexpr(ctx),
        expr: Some(e.clone()),
        size: e.size(),
        fitted_params: Vec::new(),
        stat_true: f64::NAN,
        stat_null: f64::NAN,
        accepted: false,
        exit_stage: ExitStage::Rejected,
        reason: None,
        best_inner_lr: None,
        tailored_train_mse: None,
    };
    if is_trivial(e, probes) {
        r.exit_stage = ExitStage::Trivial;
        r.reason = Some("constant in its inputs".into());
        return r;
    }
    let c = e.compile(ctx.n_inputs());
    let fit = match fit_compiled(&c, truth, &cfg.fit) {
        Ok(f) => f,
        Err(err) => {
            r.exit_stage = ExitStage::Unfittable;
            r.reason = Some(err.to_string());
            return r;
        }
    };
    r.fitted_params = fit.params.values().to_vec();
    r.stat_true = fit.loss;
    match expr_statistic(&c, &r.fitted_params, null) {
        Ok(s) => r.stat_null = s,
        Err(err) => {
            r.exit_stage = ExitStage::Unfittable;
            r.reason = Some(format!("null data: {err}"));
            return r;
        }
    }
    r.accepted = is_accepted(r.stat_true, r.stat_null, cfg);
    r.exit_stage = if r.accepted { ExitStage::Accepted } else { ExitStage::Rejected };
    if !r.accepted && r.stat_null <= cfg.degenerate_floor {
        r.reason = Some("degenerate: null statistic below floor".into());
    }
    r
}

fn order_reports(a: &CandidateReport, b: &CandidateReport) -> Ordering {
    a.ratio()
        .partial_cmp(&b.ratio())
        .unwrap_or(Ordering::Equal)
        .then(a.ordinal.cmp(&b.ordinal))
}

/// Fits and screens every candidate (in parallel, reduced in candidate
/// order). Reports come back sorted by ascending `stat_true / stat_null`,
/// ties by enumeration ordinal; trivial candidates are reported but never
/// fitted.
pub fn screen(
    candidates: &[Expr],
    ctx: &DslContext,
    true_data: &[Trajectory],
    null_data: &[Trajectory],
    cfg: &PipelineConfig,
) -> Result<Vec<CandidateReport>, DiscoveryError> {
    if true_data.is_empty() || null_data.is_empty() {
        return Err(stage_err("screen", "empty data"));
    }
    let truth = PooledStates::new(true_data);
    let null = PooledStates::new(null_data);
    let probes = probe_states(true_data);
    let mut reports: Vec<CandidateReport> = cfg.pool()?.install(|| {
        candidates
            .par_iter()
            .enumerate()
            .map(|(i, e)| screen_one(i, e, ctx, &truth, &null, &probes, cfg))
            .collect()
    });
    reports.sort_by(order_reports);
    Ok(reports)
}

/// One (candidate, inner learning rate) selection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionCell {
    pub ordinal: usize,
    pub sexpr: String,
    pub inner_lr: f64,
    /// Long-horizon tailored train MSE; `None` when meta-training diverged.
    pub train_mse: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

impl SelectionCell {
    pub fn mse_or_inf(&self) -> f64 {
        self.train_mse.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// Index into the shortlist of the winner.
    pub winner: usize,
    pub reports: Vec<CandidateReport>,
    pub cells: Vec<SelectionCell>,
    /// Meta-trained predictor of each candidate's best cell.
    pub predictors: Vec<Option<PredictorMlp>>,
}

/// Relative slack under which two tailored MSEs count as tied; equivalent
/// rewritings of one formula differ only by rounding.
pub const MSE_TIE_RTOL: f64 = 1e-9;

/// Index of the best candidate: among those whose tailored train MSE is
/// within [`MSE_TIE_RTOL`] of the minimum, the one with fewer nodes, then
/// the lexicographically smaller S-expression. Independent of the order of
/// `reports`.
pub fn pick_winner(reports: &[CandidateReport]) -> Option<usize> {
    let mse = |r: &CandidateReport| r.tailored_train_mse.unwrap_or(f64::INFINITY);
    let best = reports.iter().map(mse).fold(f64::INFINITY, f64::min);
    let cutoff = if best.is_finite() { best + MSE_TIE_RTOL * best.abs() } else { best };
    (0..reports.len())
        .filter(|&i| mse(&reports[i]) <= cutoff || !best.is_finite())
        .min_by(|&i, &j| {
            let (a, b) = (&reports[i], &reports[j]);
            a.size.cmp(&b.size).then_with(|| a.sexpr.cmp(&b.sexpr))
        })
}

/// The symbolic embedding used for tailoring with a screened candidate.
pub fn candidate_embedding(
    report: &CandidateReport,
    ctx: &DslContext,
    train: &[Trajectory],
) -> Result<Embedding, TailorError> {
    Embedding::symbolic_standardized(report.expr(ctx)?, report.params(), train)
}

fn noether_for(cfg: &PipelineConfig, dt: f64, inner_lr: f64) -> NoetherConfig {
    NoetherConfig {
        inner_lr,
        dt,
        ..cfg.noether.clone()
    }
}

fn run_cell(
    report: &CandidateReport,
    ctx: &DslContext,
    pretrained: &PredictorMlp,
    train: &[Trajectory],
    inner_lr: f64,
    cfg: &PipelineConfig,
) -> Result<(f64, PredictorMlp), TailorError> {
    let g = candidate_embedding(report, ctx, train)?;
    let dt = train.first().map(|t| t.dt).unwrap_or(cfg.data.dt);
    let ncfg = noether_for(cfg, dt, inner_lr);
    let tcfg = MetaTrainConfig {
        epochs: cfg.metatailor_epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        update_theta: true,
        update_phi: false,
    };
    let out = meta_train(pretrained, &g, train, None, &ncfg, &tcfg)?;
    let wins = windows(train, ncfg.horizon, ncfg.horizon);
    let mse = evaluate_mse(&out.predictor, Some(&g), &wins, &ncfg)?;
    if !mse.is_finite() {
        return Err(TailorError::Diverged {
            what: "train evaluation".into(),
        });
    }
    Ok((mse, out.predictor))
}

/// Meta-tailors a copy of `pretrained` with every shortlisted candidate at
/// every inner learning rate, updating the predictor only. Cells that
/// diverge count as infinite error.
pub fn select_by_metatailoring(
    shortlist: &[CandidateReport],
    ctx: &DslContext,
    pretrained: &PredictorMlp,
    train: &[Trajectory],
    cfg: &PipelineConfig,
) -> Result<Selection, DiscoveryError> {
    if shortlist.is_empty() {
        return Err(stage_err("select", "empty shortlist"));
    }
    let grid = &cfg.inner_lr_grid;
    let jobs: Vec<(usize, usize)> = (0..shortlist.len())
        .flat_map(|c| (0..grid.len()).map(move |l| (c, l)))
        .collect();
    let results: Vec<Result<(f64, PredictorMlp), TailorError>> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(c, l)| run_cell(&shortlist[c], ctx, pretrained, train, grid[l], cfg))
            .collect()
    });
    let mut reports = shortlist.to_vec();
    let mut predictors = vec![None; shortlist.len()];
    let mut best = vec![f64::INFINITY; shortlist.len()];
    let mut cells = Vec::with_capacity(jobs.len());
    for (&(c, l), res) in jobs.iter().zip(results) {
        let (train_mse, error) = match res {
            Ok((mse, f)) => {
                if mse < best[c] {
                    best[c] = mse;
                    reports[c].best_inner_lr = Some(grid[l]);
                    reports[c].tailored_train_mse = Some(mse);
                    predictors[c] = Some(f);
                }
                (Some(mse), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        cells.push(SelectionCell {
            ordinal: shortlist[c].ordinal,
            sexpr: shortlist[c].sexpr.clone(),
            inner_lr: grid[l],
            train_mse,
            error,
        });
    }
    let winner = pick_winner(&reports).expect("nonempty shortlist");
    for (i, r) in reports.iter_mut().enumerate() {
        r.exit_stage = if i == winner { ExitStage::Winner } else { ExitStage::Selection };
    }
    Ok(Selection {
        winner,
        reports,
        cells,
        predictors,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub enumerated: usize,
    pub trivial: usize,
    pub unfittable: usize,
    pub screened: usize,
    pub accepted: usize,
    pub shortlisted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WinnerSummary {
    pub sexpr: String,
    pub infix: String,
    pub fitted_params: Vec<f64>,
    pub best_inner_lr: Option<f64>,
    pub tailored_train_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub tool_version: String,
    pub system: SystemKind,
    pub config: PipelineConfig,
    pub counts: StageCounts,
    pub winner: Option<WinnerSummary>,
    pub shortlist: Vec<CandidateReport>,
    pub cells: Vec<SelectionCell>,
    pub baseline_test_rmse: f64,
    /// Baseline trained further for `metatailor_epochs` without tailoring.
    pub vanilla_test_rmse: f64,
    /// Winner's meta-tailored predictor evaluated with tailoring.
    pub tailored_test_rmse: Option<f64>,
    /// Same selection procedure run with the true Hamiltonian.
    #[serde(default)]
    pub oracle: Option<CandidateReport>,
    #[serde(default)]
    pub oracle_test_rmse: Option<f64>,
}

/// Output of the screening stage as persisted between runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenStage {
    pub counts: StageCounts,
    /// Accepted candidates, best ratio first.
    pub accepted: Vec<CandidateReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelectStage {
    winner: usize,
    reports: Vec<CandidateReport>,
    cells: Vec<SelectionCell>,
}

/// Directory holding the artifacts of each pipeline stage. With `resume`
/// set, a stage whose artifact already exists is loaded instead of rerun.
#[derive(Debug, Clone)]
pub struct StageStore {
    pub dir: PathBuf,
    pub resume: bool,
}

impl StageStore {
    pub fn new(dir: impl Into<PathBuf>, resume: bool) -> Result<Self, DiscoveryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, resume })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn load<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Option<T>, DiscoveryError> {
        let p = self.path(name);
        if self.resume && p.exists() {
            Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
        } else {
            Ok(None)
        }
    }

    fn save<T: Serialize>(&self, name: &str, value: &T) -> Result<(), DiscoveryError> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

/// Writes the screen table: one row per screened candidate.
pub fn write_screen_csv(path: &Path, reports: &[CandidateReport]) -> Result<(), DiscoveryError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| stage_err("screen", e))?;
    w.write_record([
        "ordinal",
        "sexpr",
        "size",
        "stat_true",
        "stat_null",
        "ratio",
        "accepted",
        "exit_stage",
        "fitted_params",
    ])
    .map_err(|e| stage_err("screen", e))?;
    for r in reports {
        let params: Vec<String> = r.fitted_params.iter().map(|v| v.to_string()).collect();
        let stage = serde_json::to_value(r.exit_stage)?;
        w.write_record([
            r.ordinal.to_string(),
            r.sexpr.clone(),
            r.size.to_string(),
            r.stat_true.to_string(),
            r.stat_null.to_string(),
            r.ratio().to_string(),
            r.accepted.to_string(),
            stage.as_str().unwrap_or_default().to_string(),
            params.join(";"),
        ])
        .map_err(|e| stage_err("screen", e))?;
    }
    w.flush()?;
    Ok(())
}

fn rmse(f: &PredictorMlp, g: Option<&Embedding>, test: &[Trajectory], ncfg: &NoetherConfig) -> Result<f64, TailorError> {
    let wins = windows(test, ncfg.horizon, ncfg.horizon);
    Ok(evaluate_mse(f, g, &wins, ncfg)?.sqrt())
}

/// The system's Hamiltonian in the DSL, up to an additive constant and a
/// positive factor, with its exact parameter value.
pub fn oracle_formula(kind: SystemKind, ctx: &DslContext) -> (Expr, Vec<f64>) {
    let (text, theta) = match kind {
        SystemKind::IdealSpring => ("(add (sq (in 0)) (mul (par q^2*p^-2) (sq (in 1))))", 1.0),
        SystemKind::IdealPendulum | SystemKind::DissipativePendulum => {
            ("(add (sq (in 1)) (mul (par p^2) (cos (in 0))))", -3.0)
        }
    };
    (Expr::parse(text, ctx).expect("oracle formula parses"), vec![theta])
}

/// Meta-tailors `pretrained` with the true Hamiltonian over the same inner
/// learning-rate grid as the candidates and returns the test RMSE.
pub fn oracle_tailoring(
    kind: SystemKind,
    ctx: &DslContext,
    pretrained: &PredictorMlp,
    data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(CandidateReport, Option<f64>), DiscoveryError> {
    let (expr, params) = oracle_formula(kind, ctx);
    let report = CandidateReport {
        ordinal: usize::MAX,
        sexpr: expr.to_sexpr(ctx),
        size: expr.size(),
        expr: Some(expr),
        fitted_params: params,
        stat_true: f64::NAN,
        stat_null: f64::NAN,
        accepted: true,
        exit_stage: ExitStage::Selection,
        reason: Some("oracle".into()),
        best_inner_lr: None,
        tailored_train_mse: None,
    };
    let sel = select_by_metatailoring(std::slice::from_ref(&report), ctx, pretrained, &data.train, cfg)?;
    let mut report = sel.reports[0].clone();
    report.exit_stage = ExitStage::Selection;
    let dt = data.train[0].dt;
    let rmse = match (&sel.predictors[0], report.best_inner_lr) {
        (Some(f), Some(lr)) => {
            let g = candidate_embedding(&report, ctx, &data.train).map_err(|e| stage_err("oracle", e))?;
            rmse(f, Some(&g), &data.test, &noether_for(cfg, dt, lr)).ok()
        }
        _ => None,
    };
    Ok((report, rmse))
}

/// Runs every stage on simulated data for `system`.
pub fn run_pipeline(
    system: &SystemSpec,
    cfg: &PipelineConfig,
    store: Option<&StageStore>,
) -> Result<DiscoveryResult, DiscoveryError> {
    cfg.validate()?;
    let data = match store.map(|s| s.load::<Dataset>("dataset.json")).transpose()?.flatten() {
        Some(d) => d,
        None => {
            let d = generate_dataset(system, &cfg.data, cfg.seed).map_err(|e| stage_err("gen-data", e))?;
            if let Some(s) = store {
                s.save("dataset.json", &d)?;
                write_trajectories_csv(&s.path("train.csv"), &d.train).map_err(|e| stage_err("gen-data", e))?;
                write_trajectories_csv(&s.path("test.csv"), &d.test).map_err(|e| stage_err("gen-data", e))?;
            }
            d
        }
    };
    run_pipeline_on(system.kind, &data, cfg, store)
}

/// Runs baseline training, enumeration, screening, shortlisting and
/// selection on the given data.
pub fn run_pipeline_on(
    kind: SystemKind,
    data: &Dataset,
    cfg: &PipelineConfig,
    store: Option<&StageStore>,
) -> Result<DiscoveryResult, DiscoveryError> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(stage_err("gen-data", "train and test data must be nonempty"));
    }
    let ctx = DslContext::for_system(kind);
    let dt = data.train[0].dt;
    let ncfg = noether_for(cfg, dt, 0.0);

    let baseline = match store.map(|s| s.load::<Checkpoint>("baseline.json")).transpose()?.flatten() {
        Some(ck) => ck.predictor().map_err(|e| stage_err("train-baseline", e))?,
        None => {
            let bcfg = BaselineConfig {
                seed: cfg.seed,
                ..cfg.baseline.clone()
            };
            let (f, _) = train_baseline(&data.train, &bcfg).map_err(|e| stage_err("train-baseline", e))?;
            if let Some(s) = store {
                s.save(
                    "baseline.json",
                    &Checkpoint::new(&f, None, Some(kind), None, serde_json::to_value(cfg)?),
                )?;
            }
            f
        }
    };

    let screened = match store.map(|s| s.load::<ScreenStage>("screen.json")).transpose()?.flatten() {
        Some(st) => st,
        None => {
            let candidates: Vec<Expr> = enumerate(cfg.max_depth, &ctx).collect();
            let n_null = cfg.null_sequences.unwrap_or(data.train.len());
            let null = sample_null_sequences(&data.train, n_null, cfg.seed ^ 0x9e37_79b9)
                .map_err(|e: DynamicsError| stage_err("screen", e))?;
            let reports = screen(&candidates, &ctx, &data.train, &null, cfg)?;
            if let Some(s) = store {
                let screened: Vec<CandidateReport> = reports
                    .iter()
                    .filter(|r| r.exit_stage != ExitStage::Trivial)
                    .cloned()
                    .collect();
                write_screen_csv(&s.path("screen.csv"), &screened)?;
            }
            let count = |st: ExitStage| reports.iter().filter(|r| r.exit_stage == st).count();
            let (trivial, unfittable) = (count(ExitStage::Trivial), count(ExitStage::Unfittable));
            let accepted: Vec<CandidateReport> = reports.into_iter().filter(|r| r.accepted).collect();
            let counts = StageCounts {
                enumerated: candidates.len(),
                trivial,
                unfittable,
                screened: candidates.len() - trivial,
                accepted: accepted.len(),
                shortlisted: accepted.len().min(cfg.shortlist_size),
            };
            let st = ScreenStage { counts, accepted };
            if let Some(s) = store {
                s.save("screen.json", &st)?;
            }
            st
        }
    };
    let mut counts = screened.counts.clone();
    let shortlist: Vec<CandidateReport> = screened.accepted.iter().take(cfg.shortlist_size).cloned().collect();
    counts.shortlisted = shortlist.len();

    let baseline_test_rmse = rmse(&baseline, None, &data.test, &ncfg).map_err(|e| stage_err("eval", e))?;
    let vanilla_cfg = BaselineConfig {
        epochs: cfg.metatailor_epochs,
        seed: cfg.seed,
        ..cfg.baseline.clone()
    };
    let (vanilla, _) = continue_baseline(&baseline, &data.train, &vanilla_cfg).map_err(|e| stage_err("eval", e))?;
    let vanilla_test_rmse = rmse(&vanilla, None, &data.test, &ncfg).map_err(|e| stage_err("eval", e))?;

    if shortlist.is_empty() {
        let result = DiscoveryResult {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            system: kind,
            config: cfg.clone(),
            counts,
            winner: None,
            shortlist,
            cells: Vec::new(),
            baseline_test_rmse,
            vanilla_test_rmse,
            tailored_test_rmse: None,
            oracle: None,
            oracle_test_rmse: None,
        };
        if let Some(s) = store {
            s.save("discovery.json", &result)?;
        }
        return Ok(result);
    }

    let (winner, reports, cells, winner_predictor) =
        match store.map(|s| s.load::<SelectStage>("selection.json")).transpose()?.flatten() {
            Some(st) => {
                let ck = store
                    .and_then(|s| s.load::<Checkpoint>("tailored.json").transpose())
                    .transpose()?
                    .ok_or_else(|| stage_err("select", "selection.json present without tailored.json"))?;
                let f = ck.predictor().map_err(|e| stage_err("select", e))?;
                (st.winner, st.reports, st.cells, Some(f))
            }
            None => {
                let sel = select_by_metatailoring(&shortlist, &ctx, &baseline, &data.train, cfg)?;
                let f = sel.predictors[sel.winner].clone();
                if let Some(s) = store {
                    s.save(
                        "selection.json",
                        &SelectStage {
                            winner: sel.winner,
                            reports: sel.reports.clone(),
                            cells: sel.cells.clone(),
                        },
                    )?;
                    if let Some(f) = &f {
                        let g = candidate_embedding(&sel.reports[sel.winner], &ctx, &data.train)
                            .map_err(|e| stage_err("select", e))?;
                        let lr = sel.reports[sel.winner].best_inner_lr.unwrap_or(0.0);
                        let ck = Checkpoint::new(
                            f,
                            Some(&g),
                            Some(kind),
                            Some(&noether_for(cfg, dt, lr)),
                            serde_json::to_value(cfg)?,
                        );
                        s.save("tailored.json", &ck)?;
                    }
                }
                (sel.winner, sel.reports, sel.cells, f)
            }
        };

    let w = &reports[winner];
    let tailored_test_rmse = match (&winner_predictor, w.best_inner_lr) {
        (Some(f), Some(lr)) => {
            let g = candidate_embedding(w, &ctx, &data.train).map_err(|e| stage_err("eval", e))?;
            rmse(f, Some(&g), &data.test, &noether_for(cfg, dt, lr)).ok()
        }
        _ => None,
    };
    let (oracle, oracle_test_rmse) = if cfg.oracle {
        let (report, rmse) = oracle_tailoring(kind, &ctx, &baseline, data, cfg)?;
        (Some(report), rmse)
    } else {
        (None, None)
    };
    let expr = w.expr(&ctx).map_err(|e| stage_err("select", e))?;
    let summary = WinnerSummary {
        sexpr: w.sexpr.clone(),
        infix: expr.to_infix(&ctx, &w.fitted_params),
        fitted_params: w.fitted_params.clone(),
        best_inner_lr: w.best_inner_lr,
        tailored_train_mse: w.tailored_train_mse,
    };
    let result = DiscoveryResult {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        system: kind,
        config: cfg.clone(),
        counts,
        winner: Some(summary),
        shortlist: reports,
        cells,
        baseline_test_rmse,
        vanilla_test_rmse,
        tailored_test_rmse,
        oracle,
        oracle_test_rmse,
    };
    if let Some(s) = store {
        s.save("discovery.json", &result)?;
    }
    Ok(result)
}

/// Least-squares fit `g ≈ c + Σ_k a_k·feature_k(s)` over `states`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm {
    pub intercept: f64,
    pub coeffs: Vec<f64>,
    /// RMS residual divided by the standard deviation of `g`.
    pub rel_residual: f64,
}

/// Expresses a fitted formula as an affine combination of known features,
/// used to recognize equivalent rewritings of the same energy form.
pub fn match_linear_form(
    expr: &Expr,
    params: &[f64],
    features: &[fn(State) -> f64],
    states: &[State],
) -> Option<LinearForm> {
    let c = expr.compile(2);
    let ys: Vec<f64> = states.iter().map(|&s| c.eval(s, params)).collect::<Result<_, _>>().ok()?;
    let k = features.len() + 1;
    let row = |s: State| -> Vec<f64> {
        let mut r = vec![1.0];
        r.extend(features.iter().map(|f| f(s)));
        r
    };
    let mut ata = vec![vec![0.0; k]; k];
    let mut aty = vec![0.0; k];
    for (&s, &y) in states.iter().zip(&ys) {
        let r = row(s);
        for i in 0..k {
            aty[i] += r[i] * y;
            for j in 0..k {
                ata[i][j] += r[i] * r[j];
            }
        }
    }
    let sol = solve(ata, aty)?;
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rss: f64 = states
        .iter()
        .zip(&ys)
        .map(|(&s, &y)| {
            let pred: f64 = row(s).iter().zip(&sol).map(|(a, b)| a * b).sum();
            (y - pred).powi(2)
        })
        .sum();
    Some(LinearForm {
        intercept: sol[0],
        coeffs: sol[1..].to_vec(),
        rel_residual: (rss / n).sqrt() / sd.max(f64::MIN_POSITIVE),
    })
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Coefficient θ when the fitted formula is an affine function of
/// `p² + θ·cos q` (pendulum) or `q² + θ·p²` (spring), i.e. the same energy
/// form up to scale and offset. `None` if it is not of that form.
pub fn energy_form_theta(kind: SystemKind, expr: &Expr, params: &[f64], states: &[State]) -> Option<f64> {
    let (lead, other): (fn(State) -> f64, fn(State) -> f64) = match kind {
        SystemKind::IdealSpring => (|s| s.q * s.q, |s| s.p * s.p),
        _ => (|s| s.p * s.p, |s| s.q.cos()),
    };
    let form = match_linear_form(expr, params, &[lead, other], states)?;
    if form.rel_residual > 1e-6 || form.coeffs[0].abs() < 1e-9 {
        return None;
    }
    Some(form.coeffs[1] / form.coeffs[0])
}
