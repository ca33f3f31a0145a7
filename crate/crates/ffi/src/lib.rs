//! C ABI over `noether-core`.
//!
//! Every fallible function returns a [`NoetherStatus`]; on failure the
//! message is available from [`noether_last_error`] on the same thread.
//! Objects are opaque handles created by `*_load`, `*_generate` or
//! `*_parse` and released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use noether_core::bounds::{self, BoundInputs};
use noether_core::cli::{load_or_generate, CliError, RunConfig};
use noether_core::dsl::{check_units, DslContext, DslError, Expr};
use noether_core::dynamics::{generate_dataset, DataConfig, Dataset, State, SystemKind, SystemSpec};
use noether_core::tailoring::{predict_sequence, rollout, Checkpoint, Embedding, NoetherConfig, PredictorMlp, TailorError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoetherStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Domain = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Which half of a dataset to address.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoetherSplit {
    Train = 0,
    Test = 1,
}

/// Inputs of the generalization bound; `conserved != 0` selects ξ = m.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NoetherBoundInputs {
    pub c: f64,
    pub r: f64,
    pub zeta: f64,
    pub rho: u32,
    pub delta: f64,
    pub n: u64,
    pub d: u32,
    pub m: u32,
    pub conserved: i32,
}

pub struct NoetherDataset {
    data: Dataset,
}

pub struct NoetherCheckpoint {
    predictor: PredictorMlp,
    embedding: Option<Embedding>,
    tailoring: NoetherConfig,
}

pub struct NoetherFormula {
    expr: Expr,
    compiled: noether_core::dsl::CompiledExpr,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(NoetherStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Domain(m) => Failure(NoetherStatus::Domain, m),
            CliError::Io(m) => Failure(NoetherStatus::Io, m),
        }
    }
}

impl From<TailorError> for Failure {
    fn from(e: TailorError) -> Self {
        CliError::from(e).into()
    }
}

impl From<DslError> for Failure {
    fn from(e: DslError) -> Self {
        let status = match e {
            DslError::Numeric(_) => NoetherStatus::Domain,
            _ => NoetherStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<noether_core::dynamics::DynamicsError> for Failure {
    fn from(e: noether_core::dynamics::DynamicsError) -> Self {
        CliError::from(e).into()
    }
}

impl From<bounds::BoundError> for Failure {
    fn from(e: bounds::BoundError) -> Self {
        Failure(NoetherStatus::Domain, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(NoetherStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NoetherStatus {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(NoetherStatus::Panic, msg))
    });
    match result {
        Ok(()) => NoetherStatus::Ok,
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(NoetherStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(NoetherStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(NoetherStatus::NullPointer, format!("{what} is null")))
}

fn parse_kind(s: &str) -> Result<SystemKind, Failure> {
    s.parse().map_err(invalid)
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `cap`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn noether_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn noether_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Simulates a dataset with the default sampling settings.
///
/// # Safety
/// `system` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn noether_dataset_generate(
    system: *const c_char,
    seed: u64,
    train_trajectories: u32,
    test_trajectories: u32,
    out: *mut *mut NoetherDataset,
) -> NoetherStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind = parse_kind(str_arg(system, "system")?)?;
        let cfg = DataConfig {
            train_trajectories: train_trajectories as usize,
            test_trajectories: test_trajectories as usize,
            ..DataConfig::default()
        };
        let data = generate_dataset(&SystemSpec::default_for(kind), &cfg, seed)?;
        *out = Box::into_raw(Box::new(NoetherDataset { data }));
        Ok(())
    })
}

/// Loads `train.csv`/`test.csv` from a directory, or splits a single CSV.
///
/// # Safety
/// `system` and `path` must be NUL-terminated strings and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_dataset_load(
    system: *const c_char,
    path: *const c_char,
    out: *mut *mut NoetherDataset,
) -> NoetherStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind = parse_kind(str_arg(system, "system")?)?;
        let path = str_arg(path, "path")?;
        let cfg = RunConfig {
            system: kind,
            ..RunConfig::default()
        };
        let data = load_or_generate(&cfg, Some(Path::new(path)))?;
        *out = Box::into_raw(Box::new(NoetherDataset { data }));
        Ok(())
    })
}

fn split(ds: &NoetherDataset, which: NoetherSplit) -> &[noether_core::dynamics::Trajectory] {
    match which {
        NoetherSplit::Train => &ds.data.train,
        NoetherSplit::Test => &ds.data.test,
    }
}

/// # Safety
/// `ds` must be a live dataset handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_dataset_num_trajectories(
    ds: *const NoetherDataset,
    which: NoetherSplit,
    out: *mut usize,
) -> NoetherStatus {
    guard(|| {
        *out_arg(out, "out")? = split(ref_arg(ds, "dataset")?, which).len();
        Ok(())
    })
}

/// Number of states in trajectory `index`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_dataset_trajectory_len(
    ds: *const NoetherDataset,
    which: NoetherSplit,
    index: usize,
    out: *mut usize,
) -> NoetherStatus {
    guard(|| {
        let t = split(ref_arg(ds, "dataset")?, which)
            .get(index)
            .ok_or_else(|| invalid(format!("trajectory {index} out of range")))?;
        *out_arg(out, "out")? = t.states.len();
        Ok(())
    })
}

/// Writes trajectory `index` as interleaved `q, p` pairs into `buf`
/// (`cap` doubles). Needs `2 × len` doubles.
///
/// # Safety
/// `ds` must be a live dataset handle and `buf` point to `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn noether_dataset_copy_states(
    ds: *const NoetherDataset,
    which: NoetherSplit,
    index: usize,
    buf: *mut f64,
    cap: usize,
) -> NoetherStatus {
    guard(|| {
        let t = split(ref_arg(ds, "dataset")?, which)
            .get(index)
            .ok_or_else(|| invalid(format!("trajectory {index} out of range")))?;
        write_states(&t.states, buf, cap)
    })
}

unsafe fn write_states(states: &[State], buf: *mut f64, cap: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(Failure(NoetherStatus::NullPointer, "buf is null".into()));
    }
    if cap < 2 * states.len() {
        return Err(Failure(
            NoetherStatus::BufferTooSmall,
            format!("need {} doubles, got {cap}", 2 * states.len()),
        ));
    }
    let out = std::slice::from_raw_parts_mut(buf, 2 * states.len());
    for (i, s) in states.iter().enumerate() {
        out[2 * i] = s.q;
        out[2 * i + 1] = s.p;
    }
    Ok(())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn noether_dataset_free(ds: *mut NoetherDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a predictor checkpoint written by `train-baseline`,
/// `train-noether` or `discover`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_checkpoint_load(path: *const c_char, out: *mut *mut NoetherCheckpoint) -> NoetherStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        let predictor = ck.predictor()?;
        let kind = ck.system.unwrap_or(SystemKind::IdealPendulum);
        let embedding = ck.embedding(&DslContext::for_system(kind))?;
        let tailoring = ck.tailoring.clone().unwrap_or_default();
        *out = Box::into_raw(Box::new(NoetherCheckpoint {
            predictor,
            embedding,
            tailoring,
        }));
        Ok(())
    })
}

/// 1 when the checkpoint carries a conservation embedding, 0 otherwise.
///
/// # Safety
/// `ck` must be a live checkpoint handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_checkpoint_has_embedding(ck: *const NoetherCheckpoint, out: *mut i32) -> NoetherStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(ck, "checkpoint")?.embedding.is_some() as i32;
        Ok(())
    })
}

/// Predicted time derivative `(dq, dp)` at `(q, p)`.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `dq` and `dp` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_checkpoint_derivative(
    ck: *const NoetherCheckpoint,
    q: f64,
    p: f64,
    dq: *mut f64,
    dp: *mut f64,
) -> NoetherStatus {
    guard(|| {
        let d = ref_arg(ck, "checkpoint")?.predictor.derivative(State { q, p });
        *out_arg(dq, "dq")? = d[0];
        *out_arg(dp, "dp")? = d[1];
        Ok(())
    })
}

/// Euler rollout of `horizon` steps from `(q0, p0)` with the checkpoint's
/// step size; writes the `horizon` predicted states after the start as
/// interleaved `q, p`. With `tailored != 0` the predictor is first adapted
/// to the start state with one Noether inner step.
///
/// # Safety
/// `ck` must be a live checkpoint handle and `buf` point to `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn noether_checkpoint_rollout(
    ck: *const NoetherCheckpoint,
    q0: f64,
    p0: f64,
    horizon: usize,
    tailored: i32,
    buf: *mut f64,
    cap: usize,
) -> NoetherStatus {
    guard(|| {
        let ck = ref_arg(ck, "checkpoint")?;
        let x0 = State { q: q0, p: p0 };
        let cfg = NoetherConfig {
            horizon,
            ..ck.tailoring.clone()
        };
        let states = if tailored != 0 {
            let g = ck
                .embedding
                .as_ref()
                .ok_or_else(|| Failure(NoetherStatus::Domain, "checkpoint has no embedding".into()))?;
            predict_sequence(&ck.predictor, g, x0, &cfg)?
        } else {
            rollout(&ck.predictor, x0, horizon, cfg.dt)?
        };
        write_states(&states, buf, cap)
    })
}

/// # Safety
/// `ck` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn noether_checkpoint_free(ck: *mut NoetherCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Parses a formula in S-expression form, e.g.
/// `(add (sq (in 1)) (mul (par p^2) (cos (in 0))))`, and checks its units.
///
/// # Safety
/// `system` and `sexpr` must be NUL-terminated strings and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_formula_parse(
    system: *const c_char,
    sexpr: *const c_char,
    out: *mut *mut NoetherFormula,
) -> NoetherStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ctx = DslContext::for_system(parse_kind(str_arg(system, "system")?)?);
        let expr = Expr::parse(str_arg(sexpr, "sexpr")?, &ctx)?;
        check_units(&expr, &ctx.input_units)?;
        let compiled = expr.compile(ctx.input_names.len());
        *out = Box::into_raw(Box::new(NoetherFormula { expr, compiled }));
        Ok(())
    })
}

/// # Safety
/// `f` must be a live formula handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_formula_param_count(f: *const NoetherFormula, out: *mut usize) -> NoetherStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(f, "formula")?.expr.param_count();
        Ok(())
    })
}

/// Evaluates the formula at `(q, p)` with `n_params` parameter values.
///
/// # Safety
/// `f` must be a live formula handle, `params` point to `n_params`
/// doubles (may be null when zero) and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn noether_formula_eval(
    f: *const NoetherFormula,
    params: *const f64,
    n_params: usize,
    q: f64,
    p: f64,
    out: *mut f64,
) -> NoetherStatus {
    guard(|| {
        let f = ref_arg(f, "formula")?;
        let params: &[f64] = if n_params == 0 {
            &[]
        } else if params.is_null() {
            return Err(Failure(NoetherStatus::NullPointer, "params is null".into()));
        } else {
            std::slice::from_raw_parts(params, n_params)
        };
        *out_arg(out, "out")? = f.compiled.eval(State { q, p }, params)?;
        Ok(())
    })
}

/// # Safety
/// `f` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn noether_formula_free(f: *mut NoetherFormula) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Evaluates the generalization bound.
///
/// # Safety
/// `inputs` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn noether_bound_eval(inputs: *const NoetherBoundInputs, out: *mut f64) -> NoetherStatus {
    guard(|| {
        let b = ref_arg(inputs, "inputs")?;
        let inputs = BoundInputs {
            c: b.c,
            r: b.r,
            zeta: b.zeta,
            rho: b.rho,
            delta: b.delta,
            n: b.n,
            d: b.d,
            m: b.m,
            conserved: b.conserved != 0,
        };
        *out_arg(out, "out")? = bounds::eval_bound(&inputs)?;
        Ok(())
    })
}
