//! Trajectory generation for the spring and pendulum systems, the
//! real-pendulum CSV loader, and null sequences for conservation screening.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("reference data is empty")]
    EmptyReference,
}

/// Phase-space point. `q` is the generalized coordinate, `p` the momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: f64,
    pub p: f64,
}

impl State {
    pub const fn new(q: f64, p: f64) -> Self {
        Self { q, p }
    }

    pub fn as_array(self) -> [f64; 2] {
        [self.q, self.p]
    }

    pub fn from_array(x: [f64; 2]) -> Self {
        Self { q: x[0], p: x[1] }
    }

    pub fn is_finite(self) -> bool {
        self.q.is_finite() && self.p.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub dt: f64,
    pub system_tag: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Central finite-difference estimate of dx/dt at every state
    /// (one-sided at the ends).
    pub fn finite_difference_derivatives(&self) -> Vec<[f64; 2]> {
        let n = self.states.len();
        let s = &self.states;
        (0..n)
            .map(|i| {
                let (a, b, h) = if n < 2 {
                    return [0.0, 0.0];
                } else if i == 0 {
                    (s[0], s[1], self.dt)
                } else if i == n - 1 {
                    (s[n - 2], s[n - 1], self.dt)
                } else {
                    (s[i - 1], s[i + 1], 2.0 * self.dt)
                };
                [(b.q - a.q) / h, (b.p - a.p) / h]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    IdealSpring,
    IdealPendulum,
    DissipativePendulum,
}

impl SystemKind {
    pub fn tag(self) -> &'static str {
        match self {
            SystemKind::IdealSpring => "ideal-spring",
            SystemKind::IdealPendulum => "ideal-pendulum",
            SystemKind::DissipativePendulum => "dissipative-pendulum",
        }
    }

    pub fn is_pendulum(self) -> bool {
        !matches!(self, SystemKind::IdealSpring)
    }
}

impl std::str::FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ideal-spring" | "spring" => Ok(SystemKind::IdealSpring),
            "ideal-pendulum" | "pendulum" => Ok(SystemKind::IdealPendulum),
            "dissipative-pendulum" | "real-pendulum" => Ok(SystemKind::DissipativePendulum),
            other => Err(format!("unknown system '{other}'")),
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub damping: f64,
    pub noise_std: f64,
}

impl SystemSpec {
    pub fn ideal_spring() -> Self {
        Self {
            kind: SystemKind::IdealSpring,
            damping: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn ideal_pendulum() -> Self {
        Self {
            kind: SystemKind::IdealPendulum,
            damping: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn dissipative_pendulum(damping: f64, noise_std: f64) -> Self {
        Self {
            kind: SystemKind::DissipativePendulum,
            damping,
            noise_std,
        }
    }

    /// Default spec for a system kind.
    pub fn default_for(kind: SystemKind) -> Self {
        match kind {
            SystemKind::IdealSpring => Self::ideal_spring(),
            SystemKind::IdealPendulum => Self::ideal_pendulum(),
            SystemKind::DissipativePendulum => Self::dissipative_pendulum(0.05, 0.01),
        }
    }

    /// Default radius band in the (q, p) plane from which initial
    /// conditions are drawn.
    pub fn radius_band(&self) -> (f64, f64) {
        match self.kind {
            SystemKind::IdealSpring => (0.1, 1.0),
            _ => (0.2, 2.5),
        }
    }
}

/// Energy: `½(q² + p²)` for the spring, `3(1 − cos q) + p²` for the pendulums.
pub fn hamiltonian(spec: &SystemSpec, s: State) -> f64 {
    match spec.kind {
        SystemKind::IdealSpring => 0.5 * (s.q * s.q + s.p * s.p),
        SystemKind::IdealPendulum | SystemKind::DissipativePendulum => {
            3.0 * (1.0 - s.q.cos()) + s.p * s.p
        }
    }
}

/// Hamilton's equations, with `−damping·p` added to ṗ for the dissipative kind.
pub fn vector_field(spec: &SystemSpec, s: State) -> (f64, f64) {
    match spec.kind {
        SystemKind::IdealSpring => (s.p, -s.q),
        SystemKind::IdealPendulum => (2.0 * s.p, -3.0 * s.q.sin()),
        SystemKind::DissipativePendulum => (2.0 * s.p, -3.0 * s.q.sin() - spec.damping * s.p),
    }
}

fn rk4_step(spec: &SystemSpec, s: State, h: f64) -> State {
    let f = |x: State| vector_field(spec, x);
    let k1 = f(s);
    let k2 = f(State::new(s.q + 0.5 * h * k1.0, s.p + 0.5 * h * k1.1));
    let k3 = f(State::new(s.q + 0.5 * h * k2.0, s.p + 0.5 * h * k2.1));
    let k4 = f(State::new(s.q + h * k3.0, s.p + h * k3.1));
    State::new(
        s.q + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        s.p + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

/// Classical RK4 rollout with one step per sample; noise is added afterwards.
pub fn integrate(
    spec: &SystemSpec,
    x0: State,
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory, DynamicsError> {
    integrate_substepped(spec, x0, dt, steps, 1, seed)
}

/// Like [`integrate`] but takes `substeps` RK4 steps of `dt / substeps`
/// between recorded samples.
pub fn integrate_substepped(
    spec: &SystemSpec,
    x0: State,
    dt: f64,
    steps: usize,
    substeps: usize,
    seed: u64,
) -> Result<Trajectory, DynamicsError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::BadTimeStep(dt));
    }
    let substeps = substeps.max(1);
    let h = dt / substeps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0);
    let mut s = x0;
    for step in 1..=steps {
        for _ in 0..substeps {
            s = rk4_step(spec, s, h);
        }
        if !s.is_finite() {
            return Err(DynamicsError::Diverged { step });
        }
        states.push(s);
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_std).expect("finite std");
        for st in &mut states {
            st.q += normal.sample(&mut rng);
            st.p += normal.sample(&mut rng);
        }
    }
    Ok(Trajectory {
        states,
        dt,
        system_tag: spec.kind.tag().to_string(),
    })
}

/// Data-generation regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dt: f64,
    pub states_per_trajectory: usize,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    /// RK4 substeps per recorded sample.
    pub substeps: usize,
    /// Overrides the system's default initial-condition radius band.
    pub radius_band: Option<(f64, f64)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            states_per_trajectory: 30,
            train_trajectories: 25,
            test_trajectories: 25,
            substeps: 10,
            radius_band: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Initial condition drawn uniformly in angle and in radius over the
/// system's band of the (q, p) plane.
pub fn sample_initial_state(band: (f64, f64), rng: &mut impl Rng) -> State {
    let (lo, hi) = band;
    let r = rng.gen_range(lo..hi);
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    State::new(r * a.cos(), r * a.sin())
}

/// Train/test trajectories, deterministic given `seed`.
pub fn generate_dataset(spec: &SystemSpec, cfg: &DataConfig, seed: u64) -> Result<Dataset, DynamicsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = cfg.states_per_trajectory.saturating_sub(1);
    let band = cfg.radius_band.unwrap_or_else(|| spec.radius_band());
    let mut make = |n: usize| -> Result<Vec<Trajectory>, DynamicsError> {
        (0..n)
            .map(|_| {
                let x0 = sample_initial_state(band, &mut rng);
                let noise_seed: u64 = rng.gen();
                integrate_substepped(spec, x0, cfg.dt, steps, cfg.substeps, noise_seed)
            })
            .collect()
    };
    let train = make(cfg.train_trajectories)?;
    let test = make(cfg.test_trajectories)?;
    Ok(Dataset { train, test })
}

/// Writes trajectories as `t,q,p` rows. Each trajectory restarts at t = 0,
/// which the loader treats as a boundary.
pub fn write_trajectories_csv(path: &Path, trajs: &[Trajectory]) -> Result<(), DynamicsError> {
    let mut out = String::from("t,q,p\n");
    for tr in trajs {
        for (i, s) in tr.states.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i as f64 * tr.dt, s.q, s.p));
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Loads a `t,q,p` CSV. A new trajectory starts whenever time fails to
/// increase or jumps by more than twice the median positive step.
/// Segments with a single row are dropped.
pub fn load_real_pendulum(path: &Path) -> Result<Vec<Trajectory>, DynamicsError> {
    let text = fs::read_to_string(path)?;
    parse_trajectories_csv(&text, "real-pendulum")
}

pub fn parse_trajectories_csv(text: &str, tag: &str) -> Result<Vec<Trajectory>, DynamicsError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DynamicsError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let col = |name: &str| -> Result<usize, DynamicsError> {
        headers.iter().position(|h| h == name).ok_or(DynamicsError::Parse {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let (it, iq, ip) = (col("t")?, col("q")?, col("p")?);

    let mut rows: Vec<(f64, State)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DynamicsError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<f64, DynamicsError> {
            let raw = rec.get(i).ok_or(DynamicsError::Parse {
                line,
                message: format!("expected at least {} fields", i + 1),
            })?;
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or(DynamicsError::Parse {
                    line,
                    message: format!("not a finite number: '{raw}'"),
                })
        };
        rows.push((field(it)?, State::new(field(iq)?, field(ip)?)));
    }
    Ok(split_rows(&rows, tag))
}

fn split_rows(rows: &[(f64, State)], tag: &str) -> Vec<Trajectory> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mut steps: Vec<f64> = rows
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .filter(|d| *d > 0.0)
        .collect();
    steps.sort_by(|a, b| a.total_cmp(b));
    let median = if steps.is_empty() {
        f64::INFINITY
    } else if steps.len() % 2 == 1 {
        steps[steps.len() / 2]
    } else {
        0.5 * (steps[steps.len() / 2 - 1] + steps[steps.len() / 2])
    };

    let mut out = Vec::new();
    let mut start = 0;
    let flush = |from: usize, to: usize, out: &mut Vec<Trajectory>| {
        if to - from >= 2 {
            let seg = &rows[from..to];
            let dt = (seg[seg.len() - 1].0 - seg[0].0) / (seg.len() - 1) as f64;
            out.push(Trajectory {
                states: seg.iter().map(|r| r.1).collect(),
                dt,
                system_tag: tag.to_string(),
            });
        }
    };
    for i in 1..rows.len() {
        let d = rows[i].0 - rows[i - 1].0;
        if d <= 0.0 || d > 2.0 * median {
            flush(start, i, &mut out);
            start = i;
        }
    }
    flush(start, rows.len(), &mut out);
    out
}

/// Per-dimension (min, max) over every state of `trajs`.
pub fn bounding_box(trajs: &[Trajectory]) -> Option<[(f64, f64); 2]> {
    let mut it = trajs.iter().flat_map(|t| t.states.iter());
    let first = it.next()?;
    let mut bx = [(first.q, first.q), (first.p, first.p)];
    for s in it {
        bx[0] = (bx[0].0.min(s.q), bx[0].1.max(s.q));
        bx[1] = (bx[1].0.min(s.p), bx[1].1.max(s.p));
    }
    Some(bx)
}

/// Structure-free sequences: each copies the length and dt of a uniformly
/// chosen reference trajectory, with states drawn i.i.d. uniform over the
/// reference bounding box.
pub fn sample_null_sequences(
    reference: &[Trajectory],
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, DynamicsError> {
    let bx = bounding_box(reference).ok_or(DynamicsError::EmptyReference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    };
    Ok((0..n)
        .map(|_| {
            let r = &reference[rng.gen_range(0..reference.len())];
            let states = (0..r.len())
                .map(|_| {
                    let q = draw(bx[0], &mut rng);
                    let p = draw(bx[1], &mut rng);
                    State::new(q, p)
                })
                .collect();
            Trajectory {
                states,
                dt: r.dt,
                system_tag: "null".to_string(),
            }
        })
        .collect())
}
