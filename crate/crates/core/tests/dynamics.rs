use noether_core::dynamics::{
    generate_dataset, hamiltonian, integrate, parse_trajectories_csv, sample_null_sequences, write_trajectories_csv,
    DataConfig, State, SystemKind, SystemSpec, Trajectory,
};
use proptest::prelude::*;

fn drift(spec: &SystemSpec, t: &Trajectory) -> f64 {
    let h0 = hamiltonian(spec, t.states[0]);
    t.states
        .iter()
        .map(|&s| (hamiltonian(spec, s) - h0).abs() / h0.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Mean over sequences of within-sequence variance over pooled variance.
fn var_ratio(spec: &SystemSpec, trajs: &[Trajectory]) -> f64 {
    let all: Vec<f64> = trajs.iter().flat_map(|t| t.states.iter().map(|&s| hamiltonian(spec, s))).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let pooled = var(&all);
    trajs
        .iter()
        .map(|t| var(&t.states.iter().map(|&s| hamiltonian(spec, s)).collect::<Vec<_>>()) / (pooled + 1e-12))
        .sum::<f64>()
        / trajs.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn ideal_energy_drift_is_bounded(q in -2.0f64..2.0, p in -2.0f64..2.0, pendulum in any::<bool>()) {
        let spec = if pendulum { SystemSpec::ideal_pendulum() } else { SystemSpec::ideal_spring() };
        let t = integrate(&spec, State { q, p }, 0.01, 1000, 0).unwrap();
        prop_assert_eq!(t.states.len(), 1001);
        prop_assert!(drift(&spec, &t) <= 1e-6, "drift {}", drift(&spec, &t));
    }

    #[test]
    fn damped_energy_never_increases(q in -2.0f64..2.0, p in -2.0f64..2.0, damping in 0.01f64..0.5) {
        let spec = SystemSpec::dissipative_pendulum(damping, 0.0);
        let t = integrate(&spec, State { q, p }, 0.05, 200, 0).unwrap();
        let h: Vec<f64> = t.states.iter().map(|&s| hamiltonian(&spec, s)).collect();
        for w in h.windows(2) {
            prop_assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
        prop_assert!(h[h.len() - 1] < h[0]);
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000, kind in 0usize..3) {
        let kind = [SystemKind::IdealSpring, SystemKind::IdealPendulum, SystemKind::DissipativePendulum][kind];
        let cfg = DataConfig { train_trajectories: 3, test_trajectories: 1, ..DataConfig::default() };
        let data = generate_dataset(&SystemSpec::default_for(kind), &cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectories_csv(&path, &data.train).unwrap();
        let back = parse_trajectories_csv(&std::fs::read_to_string(&path).unwrap(), kind.tag()).unwrap();
        prop_assert_eq!(back.len(), data.train.len());
        for (a, b) in data.train.iter().zip(&back) {
            prop_assert_eq!(a.states.len(), b.states.len());
            prop_assert!((a.dt - b.dt).abs() <= 1e-12);
            for (x, y) in a.states.iter().zip(&b.states) {
                prop_assert!((x.q - y.q).abs() <= 1e-12 && (x.p - y.p).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn null_sequences_are_deterministic_and_boxed(seed in 0u64..1000, n in 0usize..10) {
        let data = generate_dataset(&SystemSpec::ideal_pendulum(), &DataConfig { train_trajectories: 4, ..DataConfig::default() }, 1).unwrap();
        let a = sample_null_sequences(&data.train, n, seed).unwrap();
        let b = sample_null_sequences(&data.train, n, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        let (qlo, qhi, plo, phi) = data.train.iter().flat_map(|t| &t.states).fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), s| (a.min(s.q), b.max(s.q), c.min(s.p), d.max(s.p)),
        );
        for t in &a {
            prop_assert!(data.train.iter().any(|r| r.states.len() == t.states.len() && r.dt == t.dt));
            for s in &t.states {
                prop_assert!(s.q >= qlo && s.q <= qhi && s.p >= plo && s.p <= phi);
            }
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let spec = SystemSpec::dissipative_pendulum(0.05, 0.01);
    let cfg = DataConfig::default();
    assert_eq!(generate_dataset(&spec, &cfg, 4).unwrap(), generate_dataset(&spec, &cfg, 4).unwrap());
    assert_ne!(generate_dataset(&spec, &cfg, 4).unwrap(), generate_dataset(&spec, &cfg, 5).unwrap());
}

#[test]
fn default_split_shape() {
    let data = generate_dataset(&SystemSpec::ideal_spring(), &DataConfig::default(), 0).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (25, 25));
    assert!(data.train.iter().chain(&data.test).all(|t| t.states.len() == 30 && t.dt == 0.1));
}

#[test]
fn true_energy_is_far_more_conserved_than_on_null_data() {
    for spec in [SystemSpec::ideal_spring(), SystemSpec::ideal_pendulum()] {
        let data = generate_dataset(&spec, &DataConfig::default(), 2).unwrap();
        let null = sample_null_sequences(&data.train, 25, 3).unwrap();
        let (t, n) = (var_ratio(&spec, &data.train), var_ratio(&spec, &null));
        assert!(n / t.max(1e-300) > 1e4, "{:?}: true {t:e} null {n:e}", spec.kind);
    }
}

#[test]
fn damping_zero_matches_ideal_pendulum() {
    let x0 = State { q: 0.7, p: -0.3 };
    let a = integrate(&SystemSpec::dissipative_pendulum(0.0, 0.0), x0, 0.1, 50, 0).unwrap();
    let b = integrate(&SystemSpec::ideal_pendulum(), x0, 0.1, 50, 0).unwrap();
    assert_eq!(a.states, b.states);
}
