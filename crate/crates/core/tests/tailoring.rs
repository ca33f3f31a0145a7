use noether_core::autodiff::{ParamVector, Tape};
use noether_core::dsl::{DslContext, Expr};
use noether_core::dynamics::{generate_dataset, DataConfig, Dataset, State, SystemKind, SystemSpec};
use noether_core::tailoring::{
    evaluate_mse, meta_gradient, meta_train, multi_inner_step_probe, noether_loss, predict_sequence, rollout,
    tailor_step, train_baseline, windows, BaselineConfig, Checkpoint, Embedding, InnerOptimizer, MetaTrainConfig,
    NoetherConfig, NoetherVariant, PredictorMlp,
};
use proptest::prelude::*;

const SPRING_H: &str = "(add (sq (in 0)) (mul (par q^2*p^-2) (sq (in 1))))";
const TWO_PARAM: &str = "(add (mul (par 1) (sq (in 0))) (mul (par q^2*p^-2) (sq (in 1))))";

fn spring_data(seed: u64, train: usize) -> Dataset {
    let cfg = DataConfig {
        train_trajectories: train,
        test_trajectories: 4,
        ..DataConfig::default()
    };
    generate_dataset(&SystemSpec::ideal_spring(), &cfg, seed).unwrap()
}

fn symbolic(text: &str, params: Vec<f64>) -> Embedding {
    let ctx = DslContext::for_system(SystemKind::IdealSpring);
    Embedding::symbolic(Expr::parse(text, &ctx).unwrap(), ParamVector::with_prefix("phi", params)).unwrap()
}

fn bits(states: &[State]) -> Vec<(u64, u64)> {
    states.iter().map(|s| (s.q.to_bits(), s.p.to_bits())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn phi_gradient_through_inner_step_matches_fd(
        seed in 0u64..500,
        a in 0.3f64..2.0,
        b in 0.3f64..2.0,
        lr in 1e-3f64..3e-2,
        pairwise in any::<bool>(),
    ) {
        let data = spring_data(seed, 2);
        let f = PredictorMlp::new(&[5], seed);
        let g = symbolic(TWO_PARAM, vec![a, b]);
        let w = &windows(&data.test, 5, 5)[0];
        let cfg = NoetherConfig {
            inner_lr: lr,
            horizon: 5,
            variant: if pairwise { NoetherVariant::PairwiseB } else { NoetherVariant::AnchorA },
            ..NoetherConfig::default()
        };
        let (loss, _, gp) = meta_gradient(&f, &g, w, &cfg, &mut Tape::new()).unwrap();
        let one = std::slice::from_ref(w);
        prop_assert!((loss - evaluate_mse(&f, Some(&g), one, &cfg).unwrap()).abs() <= 1e-12 * loss.max(1.0));
        let phi = [a, b];
        let mut fd = [0.0; 2];
        for i in 0..2 {
            let h = 1e-6;
            let mut up = phi.to_vec();
            up[i] += h;
            let mut dn = phi.to_vec();
            dn[i] -= h;
            fd[i] = (evaluate_mse(&f, Some(&g.with_phi(up)), one, &cfg).unwrap()
                - evaluate_mse(&f, Some(&g.with_phi(dn)), one, &cfg).unwrap())
                / (2.0 * h);
        }
        let err = ((gp[0] - fd[0]).powi(2) + (gp[1] - fd[1]).powi(2)).sqrt();
        let norm = (fd[0].powi(2) + fd[1].powi(2)).sqrt();
        prop_assert!(err <= 1e-3 * norm.max(1e-10), "{:?} vs {:?}", gp, fd);
    }

    #[test]
    fn identity_contracts_are_bitwise(seed in 0u64..500, q in -1.5f64..1.5, p in -1.5f64..1.5, c in -3.0f64..3.0) {
        let f = PredictorMlp::new(&[7, 7], seed);
        let x0 = State { q, p };
        let plain = rollout(&f, x0, 10, 0.1).unwrap();
        let base = NoetherConfig::default();
        let constant = symbolic("(par 1)", vec![c]);
        let h = symbolic(SPRING_H, vec![1.0]);
        let zero_lr = NoetherConfig { inner_lr: 0.0, ..base.clone() };
        prop_assert_eq!(bits(&predict_sequence(&f, &h, x0, &zero_lr).unwrap()), bits(&plain));
        for variant in [NoetherVariant::AnchorA, NoetherVariant::PairwiseB] {
            let cfg = NoetherConfig { variant, inner_steps: 3, ..base.clone() };
            prop_assert_eq!(bits(&predict_sequence(&f, &constant, x0, &cfg).unwrap()), bits(&plain));
            let theta = tailor_step(&f, &constant, x0, &cfg).unwrap();
            prop_assert_eq!(theta.values(), f.theta());
        }
    }
}

#[test]
fn variants_agree_when_predictions_are_conserved() {
    // zero weights give f ≡ 0, so every prediction equals x0
    let f0 = PredictorMlp::new(&[4], 0);
    let f = f0.with_params(vec![0.0; f0.params.len()]);
    let x0 = State { q: 0.4, p: -0.9 };
    let preds = rollout(&f, x0, 6, 0.1).unwrap();
    assert!(preds.iter().all(|s| *s == x0));
    for g in [symbolic(SPRING_H, vec![1.3]), Embedding::neural(&[6], 3, 1)] {
        assert_eq!(noether_loss(&g, x0, &preds, NoetherVariant::AnchorA).unwrap(), 0.0);
        assert_eq!(noether_loss(&g, x0, &preds, NoetherVariant::PairwiseB).unwrap(), 0.0);
    }
}

#[test]
fn zero_dt_rollout_stays_put() {
    let f = PredictorMlp::new(&[4], 3);
    let x0 = State { q: 0.1, p: 0.2 };
    assert!(rollout(&f, x0, 5, 0.0).unwrap().iter().all(|s| *s == x0));
}

#[test]
fn probe_with_true_energy_improves_then_stays_flat_for_constant() {
    let data = spring_data(2, 8);
    let (f, _) = train_baseline(
        &data.train,
        &BaselineConfig {
            hidden: vec![16],
            epochs: 60,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let g = Embedding::symbolic_standardized(
        Expr::parse(SPRING_H, &DslContext::for_system(SystemKind::IdealSpring)).unwrap(),
        ParamVector::with_prefix("phi", vec![1.0]),
        &data.train,
    )
    .unwrap();
    let cfg = NoetherConfig::default();
    let wins = windows(&data.test, 10, 10);
    let mut improved = 0;
    for w in &wins {
        let curve = multi_inner_step_probe(&f, &g, w.x0, &w.truth, 20, 1e-3, InnerOptimizer::Sgd, &cfg).unwrap();
        assert_eq!(curve.len(), 21);
        assert!(curve.windows(2).all(|p| p[1].inner_loss <= p[0].inner_loss));
        improved += (curve[1].task_loss <= curve[0].task_loss) as usize;
    }
    assert!(2 * improved >= wins.len(), "{improved} of {}", wins.len());

    let w = &wins[0];
    let flat = multi_inner_step_probe(&f, &symbolic("(par 1)", vec![2.0]), w.x0, &w.truth, 10, 0.1, InnerOptimizer::Adam, &cfg)
        .unwrap();
    assert!(flat.iter().all(|p| p.inner_loss == 0.0 && p.task_loss == flat[0].task_loss));
}

#[test]
fn meta_training_is_seed_deterministic_and_checkpoints_round_trip() {
    let data = spring_data(4, 3);
    let f = PredictorMlp::new(&[8], 4);
    let g = Embedding::neural(&[6], 2, 5);
    let cfg = NoetherConfig::default();
    let tcfg = MetaTrainConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let a = meta_train(&f, &g, &data.train, None, &cfg, &tcfg).unwrap();
    let b = meta_train(&f, &g, &data.train, None, &cfg, &tcfg).unwrap();
    assert_eq!(a.predictor.theta(), b.predictor.theta());
    assert_eq!(a.embedding.phi().values(), b.embedding.phi().values());
    assert_eq!(a.history.len(), 3);

    let ck = Checkpoint::new(&a.predictor, Some(&a.embedding), Some(SystemKind::IdealSpring), Some(&cfg), serde_json::json!({"k": 1}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.predictor().unwrap().theta(), a.predictor.theta());
    let ctx = DslContext::for_system(SystemKind::IdealSpring);
    let e = back.embedding(&ctx).unwrap().unwrap();
    assert_eq!(e.phi().values(), a.embedding.phi().values());

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["version"] = serde_json::json!(999);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
