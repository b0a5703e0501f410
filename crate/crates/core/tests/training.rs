use hosm_core::autodiff::AdamState;
use hosm_core::distributions::Distribution;
use hosm_core::models::{FirstOrderModel, ModelConfig, ScoreModelPair, SecondOrderMode};
use hosm_core::objectives::*;
use hosm_core::rng::stream;

fn small() -> ModelConfig {
    ModelConfig {
        hidden_s1: 16,
        hidden_s2: 8,
        ..Default::default()
    }
}

#[test]
fn linear_dsm_recovers_smoothed_gaussian_score() {
    // For N(0, I) smoothed by σ = 0.5 the score is −x / 1.25.
    let sigma = 0.5;
    let dist = Distribution::standard_normal(2).unwrap();
    let mut model = FirstOrderModel::affine(2, 0).unwrap();
    let mut rng = stream(0, 1);
    for (lr, steps) in [(1e-2, 2000), (1e-3, 1500), (1e-4, 1000)] {
        let mut adam = AdamState::new(lr, model.net.params());
        for _ in 0..steps {
            let b = Batch::with_noise(dist.sample(1024, &mut rng).unwrap(), &mut rng).unwrap();
            let l = loss_dsm(&model, &b, sigma).unwrap();
            adam.step(&mut model.net.params_mut(), &l.grads).unwrap();
        }
    }
    let layer = &model.net.layers()[0];
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { -1.0 / 1.25 } else { 0.0 };
            assert!((layer.weight[(i, j)] - want).abs() < 0.02, "A[{i}{j}] = {}", layer.weight[(i, j)]);
        }
        assert!(layer.bias[(0, i)].abs() < 0.02, "b[{i}] = {}", layer.bias[(0, i)]);
    }
}

#[test]
fn zero_steps_leave_initialization() {
    let dist = Distribution::standard_normal(2).unwrap();
    let init = ScoreModelPair::init(2, &small(), 0.1, 3).unwrap();
    let mut pair = init.clone();
    let cfg = TrainConfig {
        steps: 0,
        ..Default::default()
    };
    let out = train(&mut pair, &dist, &cfg).unwrap();
    assert!(out.log.is_empty() && out.diverged_at.is_none());
    assert_eq!(pair, init);
}

#[test]
fn training_is_deterministic_and_reduces_excess() {
    let dist = Distribution::standard_normal(2).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 64,
        log_every: 50,
        ..Default::default()
    };
    let run = || {
        let mut pair = ScoreModelPair::init(2, &small(), 0.1, 4).unwrap();
        let out = train(&mut pair, &dist, &cfg).unwrap();
        (pair, out)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    let strip = |rows: &[TrainLogRow]| rows.iter().map(|r| (r.step, r.total, r.d2sm_excess)).collect::<Vec<_>>();
    assert_eq!(strip(&la.log), strip(&lb.log));
    let steps: Vec<usize> = la.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 50, 100, 150, 200, 250, 299]);
    let first = la.log[0].dsm_excess.unwrap();
    let last = la.log.last().unwrap().dsm_excess.unwrap();
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn non_finite_loss_stops_training() {
    // One Adam step of size 1e300 makes the next loss overflow.
    let dist = Distribution::standard_normal(2).unwrap();
    let mut pair = ScoreModelPair::init(2, &small(), 0.1, 5).unwrap();
    let cfg = TrainConfig {
        lr: 1e300,
        ..Default::default()
    };
    let out = train(&mut pair, &dist, &cfg).unwrap();
    assert_eq!(out.diverged_at, Some(1));
    assert_eq!(out.log.len(), 2);
    assert!(!out.log[1].total.is_finite() || !out.log[1].grad_norm.is_finite());
    assert!(pair.params().iter().all(|m| m.is_finite()));
}

#[test]
fn objective_and_model_must_agree() {
    let dist = Distribution::standard_normal(2).unwrap();
    let cfg = ModelConfig {
        mode: SecondOrderMode::DiagOnly,
        ..small()
    };
    let mut pair = ScoreModelPair::init(2, &cfg, 0.1, 6).unwrap();
    assert!(train(&mut pair, &dist, &TrainConfig::default()).is_err());
    let diag = TrainConfig {
        objective: Objective::D2smJointDiag,
        steps: 5,
        ..Default::default()
    };
    assert!(train(&mut pair, &dist, &diag).is_ok());
    let wrong_dim = Distribution::standard_normal(3).unwrap();
    assert!(train(&mut pair, &wrong_dim, &diag).is_err());
}

#[test]
fn checkpoint_and_log_round_trip() {
    let dist = Distribution::standard_normal(2).unwrap();
    let mut pair = ScoreModelPair::init(2, &small(), 0.1, 7).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        log_every: 5,
        ..Default::default()
    };
    let out = train(&mut pair, &dist, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pair.save(dir.path()).unwrap();
    assert_eq!(ScoreModelPair::load(dir.path()).unwrap(), pair);
    let mut buf = Vec::new();
    write_train_log(&out.log, &mut buf).unwrap();
    assert_eq!(read_train_log(buf.as_slice()).unwrap(), out.log);
    assert!(read_train_log("nope\n1,2".as_bytes()).is_err());
}
