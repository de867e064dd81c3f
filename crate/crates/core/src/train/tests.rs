use super::*;
use crate::data::{generate, SyntheticSpec};
use crate::model::ModelConfig;

fn micro_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        model: ModelConfig::micro(),
        ..ExperimentConfig::default()
    };
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c
}

fn micro_data(per_grade: usize, seed: u64) -> Dataset {
    generate(&SyntheticSpec {
        per_grade,
        seed,
        ..SyntheticSpec::for_size(16)
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = micro_config();
    cfg.train.optimizer.lr = 0.0;
    cfg.train.epochs = 1;
    let data = micro_data(2, 1);
    let before = Trainer::new(&cfg).unwrap().store;
    let out = train(&cfg, &data, None, None).unwrap();
    assert_eq!(out.trace.len(), 3);
    for (a, b) in before.iter().zip(out.store.iter()) {
        assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let cfg = micro_config();
    let data = micro_data(2, 1);
    let a = train(&cfg, &data, None, None).unwrap();
    let b = train(&cfg, &data, None, None).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.store.to_checkpoint_bytes(), b.store.to_checkpoint_bytes());
    let mut other = cfg.clone();
    other.seed = 1;
    let c = train(&other, &data, None, None).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn log_lines_are_tab_separated() {
    let cfg = micro_config();
    let data = micro_data(1, 1);
    let mut buf = Vec::new();
    let out = train(&cfg, &data, None, Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), out.trace.len());
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[0], "1");
    assert_eq!(fields[1], "1");
    let total: f64 = fields[2].parse().unwrap();
    let sum_bce: f64 = fields[3].parse().unwrap();
    let ncsl: f64 = fields[4].parse().unwrap();
    assert_eq!(total, sum_bce + 0.1 * ncsl);
}

#[test]
fn regularizer_leaves_first_classifier_update_unchanged() {
    let data = micro_data(1, 3);
    let (x, y) = data.batch(&[0, 1, 2, 3, 4]);
    let mut stores = Vec::new();
    for lambda in [0.0, 0.1] {
        let mut cfg = micro_config();
        cfg.loss.lambda = lambda;
        let mut t = Trainer::new(&cfg).unwrap();
        t.train_step(&x, &y, 1).unwrap();
        stores.push(t.store);
    }
    let mut checked = 0;
    let mut backbone_differs = false;
    for (a, b) in stores[0].iter().zip(stores[1].iter()) {
        if a.name.starts_with("head") {
            assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
            checked += 1;
        } else if !a.value.bitwise_eq(&b.value) {
            backbone_differs = true;
        }
    }
    assert_eq!(checked, 25);
    assert!(backbone_differs);
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let cfg = micro_config();
    let data = micro_data(1, 1);
    let mut t = Trainer::new(&cfg).unwrap();
    let (x, y) = data.batch(&[0, 1]);
    t.train_step(&x, &y, 1).unwrap();
    let id = t.store.id("head0.omega").unwrap();
    t.store.value_mut(id).data_mut()[0] = f64::NAN;
    match t.train_step(&x, &y, 1) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 2),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.step)),
    }
}

#[test]
fn patience_stops_training_and_keeps_the_best_epoch() {
    let mut cfg = micro_config();
    cfg.train.optimizer.lr = 0.0;
    cfg.train.epochs = 10;
    cfg.train.patience = 2;
    let data = micro_data(1, 1);
    let out = train(&cfg, &data, Some(&data), None).unwrap();
    // Frozen weights never improve on epoch 1.
    assert_eq!(out.epochs.len(), 3);
    assert_eq!(out.best_epoch, 1);
    assert!(out.best_val_balanced_accuracy.is_some());
}

#[test]
fn train_accuracy_target_stops_early() {
    let mut cfg = micro_config();
    cfg.train.epochs = 5;
    cfg.train.stop_at_train_accuracy = Some(0.0);
    let data = micro_data(1, 1);
    let out = train(&cfg, &data, None, None).unwrap();
    assert_eq!(out.epochs.len(), 1);
    assert!(out.epochs[0].train_accuracy.is_some());
}

#[test]
fn run_directory_round_trip() {
    let cfg = micro_config();
    let data = micro_data(1, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = train_to_dir(&cfg, &data, None, dir.path()).unwrap();
    let run = RunDir::new(dir.path());
    let (loaded_cfg, model, store) = run.load().unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(store.to_checkpoint_bytes(), out.store.to_checkpoint_bytes());
    let a = evaluate(&model, &store, &data, 2).unwrap();
    let b = evaluate(&out.model, &out.store, &data, 5).unwrap();
    assert_eq!(a, b);
    let log = std::fs::read_to_string(run.metrics()).unwrap();
    assert_eq!(log.lines().count(), out.trace.len());
}

#[test]
fn grade_mismatch_is_a_config_error() {
    let mut cfg = micro_config();
    cfg.model.grades = 4;
    let data = micro_data(1, 1);
    assert!(matches!(train(&cfg, &data, None, None), Err(Error::Config(_))));
}
