use freezetune::data::{Dataset, SyntheticTask, TaskKind};
use freezetune::model::LayerRole;
use freezetune::train::{
    evaluate, fine_tune, pretrain_synthetic, Optimizer, OptimizerConfig, RunLog, TrainConfig,
};
use freezetune::{Error, Model, ModelConfig, SchedulerKind};

fn config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        max_seq_len: 6,
        vocab: 8,
        num_classes: 4,
        ..ModelConfig::default()
    }
}

fn task(kind: TaskKind, train_size: usize, seed: u64) -> freezetune::data::Splits {
    SyntheticTask {
        kind,
        vocab: 8,
        seq_len: 6,
        num_classes: 4,
        train_size,
        val_size: 128,
        seed,
    }
    .generate()
    .unwrap()
}

fn run(kind: SchedulerKind, rate: f64, data: &Dataset, epochs: usize) -> (Model, RunLog) {
    let mut model = Model::new(config(), 1).unwrap();
    let tc = TrainConfig {
        scheduler: kind,
        freeze_rate: rate,
        epochs,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let log = fine_tune(&mut model, data, None, &tc).unwrap();
    (model, log)
}

fn weights(model: &Model) -> Vec<Vec<f32>> {
    model
        .params
        .iter()
        .map(|(_, p)| p.tensor.data().to_vec())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn ils_at_zero_rate_matches_full_training_bitwise() {
    let data = task(TaskKind::ClusterTokens, 256, 0).train;
    let (a, la) = run(SchedulerKind::None, 0.0, &data, 1);
    let (b, lb) = run(SchedulerKind::Ils, 0.0, &data, 1);
    assert_eq!(weights(&a), weights(&b));
    let losses = |l: &RunLog| {
        l.iterations
            .iter()
            .map(|i| i.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&la), losses(&lb));
}

#[test]
fn every_iteration_freezes_exactly_int_n_f() {
    let data = task(TaskKind::ClusterTokens, 256, 0).train;
    for kind in [
        SchedulerKind::Ils,
        SchedulerKind::Random,
        SchedulerKind::Progressive,
    ] {
        let (model, log) = run(kind, 0.5, &data, 1);
        let want = model.num_layers() / 2;
        assert!(log.iterations.iter().all(|i| i.frozen.len() == want));
    }
}

#[test]
fn layers_frozen_for_the_whole_run_are_untouched() {
    let data = task(TaskKind::ClusterTokens, 256, 0).train;
    let initial = Model::<f32>::new(config(), 1).unwrap();
    let (model, log) = run(SchedulerKind::Progressive, 0.5, &data, 1);
    let prefix = model.num_layers() / 2;
    for ((_, before), (_, after)) in initial.params.iter().zip(model.params.iter()) {
        if before.layer_id < prefix {
            assert_eq!(before.tensor.data(), after.tensor.data(), "{}", before.name);
        } else {
            assert_ne!(before.tensor.data(), after.tensor.data(), "{}", before.name);
        }
    }
    assert!(log.update_counts[..prefix].iter().all(|&c| c == 0));
    assert!(log.update_counts[prefix..]
        .iter()
        .all(|&c| c == log.iterations.len()));
}

#[test]
fn frozen_distances_do_not_change() {
    let data = task(TaskKind::ClusterTokens, 512, 0).train;
    let (_, log) = run(SchedulerKind::Ils, 0.6, &data, 1);
    for pair in log.iterations.windows(2) {
        for &f in &pair[1].frozen {
            assert_eq!(pair[0].distances[f], pair[1].distances[f]);
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_uniform_when_untrained() {
    let mut model = Model::<f32>::new(config(), 2).unwrap();
    let id = model.registry().id_of(LayerRole::Classifier, None).unwrap();
    for pid in model.params.of_layer(id).collect::<Vec<_>>() {
        model.params.get_mut(pid).tensor.data_mut().fill(0.0);
    }
    let val = task(TaskKind::CopyClass, 64, 3).val;
    let a = evaluate(&model, &val, 32).unwrap();
    assert_eq!(a, evaluate(&model, &val, 32).unwrap());
    assert!((a.loss - 4f64.ln()).abs() < 1e-5);
    assert!((a.accuracy - 0.25).abs() < 0.1, "{}", a.accuracy);
}

#[test]
fn separable_task_is_learned() {
    let splits = task(TaskKind::CopyClass, 2048, 4);
    let wide = ModelConfig {
        hidden: 32,
        heads: 4,
        ..config()
    };
    let mut model = Model::new(wide, 3).unwrap();
    let tc = TrainConfig {
        scheduler: SchedulerKind::None,
        freeze_rate: 0.0,
        epochs: 6,
        optimizer: OptimizerConfig {
            lr: 3e-3,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let log = fine_tune(&mut model, &splits.train, Some(&splits.val), &tc).unwrap();
    assert_eq!(log.final_accuracy(), Some(1.0));
}

#[test]
fn pretraining_zero_steps_is_identity_and_seeded() {
    let data = task(TaskKind::ClusterTokens, 256, 0).train;
    let tc = TrainConfig::default();
    let mut model = Model::<f32>::new(config(), 1).unwrap();
    let before = weights(&model);
    assert!(pretrain_synthetic(&mut model, &data, 0, &tc)
        .unwrap()
        .is_none());
    assert_eq!(before, weights(&model));

    let mut a = Model::<f32>::new(config(), 1).unwrap();
    let mut b = Model::<f32>::new(config(), 1).unwrap();
    pretrain_synthetic(&mut a, &data, 10, &tc).unwrap();
    pretrain_synthetic(&mut b, &data, 10, &tc).unwrap();
    assert_eq!(weights(&a), weights(&b));
}

#[test]
fn pretraining_shrinks_early_fine_tune_distances() {
    let source = task(TaskKind::CopyClass, 2048, 6).train;
    let target = task(TaskKind::ClusterTokens, 512, 7).train;
    let tc = TrainConfig {
        scheduler: SchedulerKind::None,
        freeze_rate: 0.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    let first_epoch_median = |model: &mut Model| {
        let log = fine_tune(model, &target, None, &tc).unwrap();
        let all = log
            .iterations
            .iter()
            .flat_map(|i| i.distances.iter().flatten().copied())
            .collect();
        median(all)
    };
    let mut fresh = Model::new(config(), 1).unwrap();
    let mut pretrained = fresh.clone();
    pretrain_synthetic(&mut pretrained, &source, 600, &TrainConfig::default()).unwrap();
    assert!(first_epoch_median(&mut pretrained) < first_epoch_median(&mut fresh));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = task(TaskKind::ClusterTokens, 64, 0).train;
    let mut model = Model::<f32>::new(config(), 1).unwrap();
    let id = model.registry().id_of(LayerRole::Classifier, None).unwrap();
    let pid = model.params.of_layer(id).next().unwrap();
    model.params.get_mut(pid).tensor.data_mut()[0] = f32::NAN;
    let tc = TrainConfig {
        scheduler: SchedulerKind::Ils,
        freeze_rate: 0.5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    match fine_tune(&mut model, &data, None, &tc) {
        Err(Error::NonFiniteLoss {
            iteration, frozen, ..
        }) => {
            assert_eq!(iteration, 0);
            assert_eq!(frozen.len(), model.num_layers() / 2);
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn step_with_everything_frozen_is_a_no_op() {
    let data = task(TaskKind::ClusterTokens, 64, 0).train;
    let mut model = Model::<f32>::new(config(), 1).unwrap();
    let mut g = freezetune::Graph::new();
    let batch = data.batch(&[0, 1, 2, 3]).unwrap();
    let (_, loss) = model
        .forward_loss(&mut g, &batch, &Default::default())
        .unwrap();
    g.backward(loss, &mut model.params).unwrap();
    let all: Vec<usize> = (0..model.num_layers()).collect();
    model.freeze_set(&all).unwrap();
    let before = weights(&model);
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    opt.step(&mut model.params, 1e-2);
    assert_eq!(before, weights(&model));
    assert!((0..model.params.len()).all(|i| opt.steps_of(i).is_none()));
}

#[test]
fn run_log_csvs_have_expected_shape() {
    let data = task(TaskKind::ClusterTokens, 64, 0).train;
    let (model, log) = run(SchedulerKind::Ils, 0.5, &data, 1);
    let n = model.num_layers();
    let iters = log.iterations.len();
    let count = |s: String| s.lines().count();
    assert!(log
        .metrics_csv()
        .starts_with("iteration,loss,accuracy,lr\n"));
    assert_eq!(count(log.metrics_csv()), iters + 1);
    assert!(log
        .schedule_csv()
        .starts_with("iteration,layer_id,frozen,d_i\n"));
    assert_eq!(count(log.schedule_csv()), iters * n + 1);
    assert!(log
        .heatmap_csv()
        .starts_with("layer_id,name,update_count\n"));
    assert_eq!(count(log.heatmap_csv()), n + 1);
    assert!(log
        .memory_csv()
        .starts_with("iteration,dynamic_bytes,static_bytes,total\n"));
    let dir = tempfile::tempdir().unwrap();
    log.write_csvs(dir.path()).unwrap();
    for f in ["metrics.csv", "schedule.csv", "heatmap.csv", "memory.csv"] {
        assert!(dir.path().join(f).is_file());
    }
}

#[test]
fn instrumented_bytes_match_analytic_every_iteration() {
    let data = task(TaskKind::ClusterTokens, 128, 0).train;
    let mut model = Model::new(config(), 1).unwrap();
    let tc = TrainConfig {
        freeze_rate: 0.5,
        batch_size: 16,
        codecs: freezetune::CodecConfig::all_on(),
        ..TrainConfig::default()
    };
    let log = fine_tune(&mut model, &data, None, &tc).unwrap();
    assert!(log
        .iterations
        .iter()
        .all(|i| i.cached.total() == i.analytic_bytes));
}
