use std::path::Path;

use densegrad::augment::AugmentationPolicy;
use densegrad::data::*;
use densegrad::train::*;
use densegrad::{DenseNetConfig, Error, Model, Tensor};
use proptest::prelude::*;

fn flat(value: f64, epochs: usize) -> Vec<f64> {
    vec![value; epochs]
}

/// Learning rate in force during each epoch of a scripted run.
fn lr_trace(values: &[f64], lr: f64, patience: usize) -> Vec<f64> {
    let mut s = PlateauScheduler::new(lr, 0.1, patience, 1e-4, Monitor::ValLoss);
    values
        .iter()
        .map(|&v| {
            let used = s.lr;
            s.step(v);
            used
        })
        .collect()
}

/// First epoch (1-based) at which early stopping fires.
fn stop_epoch(values: &[f64], patience: usize, min_delta: f64) -> (Option<usize>, Option<usize>) {
    let mut stopper = EarlyStopper::new(patience, min_delta, Monitor::ValLoss);
    for (i, &v) in values.iter().enumerate() {
        if stopper.step(i + 1, v) == StopCheck::Stop {
            return (Some(i + 1), stopper.best_epoch);
        }
    }
    (None, stopper.best_epoch)
}

#[test]
fn improving_loss_keeps_learning_rate() {
    let values: Vec<f64> = (0..50).map(|i| 1.0 - 0.01 * i as f64).collect();
    assert!(lr_trace(&values, 1e-4, 5).iter().all(|&lr| lr == 1e-4));
    assert_eq!(stop_epoch(&values, 10, 1e-4), (None, Some(50)));
}

#[test]
fn plateau_of_six_decays_at_epoch_six() {
    let mut s = PlateauScheduler::new(1e-4, 0.1, 5, 1e-4, Monitor::ValLoss);
    let events: Vec<Option<DecayEvent>> = flat(1.0, 6).into_iter().map(|v| s.step(v)).collect();
    assert!(events[..5].iter().all(Option::is_none));
    let decay = events[5].expect("decay at epoch 6");
    assert_eq!(decay.from, 1e-4);
    assert!((decay.to - 1e-5).abs() < 1e-20);
}

#[test]
fn two_plateaus_decay_twice() {
    let trace = lr_trace(&flat(1.0, 12), 1e-4, 5);
    // Rates in force: epochs 1-6 at 1e-4, 7-11 at 1e-5, 12 at 1e-6.
    assert!(trace[..6].iter().all(|&lr| lr == 1e-4));
    assert!(trace[6..11].iter().all(|&lr| (lr - 1e-5).abs() < 1e-20));
    assert!((trace[11] - 1e-6).abs() < 1e-21);
}

#[test]
fn flat_loss_stops_at_epoch_eleven_with_best_one() {
    assert_eq!(stop_epoch(&flat(0.7, 30), 10, 1e-4), (Some(11), Some(1)));
}

#[test]
fn improvement_of_exactly_min_delta_resets_patience() {
    let values: Vec<f64> = (0..40).map(|i| 1.0 - 1e-4 * i as f64).collect();
    assert_eq!(stop_epoch(&values, 3, 1e-4), (None, Some(40)));
    let mut short = vec![1.0];
    short.extend(flat(1.0 - 0.9e-4, 10));
    assert_eq!(stop_epoch(&short, 3, 1e-4), (Some(4), Some(1)));
}

#[test]
fn accuracy_monitor_maximizes() {
    let mut stopper = EarlyStopper::new(2, 1e-4, Monitor::ValAccuracy);
    assert_eq!(stopper.step(1, 0.5), StopCheck::Improved);
    assert_eq!(stopper.step(2, 0.6), StopCheck::Improved);
    assert_eq!(stopper.step(3, 0.55), StopCheck::Continue);
    assert_eq!(stopper.step(4, 0.6), StopCheck::Stop);
    assert_eq!(stopper.best_epoch, Some(2));
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!(
        (c.learning_rate, c.batch_size, c.max_epochs, c.lr_decay_factor),
        (1e-4, 32, 1000, 0.1)
    );
    assert_eq!((c.lr_decay_patience, c.early_stop_patience, c.min_delta), (5, 10, 1e-4));
    assert_eq!(c.monitor, Monitor::ValLoss);
    c.validate().unwrap();
    for bad in [
        TrainConfig { lr_decay_factor: 1.0, ..c.clone() },
        TrainConfig { lr_decay_factor: 0.0, ..c.clone() },
        TrainConfig { batch_size: 0, ..c.clone() },
        TrainConfig { early_stop_patience: 0, ..c.clone() },
        TrainConfig { learning_rate: -1.0, ..c.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn epoch_order_is_keyed_permutation() {
    let a = epoch_order(50, 3, 1);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(50, 3, 1));
    assert_ne!(a, epoch_order(50, 3, 2));
    assert_ne!(a, epoch_order(50, 4, 1));
}

struct Splits {
    train: MemorySource,
    val: MemorySource,
    test: MemorySource,
    norm: Normalization,
}

fn synthetic_splits(root: &Path, per_class: usize, seed: u64) -> Splits {
    generate_synthetic(
        root,
        &SynthOptions {
            per_class,
            seed,
            ..SynthOptions::default()
        },
    )
    .unwrap();
    let records = scan_dataset(root).unwrap().records;
    let split = stratified_split(&records, SplitRatios::default(), seed).unwrap();
    let pick = |s: Split| -> Vec<SampleRecord> {
        split.iter().filter(|r| r.split == Some(s)).cloned().collect()
    };
    let train = MemorySource::load(&pick(Split::Train), 32, 32).unwrap();
    let norm = channel_stats(&train).unwrap();
    Splits {
        val: MemorySource::load(&pick(Split::Val), 32, 32).unwrap(),
        test: MemorySource::load(&pick(Split::Test), 32, 32).unwrap(),
        train,
        norm,
    }
}

fn quick_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn without_wall_time(mut h: TrainHistory) -> TrainHistory {
    h.epochs.iter_mut().for_each(|e| e.wall_secs = 0.0);
    h
}

fn run(
    splits: &Splits,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    resume: bool,
) -> (Model<f32>, TrainOutcome) {
    let mut model = Model::<f32>::build(DenseNetConfig::tiny(18), 1).unwrap();
    let outcome = train(
        &mut model,
        &splits.train,
        &splits.val,
        config,
        TrainOptions {
            policy: AugmentationPolicy::default(),
            normalization: splits.norm,
            run_dir: run_dir.map(Path::to_path_buf),
            resume,
            on_epoch: None,
        },
    )
    .unwrap();
    (model, outcome)
}

#[test]
fn single_epoch_writes_artifacts() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let splits = synthetic_splits(data.path(), 5, 0);
    let (_, outcome) = run(&splits, &quick_config(1), Some(out.path()), false);
    assert_eq!(outcome.history.epochs.len(), 1);
    assert_eq!(outcome.history.best_epoch, Some(1));
    assert_eq!(outcome.history.stop_reason, Some(StopReason::MaxEpochs));
    for name in [BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_FILE] {
        assert!(out.path().join(name).is_file(), "{name}");
    }
    let read = TrainHistory::read_csv(out.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(read.epochs, outcome.history.epochs);
    assert_eq!(read.best_epoch, Some(1));
    let header = std::fs::read_to_string(out.path().join(HISTORY_FILE)).unwrap();
    assert!(header.starts_with("epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_secs,event"));
    let ckpt = densegrad::model::load_checkpoint::<f32>(out.path().join(LAST_CHECKPOINT)).unwrap();
    let optimizer = ckpt.optimizer.expect("optimizer state stored");
    assert_eq!(optimizer.step, outcome.optimizer.step);
    for (name, p) in ckpt.model.params() {
        assert_eq!(optimizer.first_moment[name].shape(), p.shape());
        assert_eq!(optimizer.second_moment[name].shape(), p.shape());
    }
    let (task, norm) = read_checkpoint_metadata(&ckpt.metadata).unwrap();
    assert_eq!(task, TaskMode::FineGrained18);
    assert_eq!(norm, splits.norm);
}

#[test]
fn same_seed_reproduces_history_and_weights() {
    let data = tempfile::tempdir().unwrap();
    let splits = synthetic_splits(data.path(), 5, 1);
    let (m1, o1) = run(&splits, &quick_config(3), None, false);
    let (m2, o2) = run(&splits, &quick_config(3), None, false);
    assert_eq!(without_wall_time(o1.history), without_wall_time(o2.history));
    assert_eq!(m1, m2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let splits = synthetic_splits(data.path(), 5, 2);
    let straight = tempfile::tempdir().unwrap();
    let (m_full, o_full) = run(&splits, &quick_config(4), Some(straight.path()), false);

    let resumed = tempfile::tempdir().unwrap();
    run(&splits, &quick_config(2), Some(resumed.path()), false);
    let (m_res, o_res) = run(&splits, &quick_config(4), Some(resumed.path()), true);
    assert_eq!(without_wall_time(o_full.history), without_wall_time(o_res.history));
    assert_eq!(m_full, m_res);
}

#[test]
fn training_reduces_loss_and_learning_rate_never_rises() {
    let data = tempfile::tempdir().unwrap();
    let splits = synthetic_splits(data.path(), 8, 3);
    let (model, outcome) = run(&splits, &quick_config(8), None, false);
    let h = &outcome.history;
    assert!(h.epochs[0].train_loss > h.last().unwrap().train_loss);
    assert!(h.lr_trace().windows(2).all(|w| w[1] <= w[0]));
    let best = h.best().unwrap();
    let min = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best.val_loss, min);
    // The returned model carries the best epoch's weights.
    let val = eval_pass(&model, &splits.val, &splits.norm, TaskMode::FineGrained18, 16).unwrap();
    assert!((val.loss - best.val_loss).abs() < 1e-9);
}

fn train_on_poisoned(poison: impl Fn(&mut Tensor<f32>)) -> (Model<f32>, Error) {
    let classes: Vec<ClassId> = ClassId::all().collect();
    let mut images: Vec<Tensor<f32>> = (0..18).map(|i| Tensor::full([3, 32, 32], i as f32 / 18.0)).collect();
    poison(&mut images[3]);
    let train_set = MemorySource::from_tensors(images.clone(), classes.clone()).unwrap();
    let val_set = MemorySource::from_tensors(images, classes).unwrap();
    let mut model = Model::<f32>::build(DenseNetConfig::tiny(18), 0).unwrap();
    let err = train(
        &mut model,
        &train_set,
        &val_set,
        &TrainConfig {
            batch_size: 18,
            ..quick_config(3)
        },
        TrainOptions {
            policy: AugmentationPolicy::none(),
            ..TrainOptions::default()
        },
    )
    .unwrap_err();
    (model, err)
}

#[test]
fn non_finite_loss_aborts_with_epoch() {
    let (_, err) = train_on_poisoned(|img| img.data_mut().fill(f32::NAN));
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn single_nan_pixel_diverges_before_update() {
    let (model, err) = train_on_poisoned(|img| img.data_mut()[0] = f32::NAN);
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    let fresh = Model::<f32>::build(DenseNetConfig::tiny(18), 0).unwrap();
    assert!(model.params().iter().eq(fresh.params().iter()));
}

#[test]
fn mismatched_head_is_rejected() {
    let images: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::zeros([3, 32, 32])).collect();
    let classes: Vec<ClassId> = ClassId::all().take(3).collect();
    let source = MemorySource::from_tensors(images, classes).unwrap();
    let mut model = Model::<f32>::build(DenseNetConfig::tiny(6), 0).unwrap();
    let err = train(&mut model, &source, &source, &quick_config(1), TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn random_model_scores_near_chance() {
    let data = tempfile::tempdir().unwrap();
    generate_synthetic(data.path(), &SynthOptions { per_class: 20, ..SynthOptions::default() }).unwrap();
    let records = scan_dataset(data.path()).unwrap().records;
    let source = MemorySource::load(&records, 32, 32).unwrap();
    let norm = channel_stats(&source).unwrap();
    for seed in 0..3 {
        let model = Model::<f32>::build(DenseNetConfig::tiny(18), seed).unwrap();
        let report = evaluate(&model, &source, &norm, TaskMode::FineGrained18, TaskMode::FineGrained18, 64).unwrap();
        assert!((report.accuracy - 1.0 / 18.0).abs() <= 0.05, "seed {seed}: {}", report.accuracy);
    }
}

#[test]
fn evaluation_is_repeatable_and_projection_never_hurts() {
    let data = tempfile::tempdir().unwrap();
    let splits = synthetic_splits(data.path(), 8, 4);
    let (model, _) = run(&splits, &quick_config(6), None, false);
    let fine = |task| evaluate(&model, &splits.test, &splits.norm, TaskMode::FineGrained18, task, 16).unwrap();
    let a = fine(TaskMode::FineGrained18);
    assert_eq!(a, fine(TaskMode::FineGrained18));
    assert_eq!(a.labels.len(), 18);
    for task in [TaskMode::Fruit6, TaskMode::Quality3] {
        let coarse = fine(task);
        assert_eq!(coarse.labels.len(), task.num_classes());
        assert!(coarse.accuracy >= a.accuracy, "{task}: {} < {}", coarse.accuracy, a.accuracy);
    }
    let coarse_model = Model::<f32>::build(DenseNetConfig::tiny(6), 0).unwrap();
    assert!(evaluate(&coarse_model, &splits.test, &splits.norm, TaskMode::Fruit6, TaskMode::Quality3, 16).is_err());
}

fn random_output(seed: u64, n: usize) -> EvalOutput {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(n * 18);
    for _ in 0..n {
        let row: Vec<f64> = (0..18).map(|_| rng.random::<f64>().powi(4)).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|v| v / total));
    }
    let predictions = probs
        .chunks(18)
        .map(|r| (0..18).fold(0, |b, i| if r[i] > r[b] { i } else { b }))
        .collect();
    EvalOutput {
        classes: 18,
        probs,
        predictions,
        truth: (0..n).map(|_| rng.random_range(0..18)).collect(),
        loss: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn decays_are_exact_factor_steps(values in proptest::collection::vec(0.0f64..2.0, 1..80), patience in 1usize..7) {
        let trace = lr_trace(&values, 1e-3, patience);
        for w in trace.windows(2) {
            prop_assert!(w[1] == w[0] || w[1] == w[0] * 0.1);
        }
    }

    #[test]
    fn early_stop_never_precedes_first_decay(values in proptest::collection::vec(0.0f64..2.0, 1..80)) {
        let mut scheduler = PlateauScheduler::new(1e-4, 0.1, 5, 1e-4, Monitor::ValLoss);
        let mut stopper = EarlyStopper::new(10, 1e-4, Monitor::ValLoss);
        let mut decayed = false;
        for (i, &v) in values.iter().enumerate() {
            let check = stopper.step(i + 1, v);
            decayed |= scheduler.step(v).is_some();
            if check == StopCheck::Stop {
                prop_assert!(decayed);
                break;
            }
        }
    }

    #[test]
    fn best_epoch_holds_the_extreme_value(values in proptest::collection::vec(0.0f64..2.0, 1..60)) {
        let mut stopper = EarlyStopper::new(1000, 0.0, Monitor::ValLoss);
        for (i, &v) in values.iter().enumerate() {
            stopper.step(i + 1, v);
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(values[stopper.best_epoch.unwrap() - 1], min);
    }

    #[test]
    fn projected_accuracy_dominates_fine_accuracy(seed in any::<u64>(), n in 1usize..60) {
        let out = random_output(seed, n);
        for task in [TaskMode::Fruit6, TaskMode::Quality3] {
            let coarse = out.project(TaskMode::FineGrained18, task).unwrap();
            prop_assert!(coarse.accuracy() >= out.accuracy());
            for row in coarse.probs.chunks(task.num_classes()) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
