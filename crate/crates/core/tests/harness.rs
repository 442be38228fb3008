//! Learning-rate schedule, metrics, checkpoints and the training loop.

mod common;

use common::brute_force_miou;
use proptest::prelude::*;
use sharecmp::data::{
    collate, generate_synthetic_dataset, render_scene, AugmentConfig, DatasetIndex, Sample, SyntheticSceneSpec,
};
use sharecmp::harness::*;
use sharecmp::image::IGNORE_LABEL;
use sharecmp::model::{ModelConfig, ShareCmp};
use sharecmp::Error;
use sharecmp_nn::ParamStore;

fn paper_schedule(mode: WarmupMode) -> LrSchedule {
    // 200 epochs of 10 steps, 5 of them warmup.
    let cfg = TrainConfig { epochs: 200, warmup_mode: mode, ..TrainConfig::default() };
    cfg.schedule(10)
}

#[test]
fn lr_examples() {
    let s = paper_schedule(WarmupMode::Linear);
    assert_eq!((s.warmup_steps, s.total_steps), (50, 2000));
    // §4.2: warmup starts at 1e-6 × 6e-5.
    assert!((s.lr(0) - 6e-11).abs() < 1e-24);
    assert_eq!(s.lr(2000), 0.0);
    assert!((s.lr(50 + 975) - 3e-5).abs() < 1e-18);
    assert_eq!(s.lr(50), 6e-5);
    // Both sides of the warmup boundary approach lr0.
    assert!((s.lr(49) - 6e-5).abs() <= 6e-5 / 50.0);
    let c = paper_schedule(WarmupMode::Constant);
    assert!((0..50).all(|k| c.lr(k) == 6e-5 * 1e-6));
    assert_eq!(c.lr(50), 6e-5);

    let capped = TrainConfig { max_steps: Some(100), ..TrainConfig::default() }.schedule(10);
    assert_eq!(capped.total_steps, 100);
}

proptest! {
    #[test]
    fn lr_is_bounded_and_piecewise_monotone(step in 0usize..=2000, power in 0.5f64..3.0) {
        let s = LrSchedule { power, ..paper_schedule(WarmupMode::Linear) };
        let lr = s.lr(step);
        prop_assert!((0.0..=s.lr0).contains(&lr));
        if step > 0 && step < s.warmup_steps {
            prop_assert!(lr > s.lr(step - 1));
        }
        if step > s.warmup_steps {
            prop_assert!(lr <= s.lr(step - 1));
        }
    }
}

#[test]
fn confusion_examples() {
    let truth: Vec<u8> = (0..16).map(|i| (i / 8) as u8).collect();
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&truth, &truth).unwrap();
    assert_eq!(cm.miou(), Some(1.0));

    let flipped: Vec<u8> = truth.iter().map(|t| 1 - t).collect();
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&flipped, &truth).unwrap();
    assert_eq!(cm.miou(), Some(0.0));

    // 4×4, two classes: 6 hits per class, 2 pixels of each class predicted as
    // the other, so TP/FP/FN = 6/2/2 for both.
    let mut pred = truth.clone();
    for i in [0, 1, 8, 9] {
        pred[i] = 1 - pred[i];
    }
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&pred, &truth).unwrap();
    assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (6, 2, 2, 6));
    assert_eq!(cm.iou(), [Some(0.6), Some(0.6)]);
    assert_eq!(cm.miou(), Some(0.6));
    assert_eq!(cm.pixel_accuracy(), Some(0.75));

    // Absent classes are excluded; ignored pixels are not counted.
    let mut cm = ConfusionMatrix::new(4);
    cm.update(&[0, 0, 3], &[0, 0, IGNORE_LABEL]).unwrap();
    assert_eq!(cm.total(), 2);
    assert_eq!(cm.iou(), [Some(1.0), None, None, None]);
    assert_eq!(cm.miou(), Some(1.0));
    assert_eq!(ConfusionMatrix::new(3).miou(), None);

    assert!(cm.update(&[0], &[0, 1]).is_err());
    assert!(cm.update(&[4], &[0]).is_err());
    assert!(cm.update(&[0], &[4]).is_err());
}

proptest! {
    #[test]
    fn miou_matches_pixel_sets(
        classes in 1usize..6,
        pairs in prop::collection::vec((0u8..6, 0u8..7), 256),
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0 % classes as u8).collect();
        let truth: Vec<u8> = pairs.iter().map(|p| if p.1 == 6 { IGNORE_LABEL } else { p.1 % classes as u8 }).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&pred, &truth).unwrap();
        prop_assert_eq!(cm.miou(), brute_force_miou(&pred, &truth, classes));
        prop_assert_eq!(cm.total() as usize, truth.iter().filter(|&&t| t != IGNORE_LABEL).count());
    }
}

fn samples(size: usize, n: usize, seed: u64) -> Vec<Sample> {
    let spec = SyntheticSceneSpec::three_class(size, size, seed);
    (0..n)
        .map(|i| {
            let (angles, mask) = render_scene(&spec, i).unwrap();
            Sample::from_angles(i.to_string(), angles, mask).unwrap()
        })
        .collect()
}

fn no_sink(_: &LogRecord) -> sharecmp::Result<()> {
    Ok(())
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let data = samples(32, 2, 0);
    let batch = collate(&data.iter().collect::<Vec<_>>(), true).unwrap();
    let mut trainer = Trainer::new(&ModelConfig::tiny(3), &TrainConfig::default());
    let before = trainer.store.clone();
    let l = trainer.train_step(&batch, 0.0).unwrap();
    assert!(l.total > 0.0 && l.total == l.seg + l.cpa);
    for (id, _) in before.iter() {
        assert!(before.value(id).bit_eq(trainer.store.value(id)), "{}", before.name(id));
    }
    let moved = before.ids().filter(|&id| trainer.optimizer().first_moment(id).is_some_and(|m| m.norm() > 0.0)).count();
    assert!(moved > 0, "moments must update");
    assert_eq!(trainer.step(), 1);
}

#[test]
fn single_batch_overfit() {
    let data = samples(32, 2, 1);
    let batch = collate(&data.iter().collect::<Vec<_>>(), true).unwrap();
    let mut trainer = Trainer::new(&ModelConfig::tiny(3), &TrainConfig::default());
    let losses: Vec<f64> = (0..200).map(|_| trainer.train_step(&batch, 2e-3).unwrap().total).collect();
    let window = |k: usize| losses[k * 40..(k + 1) * 40].iter().sum::<f64>() / 40.0;
    // Trend oracle: every 40-step window averages lower than the one before.
    for k in 1..5 {
        assert!(window(k) < window(k - 1), "window {k}: {} vs {}", window(k), window(k - 1));
    }
    let last = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(losses[0] / last >= 10.0, "loss {} -> {last}", losses[0]);
}

#[test]
fn non_finite_loss_is_a_training_error() {
    let data = samples(32, 1, 2);
    let batch = collate(&data.iter().collect::<Vec<_>>(), true).unwrap();
    let mut trainer = Trainer::new(&ModelConfig::tiny(3), &TrainConfig::default());
    let id = trainer.store.id("decoder.classifier.bias").unwrap();
    trainer.store.value_mut(id).data_mut()[0] = f64::NAN;
    match trainer.train_step(&batch, 1e-3) {
        Err(e @ Error::Training(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("seg_loss") && msg.contains("cpa_loss"), "{msg}");
            assert_eq!(e.exit_code(), 1);
        }
        other => panic!("expected a training error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn training_is_deterministic() {
    let data = samples(32, 3, 3);
    let cfg =
        TrainConfig { epochs: 5, warmup_epochs: 1, batch_size: 2, lr0: 1e-3, eval_every: 2, ..TrainConfig::default() };
    let aug = AugmentConfig { crop_size: [32, 32], ..AugmentConfig::default() };
    let run = || train(&ModelConfig::tiny(3), &cfg, &aug, &data, &[], &mut no_sink).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_eval, b.final_eval);
    assert_eq!(a.trainer.step(), 10);
    assert!(a.log.iter().any(|r| r.miou.is_some()));
    for (id, _) in a.trainer.store.iter() {
        assert!(a.trainer.store.value(id).bit_eq(b.trainer.store.value(id)));
    }
    let other =
        train(&ModelConfig::tiny(3), &TrainConfig { seed: 1, ..cfg.clone() }, &aug, &data, &[], &mut no_sink).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn train_rejects_bad_inputs() {
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, ..TrainConfig::default() };
    let aug = AugmentConfig::default();
    assert!(matches!(train(&ModelConfig::tiny(3), &cfg, &aug, &[], &[], &mut no_sink), Err(Error::InvalidInput(_))));
    // Labels beyond the model's classes.
    let data = samples(32, 1, 4);
    assert!(train(&ModelConfig::tiny(2), &cfg, &aug, &data, &[], &mut no_sink).is_err());
    assert!(TrainConfig { epochs: 2, warmup_epochs: 5, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { lr0: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(32, 2, 5);
    let model_cfg = ModelConfig::tiny(3);
    let cfg = TrainConfig { epochs: 3, warmup_epochs: 1, batch_size: 2, lr0: 1e-3, ..TrainConfig::default() };
    let aug = AugmentConfig { enabled: false, ..AugmentConfig::default() };
    let out = train(&model_cfg, &cfg, &aug, &data, &[], &mut no_sink).unwrap();
    let path = dir.path().join("ckpt.tar");
    save_checkpoint(&path, &model_cfg, &out.trainer.store).unwrap();

    let ckpt = read_checkpoint(&path).unwrap();
    let restored_cfg: ModelConfig = serde_json::from_value(ckpt.config.clone()).unwrap();
    assert_eq!(restored_cfg, model_cfg);
    assert_eq!(ckpt.manifest.len(), out.trainer.store.len());
    let mut store = ParamStore::new(123);
    let model = ShareCmp::new(&mut store, &restored_cfg);
    ckpt.load_into(&mut store).unwrap();
    for (id, _) in store.iter() {
        assert!(store.value(id).bit_eq(out.trainer.store.value(id)));
    }
    let report = evaluate_samples(&model, &store, &data).unwrap();
    assert_eq!(report.confusion, out.final_eval.confusion);
    assert_eq!(report, out.final_eval);

    // Saving is reproducible byte for byte.
    let again = dir.path().join("again.tar");
    save_checkpoint(&again, &model_cfg, &store).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new(0);
    ShareCmp::new(&mut store, &ModelConfig::tiny(3));
    let path = dir.path().join("c.tar");
    save_checkpoint(&path, &ModelConfig::tiny(3), &store).unwrap();

    assert!(matches!(read_checkpoint(&dir.path().join("missing.tar")), Err(Error::Checkpoint(_))));

    // A different class count changes the classifier and CPA head shapes.
    let mut other = ParamStore::new(0);
    ShareCmp::new(&mut other, &ModelConfig::tiny(4));
    assert!(matches!(read_checkpoint(&path).unwrap().load_into(&mut other), Err(Error::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    let corrupt = dir.path().join("corrupt.tar");
    std::fs::write(&corrupt, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&corrupt), Err(Error::Checkpoint(_))));

    assert!(matches!(save_checkpoint(&path, &(), &ParamStore::shapes_only()), Err(Error::Checkpoint(_))));
}

#[test]
fn evaluate_reads_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let mut index = generate_synthetic_dataset(&SyntheticSceneSpec::three_class(32, 32, 0), 2, dir.path()).unwrap();
    let mut store = ParamStore::new(0);
    let model = ShareCmp::new(&mut store, &ModelConfig::tiny(3));
    let report = evaluate(&model, &store, &index).unwrap();
    assert_eq!(report.confusion.total(), 2 * 32 * 32);
    assert_eq!(report, evaluate_samples(&model, &store, &index.load_all().unwrap()).unwrap());
    index.ids.clear();
    assert!(matches!(evaluate(&model, &store, &index), Err(Error::Dataset { .. })));
    let reopened = DatasetIndex::open(dir.path(), "train").unwrap();
    assert_eq!(reopened.ids.len(), 2);
}

#[test]
fn param_report_ledger() {
    let r = count_params(&ModelConfig::tiny(3));
    for c in [&r.shared, &r.dual] {
        assert_eq!(c.total, c.encoder + c.pga + c.decoder + c.cpaahead);
        assert_eq!(c.inference_total, c.encoder + c.pga + c.decoder);
    }
    let text = r.to_string();
    assert!(text.contains("encoder ratio") && text.contains("PGA"));
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert!(json["encoder_ratio"].as_f64().unwrap() < 1.0);
    assert!(r.shared_gmacs > 0.0 && r.dual_gmacs > 0.0);
}
