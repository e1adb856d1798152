use std::fs;

use lsanet::geometry::PointCloud;
use lsanet::network::{Flags, NetworkConfig};
use lsanet::pipeline::{
    overfit_batch, synth_dataset, Model, RunRecord, SyntheticOptions, TrainOptions, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
use lsanet::Error;

/// Synthetic clouds restricted to the toy config's three classes.
fn small_data(n_train: usize) -> (Vec<PointCloud<f32>>, Vec<PointCloud<f32>>) {
    let (train, test) = synth_dataset(&SyntheticOptions {
        n_train,
        n_test: 8,
        n_points: 256,
        ..Default::default()
    })
    .unwrap();
    let keep = |v: Vec<PointCloud<f32>>| v.into_iter().filter(|c| c.label < Some(3)).collect();
    (keep(train), keep(test))
}

fn toy_options(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 8,
        eval_points: 256,
        ..Default::default()
    }
}

#[test]
fn toy_overfits_one_batch() {
    let (train, _) = small_data(8);
    let losses = overfit_batch(NetworkConfig::toy(), &train, 400, 0.02, 0).unwrap();
    assert!(*losses.last().unwrap() < 0.02, "{losses:?}");
    assert!(losses[0] > 0.5);
}

#[test]
fn metrics_log_is_one_record_per_line_and_appends() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = small_data(32);
    let mut t = Trainer::new(NetworkConfig::toy(), 1, toy_options(3), Some(dir.path().into())).unwrap();
    t.run(&train, &test).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i);
        assert!(r["test"]["overall_accuracy"].is_number());
    }
    let record: RunRecord =
        serde_json::from_str(&fs::read_to_string(dir.path().join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(record.epochs_done, 3);
    assert_eq!(record.history.len(), 3);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small_data(16);
    let mut t = Trainer::new(NetworkConfig::toy(), 2, toy_options(1), Some(dir.path().into())).unwrap();
    t.run(&train, &[]).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let saved = fs::read(&ckpt).unwrap();

    let bias = t.model.params.get("head.out_bias").unwrap().map(|_| f32::NAN);
    t.model.params.set("head.out_bias", bias).unwrap();
    t.options.epochs = 2;
    let e = t.run(&train, &[]).unwrap_err();
    assert!(matches!(e, Error::NonFiniteLoss { epoch: 1, batch: 0 }), "{e}");
    assert_eq!(fs::read(&ckpt).unwrap(), saved);
    let (_, record) = Model::load(&ckpt).unwrap();
    assert_eq!(record.epochs_done, 1);
}

#[test]
fn resumed_epoch_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = small_data(32);
    let mut a = Trainer::new(NetworkConfig::toy(), 4, toy_options(2), Some(dir.path().into())).unwrap();
    a.run(&train, &[]).unwrap();
    let mut b = Trainer::resume(dir.path().join(CHECKPOINT_FILE), None).unwrap();
    a.options.epochs = 4;
    b.options.epochs = 4;
    a.run(&train, &[]).unwrap();
    b.run(&train, &[]).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
    assert_eq!(b.history.len(), 4);
}

#[test]
fn flags_do_not_change_the_data_stream() {
    let cfgs = Flags::ablations();
    let orders: Vec<Vec<usize>> = cfgs
        .iter()
        .map(|(_, f)| {
            let t = Trainer::new(NetworkConfig::toy().with_flags(*f), 7, toy_options(1), None).unwrap();
            t.epoch_order(64, 3)
        })
        .collect();
    assert!(orders.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(cfgs.len(), 6);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = small_data(16);
    let mut t = Trainer::new(NetworkConfig::toy(), 5, toy_options(1), Some(dir.path().into())).unwrap();
    t.run(&train, &[]).unwrap();
    let (m, _) = Model::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let a = t.model.network.infer_logits(&t.model.params, &test).unwrap();
    let b = m.network.infer_logits(&m.params, &test).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn config_file_uses_declared_field_names() {
    let json = NetworkConfig::desk().to_json();
    for key in ["\"layers\"", "\"N\"", "\"K\"", "\"radius\"", "\"F\"", "\"head_widths\"", "\"num_classes\"",
        "\"dropout_rate\"", "\"sfe_lift_widths\"", "\"use_sfe\"", "\"use_lsa\"", "\"use_region_encoder\"",
        "\"use_modulated_pool\""] {
        assert!(json.contains(key), "{key}");
    }
}
