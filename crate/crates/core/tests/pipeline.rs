use sunformer::aggregate::Aggregator;
use sunformer::encoding::EncodingConfig;
use sunformer::evaluate::{evaluate, evaluate_checkpoint, EvalOptions};
use sunformer::model::ModelConfig;
use sunformer::synth::dataset::{read_dataset, write_dataset, Dataset};
use sunformer::synth::{generate_sequences, SceneSpec};
use sunformer::train::{read_checkpoint, train_model, write_checkpoint, CheckpointError, TrainConfig};

#[test]
fn generate_store_train_reload_evaluate() {
    let spec = SceneSpec::default();
    let samples = generate_sequences(&spec, 30, 11, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset { spec: Some((&spec).into()), seed: Some(11), samples };
    write_dataset(dir.path(), &ds, false).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.spec.unwrap().to_spec(), spec);

    let (train, rest) = back.samples.split_at(20);
    let (val, test) = rest.split_at(5);
    let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::desk() };
    let enc = EncodingConfig::default();
    let mut epochs = Vec::new();
    let out = train_model(train, val, &ModelConfig::desk(), &enc, &cfg, &mut |m| {
        epochs.push(m.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs, [0, 1, 2, 3]);
    assert!(out.best_epoch >= 1);

    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &out.checkpoint(0, true), false).unwrap();
    assert!(matches!(write_checkpoint(&path, &out.checkpoint(0, true), false), Err(CheckpointError::Exists(_))));
    let ckpt = read_checkpoint(&path).unwrap();
    let opts = EvalOptions { aggregator: Aggregator::Meanshift, ..EvalOptions::default() };
    let direct = evaluate(&out.model, test, &opts).unwrap();
    let reloaded = evaluate_checkpoint(&ckpt, test, Some(&enc), &opts).unwrap();
    assert_eq!(direct, reloaded);
    assert_eq!(direct.count, 5);
    assert!(direct.mean_deg.is_finite());

    let other = EncodingConfig { alpha: 1.0, ..enc };
    let err = evaluate_checkpoint(&ckpt, test, Some(&other), &opts).unwrap_err();
    assert!(err.to_string().contains("alpha"));
}
