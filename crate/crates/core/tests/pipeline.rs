use wsl_core::ae::{load_ae, save_ae, AEConfig, HyperAe};
use wsl_core::data::{load_dataset, save_dataset, DatasetKind, DatasetSpec};
use wsl_core::downstream::{probe, reconstruct_and_score, reconstruct_with, ProbeTarget};
use wsl_core::losses::{LossConfig, QueryRegistry};
use wsl_core::training::train_ae;
use wsl_core::zoo::{load_zoo, save_zoo, train_zoo, SplitTag, Zoo, ZooGrid, ZooTrainConfig};

fn small_zoo() -> (Zoo, wsl_core::data::Dataset) {
    let spec = DatasetSpec { n_train: 200, n_test: 90, ..DatasetSpec::desk(DatasetKind::BlobsStripesChecker, 0) };
    let ds = spec.generate().unwrap();
    let cfg = ZooTrainConfig {
        grid: ZooGrid { learning_rates: vec![3e-3], seeds: vec![0, 1, 2, 3, 4], ..ZooGrid::desk() },
        epochs: 2,
        checkpoint_epochs: vec![1, 2],
        split_fractions: [0.6, 0.2, 0.2],
        ..ZooTrainConfig::desk()
    };
    (train_zoo(&cfg, &ds, 1).unwrap(), ds)
}

fn tiny_ae() -> AEConfig {
    AEConfig { d_model: 16, d_ff: 32, num_heads: 2, num_encoder_layers: 1, num_decoder_layers: 1, epochs: 2, behavioral_warmup: 1, ..AEConfig::desk() }
}

#[test]
fn zoo_and_dataset_survive_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let (zoo, ds) = small_zoo();
    save_dataset(&ds, &tmp.path().join("data")).unwrap();
    save_zoo(&zoo, &tmp.path().join("zoo")).unwrap();
    let ds2 = load_dataset(&tmp.path().join("data")).unwrap();
    let zoo2 = load_zoo(&tmp.path().join("zoo")).unwrap();
    assert_eq!(ds.train.images, ds2.train.images);
    assert_eq!(ds.test.labels, ds2.test.labels);
    assert_eq!(zoo.checkpoints.len(), zoo2.checkpoints.len());
    for (a, b) in zoo.checkpoints.iter().zip(&zoo2.checkpoints) {
        assert_eq!((a.model_id, a.epoch), (b.model_id, b.epoch));
        assert_eq!(a.theta, b.theta);
    }
    assert_eq!(zoo.splits, zoo2.splits);
}

#[test]
fn trained_autoencoder_roundtrips_and_scores() {
    let (zoo, ds) = small_zoo();
    let reg = QueryRegistry { input: zoo.arch.input, trainset: Some(&ds.train), shifted: None };
    let loss = LossConfig { n_queries: 8, ..LossConfig::full() };
    let (ae, log) = train_ae::<f32>(&zoo, &reg, &loss, &tiny_ae()).unwrap();
    assert_eq!(log.epochs.len(), 3);
    assert!(log.epochs[1..].iter().all(|e| e.loss.is_finite()));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.hae");
    save_ae(&path, &ae).unwrap();
    let back: HyperAe<f32> = load_ae(&path).unwrap();
    let theta = &zoo.checkpoints_in(SplitTag::Test)[0].theta;
    assert_eq!(ae.reconstruct(theta).unwrap(), back.reconstruct(theta).unwrap());

    let rep = reconstruct_and_score(&zoo, SplitTag::Test, reconstruct_with(&back), &ds.test).unwrap();
    assert_eq!(rep.models.len(), zoo.checkpoints_in(SplitTag::Test).len());
    assert!(rep.models.iter().all(|m| m.l2.is_finite() && (0.0..=1.0).contains(&m.agreement)));
    let p = probe(&zoo, &back, ProbeTarget::TestAccuracy).unwrap();
    assert!(p.r2_train.is_finite() && p.r2_test.is_finite());
}

#[test]
fn autoencoder_training_is_deterministic() {
    let (zoo, ds) = small_zoo();
    let reg = QueryRegistry { input: zoo.arch.input, trainset: Some(&ds.train), shifted: None };
    let loss = LossConfig { n_queries: 8, ..LossConfig::full() };
    let (a, _) = train_ae::<f32>(&zoo, &reg, &loss, &tiny_ae()).unwrap();
    let (b, _) = train_ae::<f32>(&zoo, &reg, &loss, &tiny_ae()).unwrap();
    for (x, y) in a.params.iter().zip(&b.params) {
        assert_eq!(x.data(), y.data());
    }
}
