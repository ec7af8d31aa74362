use super::*;
use crate::architecture::{build_classifier, build_mae, ClassifierMode, EncoderSource, ModelConfig};
use crate::corruption::MaskMode;
use crate::rng::seeded;
use crate::volume::{save_volume, Volume};
use rand::Rng;
use std::path::PathBuf;

fn labeled(pos: usize, neg: usize) -> LabeledManifest {
    let records = (0..pos + neg)
        .map(|i| LabeledRecord {
            id: format!("case{i:04}"),
            volume: PathBuf::from(format!("case{i:04}.json")),
            label: u8::from(i < pos),
        })
        .collect();
    LabeledManifest {
        records,
        base_dir: PathBuf::new(),
    }
}

fn count(m: &LabeledManifest) -> (usize, usize) {
    let pos = m.records.iter().filter(|r| r.label == 1).count();
    (pos, m.len() - pos)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dims: [8, 8, 4],
        base_channels: 2,
        stages: 2,
        convs_per_stage: vec![1, 1],
        skip_connections: true,
    }
}

fn tiny_policy() -> MaskPolicy {
    MaskPolicy {
        mode: MaskMode::Static,
        cube_min: [4, 4, 2],
        cube_max: [4, 4, 2],
        subsample_min: 0.5,
        subsample_max: 0.5,
        occlusion_ratio: 1.0,
    }
}

fn random_volumes(n: usize, seed: u64) -> Vec<Volume> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| Volume::from_fn([8, 8, 4], [1.0; 3], |_, _, _| rng.random_range(0.0..1.0)).unwrap())
        .collect()
}

#[test]
fn split_is_stratified_with_rounded_class_counts() {
    let m = labeled(100, 104);
    let (train, test) = split_labeled(&m, 0.7, &mut seeded(0)).unwrap();
    assert_eq!(count(&train), (70, 73));
    assert_eq!(count(&test), (30, 31));
    let mut ids: Vec<String> = train.ids().into_iter().chain(test.ids()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 204);

    let (train, test) = split_labeled(&labeled(5, 5), 0.5, &mut seeded(0)).unwrap();
    // 2.5 rounds up in both classes
    assert_eq!((train.len(), test.len()), (6, 4));
}

#[test]
fn split_is_deterministic_per_seed() {
    let m = labeled(40, 60);
    let a = split_labeled(&m, 0.7, &mut seeded(3)).unwrap();
    let b = split_labeled(&m, 0.7, &mut seeded(3)).unwrap();
    let c = split_labeled(&m, 0.7, &mut seeded(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn split_needs_both_classes() {
    assert!(split_labeled(&labeled(0, 10), 0.7, &mut seeded(0)).is_err());
    assert!(split_labeled(&labeled(5, 5), 1.0, &mut seeded(0)).is_err());
}

#[test]
fn label_fraction_keeps_class_balance() {
    let m = labeled(30, 70);
    let half = sample_label_fraction(&m, 0.5, &mut seeded(1)).unwrap();
    assert_eq!(count(&half), (15, 35));
    let tenth = sample_label_fraction(&labeled(7, 70), 0.1, &mut seeded(1)).unwrap();
    assert_eq!(count(&tenth), (1, 7));
    let tiny = sample_label_fraction(&labeled(2, 3), 0.1, &mut seeded(1)).unwrap();
    assert_eq!(count(&tiny), (1, 1));
    assert_eq!(sample_label_fraction(&m, 1.0, &mut seeded(1)).unwrap(), m);
    assert!(sample_label_fraction(&m, 0.0, &mut seeded(1)).is_err());
    assert!(sample_label_fraction(&labeled(0, 4), 0.5, &mut seeded(1)).is_err());
}

#[test]
fn pretraining_history_has_one_entry_per_epoch() {
    let mut mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
    let vols = random_volumes(3, 1);
    for region in [LossRegion::Full, LossRegion::Masked] {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 1e-3,
            loss_region: region,
            ..TrainConfig::default()
        };
        let h = pretrain_volumes(&mut mae, &vols, &tiny_policy(), &cfg).unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.iter().all(|v| v.is_finite() && *v > 0.0));
    }
}

#[test]
fn pretraining_is_reproducible() {
    let vols = random_volumes(2, 1);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 1,
        lr: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
        let h = pretrain_volumes(&mut mae, &vols, &tiny_policy(), &cfg).unwrap();
        (mae, h)
    };
    assert_eq!(run(), run());
}

#[test]
fn early_stopping_cuts_history() {
    assert!(!should_stop(&[3.0, 2.0, 1.0], Some(1)));
    assert!(should_stop(&[1.0, 2.0, 3.0], Some(2)));
    assert!(!should_stop(&[1.0, 2.0], Some(2)));
    assert!(!should_stop(&[1.0, 2.0, 3.0], None));
}

#[test]
fn wrong_dims_are_rejected() {
    let mut mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
    let vols = vec![Volume::filled([8, 8, 8], [1.0; 3], 0.5).unwrap()];
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(pretrain_volumes(&mut mae, &vols, &tiny_policy(), &cfg).is_err());
}

#[test]
fn probing_leaves_encoder_bit_identical() {
    let mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
    let mut clf = build_classifier(EncoderSource::Pretrained(&mae), ClassifierMode::LinearProbe, &mut seeded(1)).unwrap();
    let head_before = clf.head_weight.clone();
    let vols = random_volumes(4, 2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    train_downstream_volumes(&mut clf, &vols, &[0, 1, 0, 1], &cfg).unwrap();
    assert_eq!(clf.encoder, mae.encoder);
    assert_ne!(clf.head_weight, head_before);

    let mut tuned = build_classifier(EncoderSource::Pretrained(&mae), ClassifierMode::FineTune, &mut seeded(1)).unwrap();
    train_downstream_volumes(&mut tuned, &vols, &[0, 1, 0, 1], &cfg).unwrap();
    assert_ne!(tuned.encoder, mae.encoder);
}

#[test]
fn single_sample_overfits() {
    let mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
    let mut clf = build_classifier(EncoderSource::Pretrained(&mae), ClassifierMode::FineTune, &mut seeded(1)).unwrap();
    let vols = random_volumes(1, 5);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut last = predict_volumes(&mut clf, &vols, 1).unwrap()[0];
    for _ in 0..10 {
        train_downstream_volumes(&mut clf, &vols, &[1], &cfg).unwrap();
        let p = predict_volumes(&mut clf, &vols, 1).unwrap()[0];
        assert!(p > last, "probability fell from {last} to {p}");
        last = p;
    }
    assert!(last > 0.9, "final probability {last}");
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
    let cfg = TrainConfig { epochs: 1, lr: 1e-3, ..TrainConfig::default() };
    let h = pretrain_volumes(&mut mae, &random_volumes(2, 0), &tiny_policy(), &cfg).unwrap();
    let meta = TrainingMetadata {
        epoch: 1,
        loss_history: h,
        seed: 0,
        label_fraction: None,
    };
    let path = dir.path().join("mae");
    save_mae(&mae, &meta, &path).unwrap();
    let (back, meta_back) = load_mae(&path).unwrap();
    assert_eq!(back, mae);
    assert_eq!(meta_back, meta);

    let mut clf = build_classifier(EncoderSource::Pretrained(&mae), ClassifierMode::FineTune, &mut seeded(1)).unwrap();
    let cpath = dir.path().join("clf.ckpt.json");
    save_classifier(&clf, &TrainingMetadata::default(), &cpath).unwrap();
    let (mut cback, _) = load_classifier(&cpath).unwrap();
    assert_eq!(cback, clf);
    let x = batch_tensor(&random_volumes(2, 3).iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(cback.predict(&x).unwrap(), clf.predict(&x).unwrap());

    assert!(load_classifier(&path).is_err());
    assert_eq!(checkpoint::encoder_state(&path).unwrap(), checkpoint::encoder_state(&cpath).unwrap());

    let mut ext = build_classifier::<f32, _>(EncoderSource::External(&path), ClassifierMode::ExternalWeights, &mut seeded(2)).unwrap();
    assert_eq!(ext.encoder, mae.encoder);
    assert!(!ext.encoder_trainable);
    ext.set_encoder_trainable(true).unwrap();
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mae = build_mae::<f32, _>(&tiny_config(), &mut seeded(0)).unwrap();
    let path = dir.path().join("m");
    save_mae(&mae, &TrainingMetadata::default(), &path).unwrap();
    let (json, raw) = checkpoint::checkpoint_paths(&path);

    let bytes = std::fs::read(&raw).unwrap();
    std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_mae(&path), Err(Error::LengthMismatch { .. })));
    std::fs::write(&raw, &bytes).unwrap();
    load_mae(&path).unwrap();

    let text = std::fs::read_to_string(&json).unwrap();
    std::fs::write(&json, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
    assert!(matches!(load_mae(&path), Err(Error::Version { expected: 1, found: 99 })));

    assert!(matches!(load_mae(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn manifests_round_trip_and_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let vols = random_volumes(2, 0);
    let mut m = LabeledManifest::default();
    for (i, v) in vols.iter().enumerate() {
        let name = format!("v{i}.json");
        save_volume(v, dir.path().join(&name)).unwrap();
        m.records.push(LabeledRecord {
            id: format!("v{i}"),
            volume: name.into(),
            label: i as u8,
        });
    }
    let path = dir.path().join("labeled.csv");
    m.write(&path).unwrap();
    let back = LabeledManifest::read(&path).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.load_volumes().unwrap(), vols);
    assert!(UnlabeledManifest::read(&path).is_err());

    std::fs::write(&path, "id,volume,label\na,x.json,1\na,y.json,0\n").unwrap();
    assert!(matches!(LabeledManifest::read(&path), Err(Error::Manifest { row: 3, .. })));
    std::fs::write(&path, "id,path,label\n").unwrap();
    assert!(matches!(LabeledManifest::read(&path), Err(Error::Manifest { row: 1, .. })));
    std::fs::write(&path, "id,volume,label\na,x.json,2\n").unwrap();
    assert!(matches!(LabeledManifest::read(&path), Err(Error::Manifest { row: 2, .. })));

    std::fs::write(&path, "id,volume,label\na,x.json,\nb,y.json,\n").unwrap();
    let u = UnlabeledManifest::read(&path).unwrap();
    assert_eq!(u.len(), 2);
    assert_eq!(u.volume_path(&u.records[0]), dir.path().join("x.json"));
}

#[test]
fn manifest_kind_is_read_from_the_label_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "id,volume,label\na,x.json,\nb,y.json,\n").unwrap();
    assert!(matches!(AnyManifest::read(&path).unwrap(), AnyManifest::Unlabeled(_)));
    std::fs::write(&path, "id,volume,label\na,x.json,1\nb,y.json,0\n").unwrap();
    let m = AnyManifest::read(&path).unwrap();
    assert!(matches!(m, AnyManifest::Labeled(_)));
    assert_eq!(m.entries()[1], ("b".to_string(), dir.path().join("y.json")));
    std::fs::write(&path, "id,volume,label\na,x.json,\na,y.json,\n").unwrap();
    assert!(matches!(AnyManifest::read(&path), Err(Error::Manifest { row: 3, .. })));
}
