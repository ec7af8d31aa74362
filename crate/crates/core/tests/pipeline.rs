use voxmim::architecture::{build_classifier, build_mae, ClassifierMode, EncoderSource, ModelConfig};
use voxmim::corruption::MaskPolicy;
use voxmim::metrics::roc_auc_scores;
use voxmim::rng::{derive_seed, seeded};
use voxmim::synthdata::{generate_phantom, PhantomConfig};
use voxmim::trainer::{predict_volumes, pretrain_volumes, train_downstream_volumes, TrainConfig};
use voxmim::volume::{preprocess, PreprocessConfig, Volume};

const DIMS: [usize; 3] = [16, 16, 8];

fn phantoms(tag: &str, labels: &[u8]) -> Vec<Volume> {
    let config = PhantomConfig { dims: DIMS, ..PhantomConfig::default() };
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let raw = generate_phantom(&config, l, &mut seeded(derive_seed(11, &format!("{tag}/{i}")))).unwrap();
            preprocess(&raw, &PreprocessConfig::default()).unwrap()
        })
        .collect()
}

fn model() -> ModelConfig {
    ModelConfig {
        input_dims: DIMS,
        base_channels: 2,
        stages: 2,
        convs_per_stage: vec![1, 1],
        skip_connections: true,
    }
}

#[test]
fn pretrain_then_probe_and_finetune() {
    let unlabeled = phantoms("u", &[0, 1, 0, 1, 1, 0]);
    let labels = [1, 0, 1, 0, 1, 0];
    let train = phantoms("t", &labels);
    let test_labels = [0, 1, 0, 1];
    let test = phantoms("e", &test_labels);

    let policy = MaskPolicy { cube_min: [4, 4, 2], cube_max: [8, 8, 4], ..MaskPolicy::dynamic_preset() };
    let mut mae = build_mae::<f32, _>(&model(), &mut seeded(1)).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
    let losses = pretrain_volumes(&mut mae, &unlabeled, &policy, &cfg).unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| l.is_finite()));

    let down = TrainConfig { epochs: 2, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
    for mode in [ClassifierMode::LinearProbe, ClassifierMode::FineTune] {
        let mut clf = build_classifier(EncoderSource::Pretrained(&mae), mode, &mut seeded(2)).unwrap();
        train_downstream_volumes(&mut clf, &train, &labels, &down).unwrap();
        assert_eq!(clf.encoder == mae.encoder, mode == ClassifierMode::LinearProbe);
        let scores = predict_volumes(&mut clf, &test, 2).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let auc = roc_auc_scores(&test_labels, &scores).unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn random_baseline_keeps_its_encoder_frozen() {
    let labels = [1, 0, 1, 0];
    let train = phantoms("r", &labels);
    let mut clf = build_classifier::<f32, _>(EncoderSource::Fresh(&model()), ClassifierMode::RandomInit, &mut seeded(3)).unwrap();
    let before = clf.encoder.clone();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
    train_downstream_volumes(&mut clf, &train, &labels, &cfg).unwrap();
    assert_eq!(clf.encoder, before);
    assert_ne!(clf.head_weight, build_classifier::<f32, _>(EncoderSource::Fresh(&model()), ClassifierMode::RandomInit, &mut seeded(3)).unwrap().head_weight);
}
