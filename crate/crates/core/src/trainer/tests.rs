use super::*;

fn example(id: usize, embedding: Vec<f32>, positive: bool) -> LabeledExample {
    LabeledExample {
        image_id: format!("e{id}"),
        embedding,
        label: Label::from_bool(positive),
        source: LabelSource::User,
    }
}

fn blobs(n: usize, dim: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let shift = if positive { 0.8 } else { -0.8 };
            let v = (0..dim).map(|d| rng.gen_range(-1.0f32..1.0) + if d == 0 { shift } else { 0.0 }).collect();
            example(i, v, positive)
        })
        .collect()
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate, 3e-4);
    assert_eq!(c.batch_size, 512);
    assert_eq!((c.beta1, c.beta2, c.epsilon, c.weight_decay), (0.9, 0.999, 1e-8, 0.01));
    assert_eq!(c.max_epochs, 200);
    assert_eq!(c.early_stop, Some(EarlyStop { patience: 20, holdout_fraction: 0.1 }));
}

#[test]
fn zero_model_predicts_one_half() {
    let m = DistilledModel::zeros(3);
    assert_eq!(m.predict(&[1.0, -2.0, 3.0]).unwrap(), 0.5);
}

#[test]
fn hand_built_identity_path() {
    let mut m = DistilledModel::zeros(2);
    for layer in 0..4 {
        m.set_weight(layer, 0, 0, 1.0);
    }
    let p = m.predict(&[1.0, 0.0]).unwrap();
    assert!((p - 0.731_058_578_630_004_9).abs() < 1e-6, "{p}");
    assert!((m.predict(&[0.0, 5.0]).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn predict_batch_matches_predict() {
    let m = DistilledModel::init(5, 3);
    let x = [0.1f32, -0.2, 0.3, 0.0, 1.0];
    assert_eq!(m.predict_batch(&[&x]).unwrap(), vec![m.predict(&x).unwrap()]);
    assert!(matches!(m.predict(&[1.0]), Err(TrainError::DimensionMismatch { .. })));
}

#[test]
fn probabilities_stay_open_interval() {
    let mut m = DistilledModel::zeros(1);
    for layer in 0..4 {
        m.set_weight(layer, 0, 0, 1000.0);
    }
    let p = m.predict(&[1000.0]).unwrap();
    assert!(p > 0.0 && p < 1.0);
    m.set_bias(3, 0, -1e30);
    let p = m.predict(&[0.0]).unwrap();
    assert!(p > 0.0 && p < 1.0);
}

#[test]
fn single_class_and_dimension_errors() {
    let only_pos: Vec<_> = (0..4).map(|i| example(i, vec![0.0, 1.0], true)).collect();
    assert!(matches!(train(&only_pos, &TrainConfig::default()), Err(TrainError::SingleClass(Label::Positive))));
    assert!(matches!(train(&[], &TrainConfig::default()), Err(TrainError::Empty)));
    let mixed = vec![example(0, vec![0.0, 1.0], true), example(1, vec![0.0], false)];
    assert!(matches!(train(&mixed, &TrainConfig::default()), Err(TrainError::DimensionMismatch { index: 1, .. })));
    let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(matches!(train(&blobs(4, 2, 0), &bad), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn deterministic_and_loss_decreases() {
    let data = blobs(200, 8, 1);
    let cfg = TrainConfig { max_epochs: 5, seed: 9, ..TrainConfig::default() };
    let (a, ra) = train(&data, &cfg).unwrap();
    let (b, rb) = train(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.epochs[0].loss < ra.initial_loss);
    let prov = a.provenance.as_ref().unwrap();
    assert_eq!(prov.teacher_sources.get("user"), Some(&200));
    assert_eq!(prov.config_hash, cfg.hash());
    assert_eq!(ra.holdout_size, 20);
    assert!(ra.table().starts_with("epoch\tloss\tval_loss\n1\t"));
}

#[test]
fn learns_simple_blobs() {
    let data = blobs(400, 8, 2);
    let (m, _) = train(&data, &TrainConfig { seed: 1, ..TrainConfig::default() }).unwrap();
    assert!(accuracy(&m, &data).unwrap() > 0.9);
}

#[test]
fn gradient_check_small_net() {
    let m = DistilledModel::init(4, 11);
    let ex = example(0, vec![0.3, -0.7, 0.2, 0.9], true);
    let g = gradient_check(&m, &ex, 1e-4).unwrap();
    assert!(g.checked > 1000);
    assert!(g.max_relative_error < 1e-4, "{g:?}");
    assert!(matches!(gradient_check(&m, &ex, 0.0), Err(TrainError::Precondition(_))));
    assert!(matches!(gradient_check(&m, &ex, 0.02), Err(TrainError::Precondition(_))));
}

#[test]
fn gradient_check_excludes_zero_gradients() {
    // all-zero weights: only the output bias has a gradient
    let m = DistilledModel::zeros(2);
    let g = gradient_check(&m, &example(0, vec![1.0, 1.0], true), 1e-4).unwrap();
    assert_eq!(g.checked, 1);
    assert_eq!(g.skipped_small, m.params.len() - 1);
    assert!(g.max_relative_error < 1e-8);
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let m = DistilledModel::init(6, 4);
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(), m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let x: Vec<f32> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert_eq!(m.predict(&x).unwrap().to_bits(), back.predict(&x).unwrap().to_bits());
    }
}

#[test]
fn model_file_corruption() {
    let m = DistilledModel::init(3, 4);
    let bytes = model_bytes(&m);
    assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 10]), Err(TrainError::ChecksumMismatch)));
    assert!(matches!(model_from_bytes(&bytes[..5]), Err(TrainError::ChecksumMismatch)));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(model_from_bytes(&flipped), Err(TrainError::ChecksumMismatch)));
    let mut future = bytes;
    future[4..8].copy_from_slice(&(MODEL_FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(model_from_bytes(&future), Err(TrainError::VersionMismatch { .. })));
}
