use super::*;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_image(shape: Shape3, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (c, h, w) = shape;
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![1, c, h, w], data).unwrap()
}

#[test]
fn build_is_deterministic() {
    let spec = Preset::TinyVgg16.spec();
    let a: Model<f32> = build_model(&spec, 42).unwrap();
    let b: Model<f32> = build_model(&spec, 42).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (pa, pb) in la.params.iter().zip(&lb.params) {
            assert_eq!(pa.data(), pb.data());
        }
    }
    let c: Model<f32> = build_model(&spec, 43).unwrap();
    assert_ne!(
        a.layers[0].params[0].data(),
        c.layers[0].params[0].data(),
        "different seeds must differ"
    );
}

#[test]
fn invalid_specs_report_layer_index() {
    // conv kernel larger than the running feature
    let spec = ModelSpec {
        input: (3, 4, 4),
        classes: 2,
        layers: vec![
            LayerKind::MaxPool,
            LayerKind::MaxPool,
            LayerKind::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            LayerKind::Flatten,
            LayerKind::Affine { out_features: 2 },
        ],
    };
    match spec.validate() {
        Err(ModelError::InvalidSpec { layer, .. }) => assert_eq!(layer, 2),
        other => panic!("expected InvalidSpec, got {other:?}"),
    }

    // affine before flatten
    let spec = ModelSpec {
        input: (3, 4, 4),
        classes: 2,
        layers: vec![
            LayerKind::Affine { out_features: 2 },
            LayerKind::Flatten,
        ],
    };
    assert!(matches!(
        spec.validate(),
        Err(ModelError::InvalidSpec { layer: 0, .. })
    ));

    // head size disagrees with class count
    let spec = ModelSpec {
        input: (3, 4, 4),
        classes: 2,
        layers: vec![LayerKind::Flatten, LayerKind::Affine { out_features: 3 }],
    };
    assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec { .. })));
}

#[test]
fn tinyvgg_forward_zeros_gives_finite_logits() {
    let model: Model<f32> = build_model(&Preset::TinyVgg16.spec(), 7).unwrap();
    let x = Tensor::zeros(vec![1, 3, 16, 16]);
    let y = model.forward(&x).unwrap();
    assert_eq!(y.shape(), &[1, 10]);
    assert!(y.is_all_finite());
}

#[test]
fn all_presets_validate_and_run() {
    for preset in [
        Preset::TinyVgg16,
        Preset::TinyRes16,
        Preset::TinyVgg32,
        Preset::TinyRes32,
    ] {
        let spec = preset.spec();
        spec.validate().unwrap();
        let model: Model<f32> = build_model(&spec, 1).unwrap();
        let (c, h, w) = spec.input;
        let y = model.forward(&Tensor::zeros(vec![1, c, h, w])).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
        assert!(
            !spec.valid_split_indices().unwrap().is_empty(),
            "{} has no valid splits",
            preset.name()
        );
    }
}

#[test]
fn split_composition_is_bit_exact() {
    let spec = Preset::TinyRes16.spec();
    let model: Model<f32> = build_model(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &k in &spec.valid_split_indices().unwrap() {
        let sm = split_at(&model, k).unwrap();
        for _ in 0..4 {
            let x = rand_image(spec.input, &mut rng);
            let full = model.forward(&x).unwrap();
            let feat = sm.edge.forward(&x).unwrap();
            let composed = sm.cloud.forward(&feat).unwrap();
            assert_eq!(full.shape(), composed.shape());
            for (a, b) in full.data().iter().zip(composed.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn split_rejects_boundary_indices() {
    let model: Model<f32> = build_model(&Preset::TinyVgg16.spec(), 1).unwrap();
    assert!(matches!(
        split_at(&model, 0),
        Err(ModelError::InvalidSplitPoint(0))
    ));
    let n = model.layers.len();
    assert!(matches!(
        split_at(&model, n),
        Err(ModelError::InvalidSplitPoint(_))
    ));
    // flatten boundary is not a (C,H,W) feature
    assert!(matches!(
        split_at(&model, n - 1),
        Err(ModelError::InvalidSplitPoint(_))
    ));
}

#[test]
fn tinyvgg_split_after_block2_shape() {
    let model: Model<f32> = build_model(&Preset::TinyVgg16.spec(), 1).unwrap();
    let sm = split_at(&model, 6).unwrap();
    assert_eq!(sm.feat_shape, (32, 4, 4));
}

#[test]
fn flatten_features_roundtrip() {
    let t = Tensor::<f32>::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(flatten_features(&t).unwrap(), vec![3.0, 4.0]);

    let t = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(flatten_features(&t).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let t = rand_image((3, 4, 5), &mut rng);
        let row = flatten_features(&t).unwrap();
        let back = reshape_features(&row, (3, 4, 5)).unwrap();
        assert_eq!(t, back);
    }

    let batch2 = Tensor::<f32>::zeros(vec![2, 1, 1, 1]);
    assert!(flatten_features(&batch2).is_err());
}

fn separable_dataset(n: usize, seed: u64) -> Dataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let base = if label == 0 { 0.25 } else { 0.75 };
        let data: Vec<f32> = (0..3 * 8 * 8)
            .map(|_| (base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0))
            .collect();
        images.push(Tensor::new(vec![1, 3, 8, 8], data).unwrap());
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        classes: 2,
    }
}

fn small_classifier(seed: u64) -> Model<f32> {
    let spec = ModelSpec {
        input: (3, 8, 8),
        classes: 2,
        layers: vec![
            LayerKind::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerKind::Relu,
            LayerKind::MaxPool,
            LayerKind::Flatten,
            LayerKind::Affine { out_features: 2 },
        ],
    };
    build_model(&spec, seed).unwrap()
}

#[test]
fn trains_linearly_separable_toy() {
    let ds = separable_dataset(64, 11);
    let mut model = small_classifier(2);
    let cfg = TrainConfig {
        epochs: 20,
        lr: 2e-3,
        batch_size: 16,
        seed: 4,
    };
    let history = train_classifier(&mut model, &ds, &cfg).unwrap();
    assert_eq!(history.len(), 20);
    let acc = evaluate_accuracy(&model, &ds).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn zero_epochs_leaves_params_unchanged() {
    let ds = separable_dataset(8, 12);
    let mut model = small_classifier(2);
    let before = model.param_tensors();
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let history = train_classifier(&mut model, &ds, &cfg).unwrap();
    assert!(history.is_empty());
    for (a, b) in before.iter().zip(model.param_tensors().iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_is_deterministic() {
    let ds = separable_dataset(32, 13);
    let cfg = TrainConfig {
        epochs: 5,
        lr: 2e-3,
        batch_size: 8,
        seed: 21,
    };
    let mut m1 = small_classifier(3);
    let h1 = train_classifier(&mut m1, &ds, &cfg).unwrap();
    let mut m2 = small_classifier(3);
    let h2 = train_classifier(&mut m2, &ds, &cfg).unwrap();
    assert_eq!(h1, h2);
    for (a, b) in m1.param_tensors().iter().zip(m2.param_tensors().iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let ds = Dataset::<f32> {
        images: vec![],
        labels: vec![],
        classes: 2,
    };
    let mut model = small_classifier(1);
    assert!(matches!(
        train_classifier(&mut model, &ds, &TrainConfig::default()),
        Err(ModelError::DatasetEmpty)
    ));
    assert!(matches!(
        evaluate_accuracy(&model, &ds),
        Err(ModelError::DatasetEmpty)
    ));
}

#[test]
fn accuracy_constant_predictor() {
    // Affine head with zero weights and a bias favouring class 0.
    let mut model = Model::<f32> {
        input: (1, 2, 2),
        layers: vec![
            Layer {
                kind: LayerKind::Flatten,
                params: vec![],
            },
            Layer {
                kind: LayerKind::Affine { out_features: 2 },
                params: vec![
                    Tensor::zeros(vec![2, 4]),
                    Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
                ],
            },
        ],
    };
    let ds = Dataset {
        images: vec![Tensor::zeros(vec![1, 1, 2, 2]); 6],
        labels: vec![0; 6],
        classes: 2,
    };
    assert_eq!(evaluate_accuracy(&model, &ds).unwrap(), 1.0);
    let ds1 = Dataset {
        labels: vec![1; 6],
        ..ds
    };
    assert_eq!(evaluate_accuracy(&model, &ds1).unwrap(), 0.0);

    // tie on logits goes to the lowest class index
    model.layers[1].params[1] = Tensor::zeros(vec![2]);
    assert_eq!(evaluate_accuracy(&model, &ds1).unwrap(), 0.0);
}

#[test]
fn hand_counted_accuracy_on_holdout() {
    let ds = separable_dataset(40, 17);
    let mut model = small_classifier(5);
    let cfg = TrainConfig {
        epochs: 15,
        lr: 2e-3,
        batch_size: 8,
        seed: 6,
    };
    train_classifier(&mut model, &ds, &cfg).unwrap();
    let holdout = separable_dataset(20, 99);
    let mut correct = 0;
    for i in 0..holdout.len() {
        if predict_class(&model, &holdout.images[i]).unwrap() == holdout.labels[i] {
            correct += 1;
        }
    }
    let acc = evaluate_accuracy(&model, &holdout).unwrap();
    assert_eq!(acc, correct as f64 / 20.0);
}

mod checkpoint_tests {
    use super::super::checkpoint::*;
    use super::*;

    #[test]
    fn roundtrip_is_forward_bit_exact() {
        let ds = separable_dataset(16, 31);
        let mut model = small_classifier(8);
        train_classifier(
            &mut model,
            &ds,
            &TrainConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let mut meta = CheckpointMeta::new();
        meta.insert("seed".into(), "8".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.slkc");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, got_meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(got_meta.get("seed").map(String::as_str), Some("8"));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..4 {
            let x = rand_image((3, 8, 8), &mut rng);
            let a = model.forward(&x).unwrap();
            let b = loaded.forward(&x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn truncation_yields_structured_errors() {
        let model = small_classifier(9);
        let bytes = encode_checkpoint(&model, &CheckpointMeta::new());
        for cut in [0, 1, 3, 5, 9, 13, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint::<f32>(&bytes[..cut]) {
                Err(CheckpointError::FormatVersionMismatch)
                | Err(CheckpointError::ChecksumMismatch) => {}
                other => panic!("cut at {cut}: expected structured error, got {other:?}"),
            }
        }
        // flipped byte in the body
        let mut bad = bytes.clone();
        bad[20] ^= 0xff;
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(CheckpointError::ChecksumMismatch)
        ));
    }

    #[test]
    fn byte_size_follows_format_spec() {
        let model: Model<f32> = build_model(&Preset::TinyVgg16.spec(), 4).unwrap();
        let meta = CheckpointMeta::new();
        let bytes = encode_checkpoint(&model, &meta);

        let header = CheckpointHeader {
            input: model.input,
            layers: model.layers.iter().map(|l| l.kind.clone()).collect(),
            elem_bytes: 4,
            meta: meta.clone(),
        };
        let header_len = serde_json::to_vec(&header).unwrap().len();
        let mut want = 4 + 2 + 4 + header_len; // magic, version, header_len, header
        for (li, layer) in model.layers.iter().enumerate() {
            for (pi, p) in layer.params.iter().enumerate() {
                let name = format!("layer{li}.{}", param_names(&layer.kind)[pi]);
                want += 2 + name.len() + 1 + 4 * p.shape().len() + 1 + 4 * p.numel();
            }
        }
        want += 4; // crc
        assert_eq!(bytes.len(), want);
    }

    #[test]
    fn precision_mismatch_is_detected() {
        let model: Model<f64> = build_model(&Preset::TinyVgg16.spec(), 4).unwrap();
        let bytes = encode_checkpoint(&model, &CheckpointMeta::new());
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(CheckpointError::PrecisionMismatch {
                found: 8,
                expected: 4
            })
        ));
    }
}
