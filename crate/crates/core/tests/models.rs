//! Model construction, inference contracts and checkpoint round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmage_core::models::{
    build_mlp, build_model, feature_batch, predict_age, volume_batch, AgeModel, Batch, MlpSpec,
    ModelError, ModelInput, ModelKind, ModelSpec, Normalization, ResNetSpec,
};
use wmage_core::nn::{backward, Mode, Tape, Tensor};
use wmage_core::{MultiChannelVolume, Volume3D};

fn random_volume(n: usize, rng: &mut ChaCha8Rng) -> MultiChannelVolume {
    let mk = |rng: &mut ChaCha8Rng| {
        Volume3D::new(
            [n, n, n],
            [1.0; 3],
            (0..n * n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    };
    let fa = mk(rng);
    let md = mk(rng);
    MultiChannelVolume::new(vec![fa, md], vec!["FA".into(), "MD".into()]).unwrap()
}

/// Parameter count from the layer arithmetic alone.
fn resnet_count_by_hand(blocks: [usize; 4], head_hidden: bool) -> usize {
    let widths = [64usize, 128, 256, 512];
    let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k * k + 2 * cout;
    let mut total = conv_bn(2, 64, 7);
    let mut cin = 64;
    for (s, (&n, &w)) in blocks.iter().zip(&widths).enumerate() {
        for i in 0..n {
            total += conv_bn(cin, w, 3) + conv_bn(w, w, 3);
            if s > 0 && i == 0 {
                total += conv_bn(cin, w, 1);
            }
            cin = w;
        }
    }
    total
        + if head_hidden {
            513 * 64 + 64 + 64 + 1
        } else {
            513 + 1
        }
}

#[test]
fn mlp_param_counts() {
    assert_eq!(
        build_mlp(&MlpSpec::new(vec![2, 1]).unwrap(), 0)
            .unwrap()
            .param_count(),
        3
    );
    let m = build_mlp(&"537-128-64-1".parse().unwrap(), 0).unwrap();
    assert_eq!(m.param_count(), 537 * 128 + 128 + 128 * 64 + 64 + 64 + 1);
    assert_eq!(m.param_count(), 77_185);
    assert!(matches!(
        MlpSpec::new(vec![5, 3]),
        Err(ModelError::InvalidSpec(_))
    ));
}

#[test]
fn resnet_param_counts_match_layer_arithmetic() {
    for (variant, blocks) in [(10, [1, 1, 1, 1]), (18, [2, 2, 2, 2])] {
        for hidden in [false, true] {
            let spec = ModelSpec::Resnet {
                backbone: ResNetSpec::new(variant, 2).unwrap(),
                head_hidden: hidden,
                input: 16,
            };
            let m = build_model(&spec, 1).unwrap();
            assert_eq!(
                m.param_count(),
                resnet_count_by_hand(blocks, hidden),
                "{spec}"
            );
            assert_eq!(m.head_hidden(), hidden.then_some(64));
        }
    }
}

#[test]
fn constant_mlp_predicts_its_bias() {
    let mut m = build_mlp(&MlpSpec::new(vec![5, 3, 1]).unwrap(), 4).unwrap();
    let ids: Vec<_> = m.store().ids().collect();
    for id in &ids {
        m.store_mut().value_mut(*id).data_mut().fill(0.0);
    }
    let last_bias = m.store().find("mlp.fc2.bias").unwrap();
    m.store_mut().value_mut(last_bias).data_mut()[0] = 70.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-100.0..100.0)).collect();
        assert_eq!(predict_age(&m, ModelInput::Features(&x)).unwrap(), 70.0);
    }

    let mut affine = build_mlp(&MlpSpec::new(vec![5, 1]).unwrap(), 2).unwrap();
    let b = affine.store().find("mlp.fc1.bias").unwrap();
    affine.store_mut().value_mut(b).data_mut()[0] = -3.25;
    assert_eq!(
        predict_age(&affine, ModelInput::Features(&[0.0; 5])).unwrap(),
        -3.25
    );
}

#[test]
fn predictions_are_deterministic_and_seeded() {
    let spec: MlpSpec = "33-128-64-1".parse().unwrap();
    let a = build_mlp(&spec, 9).unwrap();
    let b = build_mlp(&spec, 9).unwrap();
    let c = build_mlp(&spec, 10).unwrap();
    let x: Vec<f64> = (0..33).map(|i| (i as f64 * 0.37).sin()).collect();
    let pa = predict_age(&a, ModelInput::Features(&x)).unwrap();
    assert_eq!(pa, predict_age(&a, ModelInput::Features(&x)).unwrap());
    assert_eq!(pa, predict_age(&b, ModelInput::Features(&x)).unwrap());
    let w = |m: &AgeModel, name: &str| {
        m.store()
            .value(m.store().find(name).unwrap())
            .data()
            .to_vec()
    };
    assert_eq!(w(&a, "mlp.fc1.weight"), w(&b, "mlp.fc1.weight"));
    assert_ne!(w(&a, "mlp.fc1.weight"), w(&c, "mlp.fc1.weight"));
    // The output layer starts at zero, so every fresh model predicts the
    // target mean (0 under the identity normalisation).
    assert!(w(&c, "mlp.fc3.weight").iter().all(|&v| v == 0.0));
    assert_eq!(pa, 0.0);
}

#[test]
fn kind_and_shape_errors() {
    let mlp = build_mlp(&MlpSpec::new(vec![4, 1]).unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vol = random_volume(16, &mut rng);
    assert_eq!(
        predict_age(
            &mlp,
            ModelInput::Volume {
                volume: &vol,
                sex: 1
            }
        ),
        Err(ModelError::KindMismatch {
            expected: ModelKind::RoiMlp,
            got: ModelKind::Resnet
        })
    );
    assert!(matches!(
        predict_age(&mlp, ModelInput::Features(&[1.0, 2.0])),
        Err(ModelError::ShapeMismatch(_))
    ));
    let net = build_model(&"resnet:10,head_hidden=false,input=16".parse().unwrap(), 0).unwrap();
    assert!(matches!(
        predict_age(&net, ModelInput::Features(&[1.0; 4])),
        Err(ModelError::KindMismatch { .. })
    ));
    let small = random_volume(12, &mut rng);
    assert!(matches!(
        predict_age(
            &net,
            ModelInput::Volume {
                volume: &small,
                sex: 0
            }
        ),
        Err(ModelError::EmptyOutput(_))
    ));
}

#[test]
fn eval_predictions_ignore_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = build_model(&"resnet:10,head_hidden=true,input=16".parse().unwrap(), 5).unwrap();
    let vols: Vec<MultiChannelVolume> = (0..3).map(|_| random_volume(16, &mut rng)).collect();
    let refs: Vec<&MultiChannelVolume> = vols.iter().collect();
    let together = net
        .predict_batch(&volume_batch(&refs, &[0, 1, 1]).unwrap())
        .unwrap();
    for (i, v) in vols.iter().enumerate() {
        let alone = predict_age(
            &net,
            ModelInput::Volume {
                volume: v,
                sex: [0, 1, 1][i],
            },
        )
        .unwrap();
        assert_eq!(alone, together[i]);
    }

    let mlp = build_mlp(&"20-16-8-1".parse().unwrap(), 3).unwrap();
    let rows: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let row_refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let together = mlp
        .predict_batch(&feature_batch(&row_refs).unwrap())
        .unwrap();
    for (r, t) in rows.iter().zip(&together) {
        assert_eq!(predict_age(&mlp, ModelInput::Features(r)).unwrap(), *t);
    }
}

#[test]
fn every_table_variant_runs_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vols: Vec<MultiChannelVolume> = (0..2).map(|_| random_volume(16, &mut rng)).collect();
    let refs: Vec<&MultiChannelVolume> = vols.iter().collect();
    let vol_batch = volume_batch(&refs, &[0, 1]).unwrap();
    let feats = Batch::Features(Tensor::randn(vec![3, 537], 1.0, &mut rng));
    for spec in ModelSpec::table_variants(537, 16) {
        let mut m = build_model(&spec, 0).unwrap();
        let batch = if spec.kind() == ModelKind::RoiMlp {
            &feats
        } else {
            &vol_batch
        };
        let mut tape = Tape::new();
        let (out, upd) = m.forward(&mut tape, batch, Mode::Train).unwrap();
        assert_eq!(tape.value(out).shape(), &[batch.len(), 1], "{spec}");
        let target = tape.input(Tensor::zeros(vec![batch.len(), 1]), false);
        let loss = tape.l1_loss(out, target).unwrap();
        let mut store = m.store().clone();
        backward(&mut tape, loss, &mut store).unwrap();
        assert!(store.params().iter().all(|p| p.grad.is_some()), "{spec}");
        drop(tape);
        m.apply_bn_updates(&upd);
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = build_model(&"resnet:10,head_hidden=false,input=16".parse().unwrap(), 8).unwrap();
    net.normalization.target_mean = 55.0;
    net.normalization.target_std = 12.0;
    let vols: Vec<MultiChannelVolume> = (0..2).map(|_| random_volume(16, &mut rng)).collect();
    let refs: Vec<&MultiChannelVolume> = vols.iter().collect();
    let batch = volume_batch(&refs, &[1, 0]).unwrap();
    let mut tape = Tape::new();
    let (_, upd) = net.forward(&mut tape, &batch, Mode::Train).unwrap();
    net.apply_bn_updates(&upd);
    let before = net.predict_batch(&batch).unwrap();
    let bytes = net.to_checkpoint(None, serde_json::json!({"epoch": 3}));
    let (back, extra) = wmage_core::AgeModel::from_checkpoint(&bytes, None).unwrap();
    assert_eq!(extra["epoch"], 3);
    assert_eq!(back.spec(), net.spec());
    assert_eq!(back.predict_batch(&batch).unwrap(), before);

    let mut mlp = build_mlp(&"6-4-1".parse().unwrap(), 1).unwrap();
    mlp.normalization = Normalization::fit(&[vec![1.0; 6], vec![3.0; 6]], &[40.0, 60.0]);
    let x = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    let p = predict_age(&mlp, ModelInput::Features(&x)).unwrap();
    let (back, _) = wmage_core::AgeModel::from_checkpoint(
        &mlp.to_checkpoint(None, serde_json::Value::Null),
        None,
    )
    .unwrap();
    assert_eq!(predict_age(&back, ModelInput::Features(&x)).unwrap(), p);

    // fitted maps carry arbitrary f64s and must survive the JSON header exactly
    let rows: Vec<Vec<f64>> = (0..9)
        .map(|i| {
            (0..6)
                .map(|j| ((i * 7 + j * 3) % 11) as f64 / 7.0 + 0.1 * j as f64)
                .collect()
        })
        .collect();
    let ages: Vec<f64> = (0..9).map(|i| 20.0 + 7.3 * i as f64).collect();
    mlp.normalization = Normalization::fit_pca(&rows, &[1.0; 6], &ages, 3.0);
    let (back, _) = wmage_core::AgeModel::from_checkpoint(
        &mlp.to_checkpoint(None, serde_json::Value::Null),
        None,
    )
    .unwrap();
    assert_eq!(back.normalization, mlp.normalization);
}

#[test]
fn normalization_fit_values() {
    let n = Normalization::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]], &[20.0, 40.0]);
    assert_eq!(n.feature_mean, vec![2.0, 5.0]);
    assert_eq!(n.feature_scale, vec![1.0, 1.0]);
    assert_eq!((n.target_mean, n.target_std), (30.0, 10.0));
    assert_eq!(n.decode_target(n.encode_target(47.5)), 47.5);
}
