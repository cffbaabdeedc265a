use super::*;
use crate::data::split::split_patient_level;
use crate::data::synth::{generate_synthetic, SynthConfig};
use ndarray::Array3;

fn tiny_config() -> BackboneConfig {
    BackboneConfig { kind: BackboneKind::Small, width: 4, input_size: 8 }
}

fn random_input(h: usize, w: usize, seed: u64) -> Fm {
    let mut r = rng::stream(seed, &["test", "input"]);
    nn::he_normal(&[3, h, w], 1, &mut r).into_dimensionality::<ndarray::Ix3>().unwrap()
}

/// Zeroes every parameter, then applies per-tensor formulas. With all conv
/// weights at zero each conv output is constant per channel, group norm of a
/// constant collapses to its beta, and the whole network reduces to
/// straight-line scalar arithmetic we can redo by hand.
fn program_constant_network(model: &mut Classifier) {
    for (name, p) in model.params_mut() {
        p.val.fill(0.0);
        match name.as_str() {
            "stem.norm.beta" => {
                for (c, v) in p.val.iter_mut().enumerate() {
                    *v = [1.0, -1.0, 2.0, 0.5][c];
                }
            }
            "block2.cn2.norm.beta" => {
                for (c, v) in p.val.iter_mut().enumerate() {
                    *v = 0.2 * c as f64 - 0.6;
                }
            }
            "block2.skip.norm.beta" => p.val.fill(0.1),
            "block4.cn2.norm.beta" => {
                for (c, v) in p.val.iter_mut().enumerate() {
                    *v = 0.05 * c as f64 - 0.3;
                }
            }
            "block4.skip.norm.beta" => {
                for (c, v) in p.val.iter_mut().enumerate() {
                    *v = 0.02 * c as f64 - 0.1;
                }
            }
            "head.w" => {
                let cols = p.val.shape()[1];
                for (flat, v) in p.val.iter_mut().enumerate() {
                    let (t, c) = (flat / cols, flat % cols);
                    *v = (t as f64 + 1.0) * 0.01 * c as f64 - 0.02 * t as f64;
                }
            }
            "head.b" => {
                for (t, v) in p.val.iter_mut().enumerate() {
                    *v = 0.1 * t as f64;
                }
            }
            _ => {}
        }
    }
}

#[test]
fn forward_matches_straight_line_hand_computation() {
    let mut model = build_classifier(3, &tiny_config(), 11).unwrap();
    program_constant_network(&mut model);

    let x = random_input(8, 8, 4); // irrelevant: zero convs erase it
    let (logits, cache) = model.forward_full(&x);

    // Redo the arithmetic with plain scalars. Stem betas pass through relu;
    // blocks 1 and 3 have identity skips and zero main betas; blocks 2 and 4
    // add their main and projection betas before the final relu.
    let out2: Vec<f64> = (0..8).map(|c| f64::max(0.0, (0.2 * c as f64 - 0.6) + 0.1)).collect();
    let out4: Vec<f64> = (0..16)
        .map(|c| f64::max(0.0, (0.05 * c as f64 - 0.3) + (0.02 * c as f64 - 0.1)))
        .collect();
    let _ = out2; // feeds block 3/4 only through shapes; block 4 betas overwrite it
    for (c, &want) in out4.iter().enumerate() {
        let got = cache.features[[c, 0, 0]];
        assert!((got - want).abs() < 1e-12, "feature channel {c}: got {got}, want {want}");
        // every spatial position of a constant plane agrees
        assert!(
            cache.features.index_axis(ndarray::Axis(0), c).iter().all(|v| (v - want).abs() < 1e-12),
            "feature channel {c} is not constant"
        );
    }
    for t in 0..3 {
        let mut want = 0.1 * t as f64;
        for (c, &f) in out4.iter().enumerate() {
            want += ((t as f64 + 1.0) * 0.01 * c as f64 - 0.02 * t as f64) * f;
        }
        assert!(
            (logits[t] - want).abs() < 1e-12,
            "logit {t}: got {}, want {want}",
            logits[t]
        );
    }
}

#[test]
fn feature_resolution_is_a_quarter_of_the_input() {
    let model = build_classifier(3, &tiny_config(), 1).unwrap();
    let (_, cache) = model.forward_full(&random_input(8, 8, 2));
    assert_eq!(cache.features.shape(), &[16, 2, 2], "two stride-2 blocks halve twice");
    let cfg32 = BackboneConfig { input_size: 32, ..tiny_config() };
    let model32 = build_classifier(3, &cfg32, 1).unwrap();
    let (_, cache32) = model32.forward_full(&random_input(32, 32, 2));
    assert_eq!(cache32.features.shape(), &[16, 8, 8]);
}

#[test]
fn logit_count_follows_num_centres() {
    let model = build_classifier(5, &tiny_config(), 3).unwrap();
    let logits = model.forward(&random_input(8, 8, 9));
    assert_eq!(logits.len(), 5, "one logit per centre");
    assert_eq!(model.centres, vec![1, 2, 3, 4, 5]);
}

#[test]
fn fewer_than_two_centres_is_rejected() {
    let err = build_classifier(1, &tiny_config(), 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err:?}");
}

#[test]
fn default_width_lands_near_one_hundred_thousand_parameters() {
    let model = build_classifier(5, &BackboneConfig::default(), 0).unwrap();
    let n = model.num_params();
    assert!(
        (80_000..=120_000).contains(&n),
        "expected roughly 1e5 parameters at width 16, counted {n}"
    );
}

#[test]
fn zero_image_produces_finite_logits() {
    let model = build_classifier(3, &tiny_config(), 5).unwrap();
    let logits = model.forward(&Array3::zeros((3, 8, 8)));
    assert!(logits.iter().all(|v| v.is_finite()), "flat input must not divide by zero: {logits}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut model = build_classifier(3, &tiny_config(), 21).unwrap();
    let x = random_input(8, 8, 22);
    let target = 1usize;

    let (logits, cache) = model.forward_full(&x);
    let (_, dlogits) = act::softmax_cross_entropy(&logits, target);
    model.backward_full(&cache, &dlogits);

    // Sample a coordinate from tensors across the depth of the network.
    let probes = [
        ("stem.conv.w", 5usize),
        ("stem.norm.gamma", 2),
        ("block1.cn1.conv.w", 17),
        ("block2.skip.conv.w", 3),
        ("block2.cn2.norm.beta", 4),
        ("block3.cn2.conv.w", 40),
        ("block4.cn1.conv.b", 1),
        ("block4.skip.norm.gamma", 7),
        ("head.w", 20),
        ("head.b", 2),
    ];
    let eps = 1e-5;
    for (name, flat) in probes {
        let an = {
            let params = model.params_mut();
            let (_, p) = params.into_iter().find(|(n, _)| n == name).expect("probe name exists");
            p.grad.as_slice().unwrap()[flat]
        };
        let eval = |delta: f64, model: &mut Classifier| -> f64 {
            {
                let params = model.params_mut();
                let (_, p) = params.into_iter().find(|(n, _)| n == name).unwrap();
                p.val.as_slice_mut().unwrap()[flat] += delta;
            }
            let l = model.forward(&x);
            act::softmax_cross_entropy(&l, target).0
        };
        let lp = eval(eps, &mut model);
        let lm = eval(-2.0 * eps, &mut model);
        eval(eps, &mut model); // restore
        let fd = (lp - lm) / (2.0 * eps);
        assert!(
            (fd - an).abs() < 1e-6 + 1e-4 * fd.abs(),
            "{name}[{flat}]: fd={fd} analytic={an}"
        );
    }
}

#[test]
fn feature_gradient_matches_perturbing_the_feature_maps() {
    let model = build_classifier(3, &tiny_config(), 31).unwrap();
    let x = random_input(8, 8, 32);
    let (logits, cache) = model.forward_full(&x);
    let target = 2usize;
    let grad = model.grad_logit_wrt_features(&cache, target);
    assert_eq!(grad.shape(), cache.features.shape());

    let eps = 1e-5;
    let mut features = cache.features.clone();
    for idx in [(0usize, 0usize, 0usize), (7, 1, 1), (15, 0, 1), (3, 1, 0)] {
        let orig = features[idx];
        features[idx] = orig + eps;
        let lp = model.forward_from_features(&features)[target];
        features[idx] = orig - eps;
        let lm = model.forward_from_features(&features)[target];
        features[idx] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        assert!(
            (fd - grad[idx]).abs() < 1e-9,
            "d logit/d feature at {idx:?}: fd={fd} analytic={}",
            grad[idx]
        );
    }
    let _ = logits;
}

#[test]
fn deep_variant_builds_and_runs() {
    let cfg = BackboneConfig { kind: BackboneKind::Deep50, width: 8, input_size: 32 };
    let model = build_classifier(4, &cfg, 2).unwrap();
    let (logits, cache) = model.forward_full(&random_input(32, 32, 3));
    assert_eq!(logits.len(), 4);
    // Stem stride 2, stem pool 2, then strides 1-2-2-2 over the stages.
    assert_eq!(cache.features.shape(), &[256, 1, 1]);
    assert_eq!(model.blocks.len(), 16, "3+4+6+3 bottlenecks");
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn deep_variant_gradients_match_finite_differences() {
    let cfg = BackboneConfig { kind: BackboneKind::Deep50, width: 4, input_size: 16 };
    let mut model = build_classifier(2, &cfg, 8).unwrap();
    let x = random_input(16, 16, 9);
    let (logits, cache) = model.forward_full(&x);
    let (_, dlogits) = act::softmax_cross_entropy(&logits, 0);
    model.backward_full(&cache, &dlogits);

    let eps = 1e-5;
    for (name, flat) in [("stem.conv.w", 10usize), ("block5.cn2.conv.w", 6), ("head.w", 3)] {
        let an = {
            let params = model.params_mut();
            let (_, p) = params.into_iter().find(|(n, _)| n == name).expect("probe name exists");
            p.grad.as_slice().unwrap()[flat]
        };
        let eval = |delta: f64, model: &mut Classifier| -> f64 {
            {
                let params = model.params_mut();
                let (_, p) = params.into_iter().find(|(n, _)| n == name).unwrap();
                p.val.as_slice_mut().unwrap()[flat] += delta;
            }
            let l = model.forward(&x);
            act::softmax_cross_entropy(&l, 0).0
        };
        let lp = eval(eps, &mut model);
        let lm = eval(-2.0 * eps, &mut model);
        eval(eps, &mut model);
        let fd = (lp - lm) / (2.0 * eps);
        assert!(
            (fd - an).abs() < 1e-6 + 1e-4 * fd.abs(),
            "{name}[{flat}]: fd={fd} analytic={an}"
        );
    }
}

#[test]
fn backbone_kind_parses_known_names_only() {
    assert_eq!("small".parse::<BackboneKind>().unwrap(), BackboneKind::Small);
    assert_eq!("deep50".parse::<BackboneKind>().unwrap(), BackboneKind::Deep50);
    let err = "resnet18".parse::<BackboneKind>().unwrap_err();
    assert!(matches!(err, Error::Config(_)), "unknown kinds must fail loudly, got {err:?}");
}

#[test]
fn prediction_breaks_ties_toward_the_lowest_centre_id() {
    let mut model = build_classifier(3, &tiny_config(), 0).unwrap();
    for (_, p) in model.params_mut() {
        p.val.fill(0.0); // all logits become exactly the bias = 0
    }
    model.centres = vec![2, 5, 9];
    let edge = EdgeImage { data: Array3::zeros((3, 8, 8)) };
    let (logits, centre) = predict_centre(&model, &edge).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    assert_eq!(centre, 2, "equal logits resolve to the lowest centre id");
}

#[test]
fn prediction_rejects_mismatched_input_size() {
    let model = build_classifier(3, &tiny_config(), 0).unwrap();
    let edge = EdgeImage { data: Array3::zeros((3, 16, 16)) };
    let err = predict_centre(&model, &edge).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "got {err:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut model = build_classifier(3, &cfg, 77).unwrap();
    model.centres = vec![1, 3, 4];
    let meta = CheckpointMeta {
        centres: model.centres.clone(),
        split_fingerprint: "f".repeat(64),
        config: cfg,
        epochs: 0,
        seed: 77,
        augment: true,
        weights_sha256: model.weights_hash(),
    };
    save_classifier(dir.path(), &model, &meta).unwrap();
    let (loaded, loaded_meta) = load_classifier(dir.path()).unwrap();

    assert_eq!(loaded.weights_hash(), model.weights_hash());
    assert_eq!(loaded.centres, vec![1, 3, 4]);
    assert_eq!(loaded_meta.split_fingerprint, meta.split_fingerprint);
    let x = random_input(8, 8, 78);
    let a = model.forward(&x);
    let b = loaded.forward(&x);
    assert_eq!(a, b, "reloaded weights must reproduce logits bit for bit");
}

#[test]
fn tampered_weights_hash_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let model = build_classifier(2, &cfg, 1).unwrap();
    let meta = CheckpointMeta {
        centres: model.centres.clone(),
        split_fingerprint: String::new(),
        config: cfg,
        epochs: 0,
        seed: 1,
        augment: false,
        weights_sha256: "0".repeat(64),
    };
    save_classifier(dir.path(), &model, &meta).unwrap();
    let err = load_classifier(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "got {err:?}");
}

fn training_fixture() -> (crate::data::MultiCentreDataset, SplitSpec) {
    // Four centres so that holding one out still leaves a three-centre
    // training problem.
    let config = SynthConfig::for_centres(4, 12, 4, 32);
    let ds = generate_synthetic(&config, 900).unwrap();
    let split = split_patient_level(&ds, 4, (0.8, 0.1, 0.1), 900).unwrap();
    (ds, split)
}

#[test]
fn training_separates_three_synthetic_centres() {
    let (ds, split) = training_fixture();
    let cfg = BackboneConfig { kind: BackboneKind::Small, width: 8, input_size: 32 };
    let mut model = build_classifier(3, &cfg, 900).unwrap();
    let opts = TrainOpts { epochs: 10, lr: 1e-3, seed: 900, ..TrainOpts::default() };
    let losses = train_classifier(&mut model, &ds, &split, &opts).unwrap();

    assert_eq!(losses.len(), 10);
    assert!(
        losses[losses.len() - 1] < losses[0],
        "cross-entropy must fall from first epoch ({}) to last ({})",
        losses[0],
        losses[losses.len() - 1]
    );
    assert_eq!(model.centres, vec![1, 2, 3], "held-out centre 4 never enters training");

    let mut correct = 0usize;
    for id in &split.train {
        let s = ds.get(id).unwrap();
        let edge = sobel(&s.image, SobelMode::GrayscaleFirst).unwrap();
        let (_, predicted) = predict_centre(&model, &edge).unwrap();
        if predicted == s.centre {
            correct += 1;
        }
    }
    let acc = correct as f64 / split.train.len() as f64;
    assert!(acc > 0.90, "training accuracy {acc:.3} on {} samples", split.train.len());
}

#[test]
fn zero_epochs_leaves_weights_untouched() {
    let (ds, split) = training_fixture();
    let cfg = BackboneConfig { kind: BackboneKind::Small, width: 8, input_size: 32 };
    let mut model = build_classifier(3, &cfg, 13).unwrap();
    let before = model.weights_hash();
    let opts = TrainOpts { epochs: 0, seed: 13, ..TrainOpts::default() };
    let losses = train_classifier(&mut model, &ds, &split, &opts).unwrap();
    assert!(losses.is_empty());
    assert_eq!(model.weights_hash(), before, "zero epochs must keep the initial weights");
    assert_eq!(model.centres, vec![1, 2, 3], "centre ordering is still established");
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let (ds, split) = training_fixture();
    let cfg = BackboneConfig { kind: BackboneKind::Small, width: 8, input_size: 32 };
    let opts = TrainOpts { epochs: 1, lr: 1e-3, seed: 5, ..TrainOpts::default() };

    let mut a = build_classifier(3, &cfg, 5).unwrap();
    let la = train_classifier(&mut a, &ds, &split, &opts).unwrap();
    let mut b = build_classifier(3, &cfg, 5).unwrap();
    let lb = train_classifier(&mut b, &ds, &split, &opts).unwrap();

    assert_eq!(la, lb, "identical seeds must give identical loss traces");
    assert_eq!(a.weights_hash(), b.weights_hash(), "and identical weights");
}

#[test]
fn single_centre_training_set_is_rejected() {
    let config = SynthConfig::for_centres(2, 8, 4, 32);
    let ds = generate_synthetic(&config, 7).unwrap();
    let split = split_patient_level(&ds, 2, (0.8, 0.1, 0.1), 7).unwrap();
    let cfg = BackboneConfig { kind: BackboneKind::Small, width: 8, input_size: 32 };
    let mut model = build_classifier(2, &cfg, 7).unwrap();
    let err = train_classifier(&mut model, &ds, &split, &TrainOpts::default()).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)), "got {err:?}");
}

#[test]
fn logit_count_must_match_training_centres() {
    let (ds, split) = training_fixture();
    let cfg = BackboneConfig { kind: BackboneKind::Small, width: 8, input_size: 32 };
    let mut model = build_classifier(5, &cfg, 3).unwrap();
    let err = train_classifier(&mut model, &ds, &split, &TrainOpts::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err:?}");
}
