use super::*;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 12,
        stem_kernel: 3,
        stem_stride: 1,
        widths: vec![3, 4],
        blocks_per_stage: 1,
        embedding_dim: 5,
        num_classes: 4,
    }
}

fn random_input(n: usize, s: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, 1, s, s), || rng.random_range(-1.0..1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Randomises batch-norm affine parameters and running statistics so eval
/// mode is not an identity map.
fn perturb_norms(net: &mut Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut().entries_mut() {
        match p.kind {
            ParamKind::NormScale => p.value.mapv_inplace(|_| rng.random_range(0.5..1.5)),
            ParamKind::NormShift => p.value.mapv_inplace(|_| rng.random_range(-0.2..0.2)),
            ParamKind::Buffer if p.name.ends_with("running_mean") => {
                p.value.mapv_inplace(|_| rng.random_range(-0.1..0.1))
            }
            ParamKind::Buffer => p.value.mapv_inplace(|_| rng.random_range(0.5..2.0)),
            _ => {}
        }
    }
}

#[test]
fn softmax_normalised_and_eval_deterministic() {
    let net = Network::<f64>::new(tiny_config(), 3).unwrap();
    let x = random_input(3, 12, 1);
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    for row in a.probabilities().rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.embedding, b.embedding);
    assert_eq!(a.feature_maps().unwrap(), b.feature_maps().unwrap());
}

#[test]
fn wrong_input_shape_rejected() {
    let net = Network::<f64>::new(tiny_config(), 3).unwrap();
    let x = random_input(1, 10, 1);
    assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn unretained_tape_has_no_gradient() {
    let net = Network::<f64>::new(tiny_config(), 3).unwrap();
    let tape = net.infer(&random_input(1, 12, 1)).unwrap();
    assert!(matches!(net.grad_wrt_activation(&tape, 0), Err(Error::State(_))));
    assert!(matches!(net.backward(&tape, &tape.logits), Err(Error::State(_))));
}

#[test]
fn mean_head_has_constant_gradient() {
    let mut net = Network::<f64>::new(tiny_config(), 3).unwrap();
    let k = net.config().feature_channels();
    let store = net.params_mut();
    let ew = store.by_name_mut("embed.weight").unwrap();
    ew.fill(0.0);
    for c in 0..k {
        ew[[0, c]] = 1.0 / k as f64;
    }
    store.by_name_mut("embed.bias").unwrap().fill(0.0);
    let hw = store.by_name_mut("head.weight").unwrap();
    hw.fill(0.0);
    hw[[2, 0]] = 1.0;
    store.by_name_mut("head.bias").unwrap().fill(0.0);

    let tape = net.forward(&random_input(1, 12, 9), Mode::Eval).unwrap();
    let a = tape.feature_maps().unwrap();
    assert!((tape.logits[[0, 2]] - a.mean().unwrap()).abs() < 1e-12);
    let g = net.grad_wrt_activation(&tape, 2).unwrap();
    let expected = 1.0 / a.len() as f64;
    assert!(g.iter().all(|&v| (v - expected).abs() < 1e-15));
}

#[test]
fn zero_head_row_gives_zero_gradient() {
    let mut net = Network::<f64>::new(tiny_config(), 4).unwrap();
    net.params_mut().by_name_mut("head.weight").unwrap().index_axis_mut(ndarray::Axis(0), 1).fill(0.0);
    let tape = net.forward(&random_input(2, 12, 2), Mode::Eval).unwrap();
    let g = net.grad_wrt_activation(&tape, 1).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    assert!(net.grad_wrt_activation(&tape, 4).is_err());
}

#[test]
fn logits_affine_in_embedding() {
    let net = Network::<f64>::new(tiny_config(), 5).unwrap();
    let tape = net.forward(&random_input(2, 12, 3), Mode::Eval).unwrap();
    let w = net.params().value(net.params().find("head.weight").unwrap());
    let b = net.params().value(net.params().find("head.bias").unwrap());
    let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    for n in 0..2 {
        let manual = w2.dot(&tape.embedding.row(n)) + b;
        for c in 0..4 {
            assert!((manual[c] - tape.logits[[n, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn activation_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let mut net = Network::<f64>::new(tiny_config(), seed).unwrap();
        perturb_norms(&mut net, seed + 100);
        let tape = net.forward(&random_input(1, 12, seed + 7), Mode::Eval).unwrap();
        let class = (seed % 4) as usize;
        let g = net.grad_wrt_activation(&tape, class).unwrap();
        let a = tape.feature_maps().unwrap();
        let h = 1e-3;
        for (idx, &gv) in g.indexed_iter().step_by(3) {
            let mut plus = a.clone();
            plus[idx] += h;
            let mut minus = a.clone();
            minus[idx] -= h;
            let fd = (net.logits_from_features(&plus)[[0, class]]
                - net.logits_from_features(&minus)[[0, class]])
                / (2.0 * h);
            assert!(rel_err(gv, fd) < 1e-3, "{idx:?}: {gv} vs {fd}");
        }
    }
}

#[test]
fn parameter_and_input_gradients_match_finite_differences() {
    for (seed, mode) in [(11, Mode::Train), (12, Mode::Eval)] {
        let mut net = Network::<f64>::new(tiny_config(), seed).unwrap();
        perturb_norms(&mut net, seed);
        let x = random_input(3, 12, seed);
        let labels = [0usize, 3, 1];
        let (_, _, grads) = net.loss_and_grads(&x, &labels, mode).unwrap();
        let loss_at = |n: &Network<f64>, x: &Array4<f64>| {
            let t = n.forward(x, mode).unwrap();
            cross_entropy(&t.logits, &labels).unwrap().0
        };
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pid in 0..net.params().len() {
            if !net.params().entries()[pid].kind.trainable() {
                continue;
            }
            let len = net.params().value(pid).len();
            for _ in 0..3 {
                let j = rng.random_range(0..len);
                let orig = net.params().value(pid).as_slice_memory_order().unwrap()[j];
                net.params_mut().value_mut(pid).as_slice_memory_order_mut().unwrap()[j] = orig + h;
                let lp = loss_at(&net, &x);
                net.params_mut().value_mut(pid).as_slice_memory_order_mut().unwrap()[j] = orig - h;
                let lm = loss_at(&net, &x);
                net.params_mut().value_mut(pid).as_slice_memory_order_mut().unwrap()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(pid).as_slice_memory_order().unwrap()[j];
                let name = &net.params().entries()[pid].name;
                assert!(rel_err(an, fd) < 1e-3, "{name}[{j}] {mode:?}: {an} vs {fd}");
            }
        }
        let tape = net.forward(&x, mode).unwrap();
        let (_, dlogits) = cross_entropy(&tape.logits, &labels).unwrap();
        let (_, dx) = net.backward(&tape, &dlogits).unwrap();
        for _ in 0..10 {
            let idx = (
                rng.random_range(0..3),
                0,
                rng.random_range(0..12),
                rng.random_range(0..12),
            );
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_at(&net, &xp) - loss_at(&net, &xm)) / (2.0 * h);
            assert!(rel_err(dx[idx], fd) < 1e-3, "input {idx:?}: {} vs {fd}", dx[idx]);
        }
    }
}

#[test]
fn running_stats_move_toward_batch_statistics() {
    let mut net = Network::<f64>::new(tiny_config(), 1).unwrap();
    let x = random_input(4, 12, 5) + 3.0;
    let tape = net.forward(&x, Mode::Train).unwrap();
    assert!(!tape.bn_stats.is_empty());
    net.update_running_stats(&tape.bn_stats);
    let stem_mean = net.params().value(net.params().find("stem.bn.running_mean").unwrap());
    assert!(stem_mean.iter().any(|&m| m != 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut net = Network::<f32>::new(tiny_config(), 8).unwrap();
    net.norm = InputNorm { mean: 0.4, std: 0.2 };
    let meta = CheckpointMeta {
        epoch: 3,
        val_accuracy: 0.75,
        val_loss: 0.6,
        grid: Some("6x7".into()),
        seed: Some(8),
        tool_version: crate::VERSION.into(),
    };
    net.save_checkpoint(&path, &meta).unwrap();
    let (back, meta2) = Network::<f32>::load_checkpoint(&path, Some(&tiny_config())).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(back.norm, net.norm);
    for (a, b) in net.params().entries().iter().zip(back.params().entries()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let probe = random_input(1, 12, 4).mapv(|v| v as f32);
    assert_eq!(net.infer(&probe).unwrap().logits, back.infer(&probe).unwrap().logits);
}

#[test]
fn checkpoint_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut three = tiny_config();
    three.num_classes = 3;
    let net = Network::<f32>::new(three, 1).unwrap();
    net.save_checkpoint(&path, &CheckpointMeta::default()).unwrap();
    assert!(matches!(
        Network::<f32>::load_checkpoint(&path, Some(&tiny_config())),
        Err(Error::Checkpoint(_))
    ));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 9;
    assert!(matches!(
        Network::<f32>::from_checkpoint_bytes(&bytes, None),
        Err(Error::Checkpoint(_))
    ));
    bytes[0] = b'X';
    assert!(Network::<f32>::from_checkpoint_bytes(&bytes, None).is_err());
    assert!(matches!(
        Network::<f32>::load_checkpoint(&dir.path().join("missing.bin"), None),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn default_config_shapes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.embedding_dim, 128);
    assert_eq!(cfg.num_classes, 4);
    assert_eq!(cfg.final_spatial(), 14);
    let net = Network::<f32>::new(cfg, 0).unwrap();
    let tape = net.infer(&Array4::zeros((1, 1, 224, 224))).unwrap();
    assert_eq!(tape.embedding.dim(), (1, 128));
    assert_eq!(tape.logits.dim(), (1, 4));
}
