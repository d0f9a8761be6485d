use mbanet::checkpoint;
use mbanet::gradcheck::{check_gradients_with_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
use mbanet::network::{BackboneConfig, BranchKind, Network, NetworkConfig};
use mbanet::tensor::{Graph, Mode, Tensor};
use mbanet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy(num_ids: usize) -> NetworkConfig {
    NetworkConfig::toy(num_ids)
}

fn input(cfg: &NetworkConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let (h, w) = cfg.input_hw;
    Tensor::randn(vec![batch, 3, h, w], 1.0, &mut rng(seed))
}

#[test]
fn train_forward_shapes() {
    let cfg = toy(5);
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(input(&cfg, 2, 1), false).unwrap();
    let outs = net.forward(&mut g, x, Mode::Train, &mut rng(2)).unwrap();
    let kinds: Vec<_> = outs.iter().map(|o| o.kind).collect();
    assert_eq!(kinds, [BranchKind::Spatial, BranchKind::Global, BranchKind::Channel]);
    for o in &outs {
        assert_eq!(g.shape(o.logits), &[2, 5]);
        assert_eq!(g.shape(o.embedding), &[2, 64]);
        assert!(g.value(o.logits).is_finite());
    }
}

#[test]
fn wrong_input_size_is_rejected() {
    let cfg = toy(5);
    let mut net = Network::<f32>::new(cfg).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![1, 3, 16, 16]), false).unwrap();
    assert!(matches!(net.forward(&mut g, x, Mode::Eval, &mut rng(0)), Err(Error::Shape { .. })));
}

#[test]
fn tied_tails_with_zero_gamma_give_equal_branch_embeddings() {
    let cfg = NetworkConfig {
        share_tail: true,
        ..toy(4)
    };
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let x = g.leaf(input(&cfg, 3, 3), false).unwrap();
        let outs = net.forward(&mut g, x, mode, &mut rng(4)).unwrap();
        let global = g.value(outs[1].embedding).clone();
        for o in [&outs[0], &outs[2]] {
            let diff = g.value(o.embedding).max_abs_diff(&global);
            assert!(diff < 1e-6, "{:?} {mode:?}: {diff}", o.kind);
        }
    }
}

#[test]
fn untied_tails_have_independent_parameters() {
    let net = Network::<f32>::new(toy(4)).unwrap();
    let a = net.store.id("global.stage4.conv.weight").unwrap();
    let b = net.store.id("spatial.stage4.conv.weight").unwrap();
    let c = net.store.id("channel.stage4.conv.weight").unwrap();
    assert_ne!(net.store.value(a).data(), net.store.value(b).data());
    assert_ne!(net.store.value(b).data(), net.store.value(c).data());
    assert_eq!(net.arch.tails.len(), 3);
}

#[test]
fn one_step_moves_every_classifier() {
    let cfg = toy(5);
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(input(&cfg, 2, 5), false).unwrap();
    let outs = net.forward(&mut g, x, Mode::Train, &mut rng(6)).unwrap();
    let mut target = Tensor::zeros(vec![2, 5]);
    target.set(&[0, 1], 1.0);
    target.set(&[1, 3], 1.0);
    let losses: Vec<_> = outs.iter().map(|o| g.soft_cross_entropy(o.logits, &target).unwrap()).collect();
    let l01 = g.add(losses[0], losses[1]).unwrap();
    let loss = g.add(l01, losses[2]).unwrap();
    g.backward(loss).unwrap();
    net.store.zero_grad();
    g.accumulate_grads(&mut net.store);

    for kind in ["spatial", "global", "channel"] {
        let id = net.store.id(&format!("head_{kind}.classifier.weight")).unwrap();
        let before = net.store.value(id).clone();
        let grad = net.store.grad(id).clone();
        assert!(grad.data().iter().any(|&v| v != 0.0), "{kind} head got no gradient");
        let stepped: Vec<f32> = before.data().iter().zip(grad.data()).map(|(w, g)| w - 0.1 * g).collect();
        *net.store.value_mut(id) = Tensor::new(before.shape().to_vec(), stepped).unwrap();
        assert!(net.store.value(id).max_abs_diff(&before) > 0.0);
    }
}

#[test]
fn descriptor_is_three_embeddings_wide() {
    let cfg = toy(3);
    assert_eq!(cfg.descriptor_dim(), 192);
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    let d = net.embed(&input(&cfg, 2, 7)).unwrap();
    assert_eq!(d.shape(), &[2, 192]);
}

#[test]
fn paper_scale_descriptor_is_6144() {
    let cfg = NetworkConfig {
        backbone: BackboneConfig::paper_scale(),
        input_hw: (16, 16),
        num_ids: 4,
        ..Default::default()
    };
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    assert_eq!(net.descriptor_dim(), 6144);
    let d = net.embed(&input(&cfg, 1, 8)).unwrap();
    assert_eq!(d.shape(), &[1, 6144]);
}

#[test]
fn descriptor_order_is_spatial_global_channel() {
    let cfg = toy(3);
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    let x = input(&cfg, 2, 9);
    let d = net.embed(&x).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x, false).unwrap();
    let outs = net.forward(&mut g, xv, Mode::Eval, &mut rng(0)).unwrap();
    for (slot, o) in outs.iter().enumerate() {
        let e = g.value(o.embedding);
        for b in 0..2 {
            assert_eq!(&d.data()[b * 192 + slot * 64..b * 192 + (slot + 1) * 64], &e.data()[b * 64..(b + 1) * 64]);
        }
    }
}

#[test]
fn eval_is_bit_deterministic_and_train_is_reproducible() {
    let cfg = toy(3);
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    let x = input(&cfg, 2, 10);
    let a = net.embed(&x).unwrap();
    let b = net.embed(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let run = || {
        let mut net = Network::<f32>::new(cfg.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false).unwrap();
        let outs = net.forward(&mut g, xv, Mode::Train, &mut rng(11)).unwrap();
        g.value(outs[0].logits).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn last_stride_controls_final_extent() {
    let one = BackboneConfig::default();
    let two = BackboneConfig {
        last_stride: 2,
        ..Default::default()
    };
    let e1 = one.extents((64, 64)).unwrap();
    let e2 = two.extents((64, 64)).unwrap();
    assert_eq!(e1[3], (8, 8));
    assert_eq!(e2[3], (4, 4));
    assert_eq!(e1[2], (8, 8));
}

#[test]
fn split_point_attention_sees_configured_width() {
    let cfg = NetworkConfig {
        input_hw: (64, 64),
        ..toy(3)
    };
    let net = Network::<f32>::new(cfg).unwrap();
    let spatial = &net.arch.branches[0];
    match spatial.pre.as_ref().unwrap() {
        mbanet::network::Attention::Spatial(s) => {
            assert_eq!(s.cfg.channels, 64);
            assert_eq!((s.cfg.height, s.cfg.width), (8, 8));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_backbones_are_rejected() {
    for bb in [
        BackboneConfig {
            widths: vec![16, 32, 12, 64],
            ..Default::default()
        },
        BackboneConfig {
            last_stride: 3,
            ..Default::default()
        },
        BackboneConfig {
            split_point: 4,
            ..Default::default()
        },
        BackboneConfig {
            kernel_size: 2,
            ..Default::default()
        },
    ] {
        let cfg = NetworkConfig {
            backbone: bb,
            ..toy(3)
        };
        assert!(matches!(Network::<f32>::new(cfg), Err(Error::Config(_))));
    }
}

#[test]
fn small_network_gradients_match_finite_differences() {
    let cfg = NetworkConfig {
        backbone: BackboneConfig {
            widths: vec![4, 8, 8, 8],
            ..Default::default()
        },
        input_hw: (10, 10),
        num_ids: 3,
        reduced_dim: 4,
        dropout: 0.5,
        ..Default::default()
    };
    let mut net = Network::<f64>::new(cfg).unwrap();
    for id in net.attention_gammas() {
        net.store.value_mut(id).data_mut()[0] = 0.3;
    }
    let x = Tensor::randn(vec![2, 3, 10, 10], 1.0, &mut rng(12));
    let mut target = Tensor::zeros(vec![2, 3]);
    target.set(&[0, 0], 0.9);
    target.set(&[0, 2], 0.1);
    target.set(&[1, 1], 1.0);
    let arch = net.arch.clone();
    let report = check_gradients_with_params(
        |g, store, v| {
            let outs = arch.forward(g, store, v[0], Mode::Train, &mut rng(13))?;
            let mut loss = g.soft_cross_entropy(outs[0].logits, &target)?;
            for o in &outs[1..] {
                let l = g.soft_cross_entropy(o.logits, &target)?;
                loss = g.add(loss, l)?;
            }
            Ok(loss)
        },
        &[x],
        &net.store,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let cfg = toy(6);
    let mut net = Network::<f32>::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(input(&cfg, 2, 14), false).unwrap();
    net.forward(&mut g, x, Mode::Train, &mut rng(15)).unwrap();
    net.save(&path).unwrap();
    let loaded = Network::<f32>::load(&path).unwrap();
    assert_eq!(loaded.cfg, cfg);
    assert_eq!(loaded.store.len(), net.store.len());
    for ((_, a), (_, b)) in net.store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn truncated_checkpoint_fails_without_touching_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = Network::<f32>::new(toy(3)).unwrap();
    net.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = checkpoint::parse(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    let mut other = Network::<f32>::new(NetworkConfig { seed: 99, ..toy(3) }).unwrap();
    let snapshot = other.store.clone();
    let mut file = checkpoint::parse(&bytes).unwrap();
    file.entries.pop();
    assert!(file.load_into(&mut other.store).is_err());
    for ((_, a), (_, b)) in snapshot.iter().zip(other.store.iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
}

#[test]
fn renamed_tensor_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = Network::<f32>::new(toy(3)).unwrap();
    net.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let needle = b"s3.gamma";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    bytes[at..at + needle.len()].copy_from_slice(b"s9.gamma");
    let file = checkpoint::parse(&bytes).unwrap();
    let mut fresh = Network::<f32>::new(toy(3)).unwrap();
    let msg = file.load_into(&mut fresh.store).unwrap_err().to_string();
    assert!(msg.contains("unknown tensor s9.gamma"), "{msg}");
    assert!(msg.contains("missing tensors: s3.gamma"), "{msg}");
}

#[test]
fn shape_mismatch_is_reported_per_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Network::<f32>::new(toy(3)).unwrap().save(&path).unwrap();
    let file = checkpoint::read(&path).unwrap();
    let mut wider = Network::<f32>::new(toy(4)).unwrap();
    let msg = file.load_into(&mut wider.store).unwrap_err().to_string();
    for head in ["spatial", "global", "channel"] {
        assert!(msg.contains(&format!("head_{head}.classifier.weight: shape [64, 3], expected [64, 4]")), "{msg}");
    }
}

#[test]
fn backbone_import_accepts_only_stage_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.ckpt");
    let donor = Network::<f32>::new(NetworkConfig { seed: 5, ..toy(3) }).unwrap();
    let mut stages = mbanet::tensor::ParamStore::<f32>::new();
    for (_, p) in donor.store.iter() {
        if p.name.starts_with("backbone.") || p.name.contains(".stage") {
            stages.add(&p.name, p.value.clone(), p.group).unwrap();
        }
    }
    checkpoint::save(&path, "", &stages).unwrap();
    let mut net = Network::<f32>::new(toy(3)).unwrap();
    net.import_backbone(&path).unwrap();
    let id = net.store.id("backbone.stage1.conv.weight").unwrap();
    assert_eq!(net.store.value(id).data(), donor.store.value(id).data());
    let head = net.store.id("head_global.fc.weight").unwrap();
    assert_ne!(net.store.value(head).data(), donor.store.value(head).data());

    donor.save(&path).unwrap();
    assert!(net.import_backbone(&path).is_err());
}
