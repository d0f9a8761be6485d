use mbanet::data::{make_closed_split, synthetic_dataset, AugmentationConfig};
use mbanet::network::{Network, NetworkConfig};
use mbanet::tensor::{Graph, Tensor};
use mbanet::training::{
    lr_at, lr_at_iteration, metrics_csv, smoothed_cross_entropy, smoothed_targets, total_loss, toy_run, train_loop,
    train_step, Adam, LearningRates, SmoothingVariant, TrainConfig, METRICS_HEADER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_of(logits: &[f64], n: usize, labels: &[usize], eps: f64, variant: SmoothingVariant) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![labels.len(), n], logits).unwrap(), false).unwrap();
    let l = smoothed_cross_entropy(&mut g, x, labels, eps, variant).unwrap();
    g.value(l).item()
}

fn oracle_loss(logits: &[f64], n: usize, labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.chunks(n).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (j, v) in row.iter().enumerate() {
            let t = if j == label { 1.0 - eps + eps / n as f64 } else { eps / n as f64 };
            total -= t * (v - lse);
        }
    }
    total / labels.len() as f64
}

#[test]
fn confident_correct_logits_give_zero_loss() {
    let l = loss_of(&[1e4, 0.0, 0.0], 3, &[0], 0.0, SmoothingVariant::Uniform);
    assert_eq!(l, 0.0);
}

#[test]
fn zero_smoothing_is_plain_cross_entropy() {
    let logits = [0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
    let l = loss_of(&logits, 3, &[2, 0], 0.0, SmoothingVariant::Uniform);
    let plain: f64 = [(0, 2usize), (1, 0)]
        .iter()
        .map(|&(r, c)| {
            let row = &logits[r * 3..r * 3 + 3];
            -(row[c].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
        })
        .sum::<f64>()
        / 2.0;
    assert!((l - plain).abs() < 1e-12);
}

#[test]
fn two_classes_with_zero_logits_give_log_two() {
    for eps in [0.0, 0.1, 0.5] {
        let l = loss_of(&[0.0, 0.0], 2, &[1], eps, SmoothingVariant::Uniform);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn smoothing_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let n = rng.random_range(2..9);
        let b = rng.random_range(1..5);
        let logits: Vec<f64> = (0..n * b).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let l = loss_of(&logits, n, &labels, 0.1, SmoothingVariant::Uniform);
        assert!((l - oracle_loss(&logits, n, &labels, 0.1)).abs() < 1e-10);
    }
}

#[test]
fn target_rows_for_both_variants() {
    let u = smoothed_targets::<f64>(&[1], 4, 0.1, SmoothingVariant::Uniform).unwrap();
    assert!((u.data()[1] - 0.925).abs() < 1e-15);
    assert!((u.data()[0] - 0.025).abs() < 1e-15);
    let o = smoothed_targets::<f64>(&[1], 4, 0.1, SmoothingVariant::OffTarget).unwrap();
    assert!((o.data()[1] - 0.9).abs() < 1e-15);
    assert!((o.data()[3] - 0.1 / 3.0).abs() < 1e-15);
    for t in [u, o] {
        assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(smoothed_targets::<f64>(&[4], 4, 0.1, SmoothingVariant::Uniform).is_err());
    assert_eq!("off_target".parse::<SmoothingVariant>().unwrap(), SmoothingVariant::OffTarget);
    assert!("bogus".parse::<SmoothingVariant>().is_err());
}

#[test]
fn loss_is_at_least_target_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 5;
    let on: f64 = 1.0 - 0.1 + 0.02;
    let off: f64 = 0.02;
    let entropy = -(on * on.ln() + 4.0 * off * off.ln());
    for _ in 0..50 {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        assert!(loss_of(&logits, n, &[2], 0.1, SmoothingVariant::Uniform) >= entropy - 1e-12);
    }
}

fn total_of(branches: &[Vec<f64>], n: usize, labels: &[usize]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = branches
        .iter()
        .map(|l| g.leaf(Tensor::from_f64(vec![labels.len(), n], l).unwrap(), false).unwrap())
        .collect();
    let l = total_loss(&mut g, &vars, labels, 0.1, SmoothingVariant::Uniform).unwrap();
    g.value(l).item()
}

#[test]
fn total_loss_sums_branches() {
    let a = vec![0.2, 1.5, -0.3, 0.9, 0.0, 0.4];
    let b = vec![1.0, -1.0, 0.5, 0.2, 0.3, -0.7];
    let c = vec![-0.4, 0.8, 0.1, 0.6, -1.1, 0.2];
    let labels = [1, 0];
    let single = oracle_loss(&a, 3, &labels, 0.1);
    assert!((total_of(&[a.clone(), a.clone(), a.clone()], 3, &labels) - 3.0 * single).abs() < 1e-12);
    let expected: f64 = [&a, &b, &c].iter().map(|l| oracle_loss(l, 3, &labels, 0.1)).sum();
    assert!((total_of(&[a.clone(), b.clone(), c.clone()], 3, &labels) - expected).abs() < 1e-12);
    let permuted = total_of(&[c, a, b], 3, &labels);
    assert!((permuted - expected).abs() < 1e-12);
    let uniform = total_of(&[vec![0.0; 4], vec![0.0; 4]], 4, &[3]);
    assert!((uniform - 2.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn schedule_checkpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg).new, 8e-6);
    assert_eq!(lr_at(10, &cfg).new, 8e-4);
    assert_eq!(lr_at(39, &cfg).new, 8e-4);
    assert_eq!(lr_at(40, &cfg).new, 4e-4);
    assert_eq!(lr_at(59, &cfg).new, 4e-4);
    assert_eq!(lr_at(60, &cfg).new, 2e-4);
    assert_eq!(lr_at(69, &cfg).new, 2e-4);
    assert!((lr_at(9, &cfg).new - 8e-4).abs() < 1e-18);
    for e in 1..9 {
        assert!(lr_at(e, &cfg).new > lr_at(e - 1, &cfg).new);
    }
    for e in 0..70 {
        let r = lr_at(e, &cfg);
        assert!((r.backbone - 0.1 * r.new).abs() <= 1e-15 * r.new);
    }
}

#[test]
fn per_iteration_warmup_interpolates_within_epochs() {
    let cfg = TrainConfig::default();
    let start = lr_at_iteration(2, 0, 4, &cfg).new;
    let mid = lr_at_iteration(2, 2, 4, &cfg).new;
    assert_eq!(start, lr_at(2, &cfg).new);
    assert!(mid > start && mid < lr_at(3, &cfg).new);
    assert_eq!(lr_at_iteration(12, 3, 4, &cfg), lr_at(12, &cfg));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            label_smoothing: 1.5,
            ..Default::default()
        },
        TrainConfig {
            base_lr: -1.0,
            ..Default::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}

fn small_net(ids: usize, dropout: f64) -> Network<f32> {
    Network::new(NetworkConfig {
        dropout,
        ..NetworkConfig::toy(ids)
    })
    .unwrap()
}

fn batch(net: &Network<f32>, b: usize, seed: u64) -> Tensor<f32> {
    let (h, w) = net.cfg.input_hw;
    Tensor::randn(vec![b, 3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut net = small_net(4, 0.5);
    let before: Vec<Vec<f32>> = net.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.data().to_vec()).collect();
    let mut adam = Adam::new(&net.store);
    let cfg = TrainConfig {
        weight_decay: 5e-4,
        ..TrainConfig::default()
    };
    let zero = LearningRates { new: 0.0, backbone: 0.0 };
    let x = batch(&net, 4, 0);
    train_step(&mut net, &mut adam, x, &[0, 1, 2, 3], zero, &cfg, &[1]).unwrap();
    let after: Vec<Vec<f32>> = net.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut net = small_net(4, 0.0);
    let mut adam = Adam::new(&net.store);
    let cfg = TrainConfig {
        label_smoothing: 0.0,
        ..TrainConfig::default()
    };
    let lr = LearningRates {
        new: 1e-3,
        backbone: 1e-3,
    };
    let x = batch(&net, 8, 5);
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let mut losses = Vec::new();
    for step in 0..10 {
        let (loss, _) = train_step(&mut net, &mut adam, x.clone(), &labels, lr, &cfg, &[step]).unwrap();
        losses.push(loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn frozen_backbone_group_is_untouched() {
    let mut net = small_net(4, 0.0);
    let mut adam = Adam::new(&net.store);
    let backbone_before: Vec<Vec<f32>> = net
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with("backbone."))
        .map(|(_, p)| p.value.data().to_vec())
        .collect();
    let lr = LearningRates {
        new: 1e-3,
        backbone: 0.0,
    };
    let x = batch(&net, 4, 2);
    train_step(&mut net, &mut adam, x, &[0, 1, 2, 3], lr, &TrainConfig::default(), &[0]).unwrap();
    let backbone_after: Vec<Vec<f32>> = net
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with("backbone."))
        .map(|(_, p)| p.value.data().to_vec())
        .collect();
    assert_eq!(backbone_before, backbone_after);
}

fn short_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        checkpoint_every: 1,
        ..TrainConfig::toy()
    }
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic_dataset(3, 4, 40, 0);
    let split = make_closed_split(&ds, 0, 0).unwrap();
    let mut net = small_net(3, 0.5);
    let summary = train_loop(&mut net, &split, &short_config(2), &AugmentationConfig::toy(), Some(dir.path())).unwrap();
    assert_eq!(summary.epochs.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&summary.epochs));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 2);
    assert!(dir.path().join("epoch_001.ckpt").exists());
    assert!(dir.path().join("final.ckpt").exists());
    let mut reloaded = Network::<f32>::load(&dir.path().join("final.ckpt")).unwrap();
    let x = batch(&net, 2, 9);
    assert_eq!(net.embed(&x).unwrap().data(), reloaded.embed(&x).unwrap().data());
}

#[test]
fn class_count_mismatch_is_rejected() {
    let ds = synthetic_dataset(3, 4, 40, 0);
    let split = make_closed_split(&ds, 0, 0).unwrap();
    let mut net = small_net(5, 0.5);
    assert!(train_loop(&mut net, &split, &short_config(1), &AugmentationConfig::toy(), None).is_err());
}

#[test]
fn frozen_gamma_stays_zero() {
    let ds = synthetic_dataset(3, 4, 40, 0);
    let split = make_closed_split(&ds, 0, 0).unwrap();
    let mut net = small_net(3, 0.5);
    let cfg = TrainConfig {
        freeze_gamma: true,
        ..short_config(2)
    };
    let summary = train_loop(&mut net, &split, &cfg, &AugmentationConfig::toy(), None).unwrap();
    for log in &summary.epochs {
        assert_eq!(log.gammas, [Some(0.0); 4]);
    }
}

#[test]
fn toy_runs_are_reproducible() {
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::toy()
    };
    let (_, a) = toy_run(4, &cfg, None).unwrap();
    let (_, b) = toy_run(4, &cfg, None).unwrap();
    assert!((a.summary.final_loss - b.summary.final_loss).abs() < 1e-6);
    assert_eq!(a.summary.epochs, b.summary.epochs);
    let (_, c) = toy_run(5, &cfg, None).unwrap();
    assert_ne!(a.summary.final_loss, c.summary.final_loss);
}
