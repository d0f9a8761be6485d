//! Optimization recipe: summed label-smoothed cross-entropy over the branch
//! classifiers, Adam with L2 decay, warmup plus step schedule, and a reduced
//! learning rate for backbone parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{load_batch, make_closed_split, synthetic_dataset, AugmentationConfig, RetrievalSplit, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RepetitionMetrics};
use crate::network::{Network, NetworkConfig};
use crate::seed::rng_from;
use crate::tensor::{Graph, Mode, ParamGroup, ParamStore, Real, Tensor, Var};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_acc,lr_new,lr_backbone,gamma_s3,gamma_s4,gamma_c3,gamma_c4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingVariant {
    /// True class `1 - eps + eps/N`, every other class `eps/N`.
    #[default]
    Uniform,
    /// True class `1 - eps`, every other class `eps/(N-1)`.
    OffTarget,
}

impl std::str::FromStr for SmoothingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SmoothingVariant::Uniform),
            "off_target" => Ok(SmoothingVariant::OffTarget),
            other => Err(Error::Config(format!("unknown smoothing variant {other:?} (expected uniform|off_target)"))),
        }
    }
}

impl std::fmt::Display for SmoothingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SmoothingVariant::Uniform => "uniform",
            SmoothingVariant::OffTarget => "off_target",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    /// `(epoch, lr)` pairs: from the start of `epoch` the new-layer rate is `lr`.
    pub decays: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub smoothing: SmoothingVariant,
    pub backbone_lr_ratio: f64,
    /// Interpolate the warmup per iteration instead of per epoch.
    pub per_iteration_warmup: bool,
    /// Write a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Keep every attention gamma at its current value.
    pub freeze_gamma: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            batch_size: 20,
            base_lr: 8e-4,
            warmup_start_lr: 8e-6,
            warmup_epochs: 10,
            decays: vec![(40, 4e-4), (60, 2e-4)],
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            smoothing: SmoothingVariant::Uniform,
            backbone_lr_ratio: 0.1,
            per_iteration_warmup: false,
            checkpoint_every: 10,
            freeze_gamma: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the synthetic toy dataset.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 20,
            base_lr: 1e-3,
            warmup_start_lr: 1e-5,
            warmup_epochs: 3,
            decays: vec![(20, 5e-4), (26, 2.5e-4)],
            backbone_lr_ratio: 1.0,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.decays.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad(format!("decay epochs must ascend: {:?}", self.decays));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        if self.base_lr < 0.0 || self.warmup_start_lr < 0.0 || self.weight_decay < 0.0 || self.backbone_lr_ratio < 0.0 {
            return bad("learning rates, weight decay and ratio must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub new: f64,
    pub backbone: f64,
}

fn rates(new: f64, cfg: &TrainConfig) -> LearningRates {
    LearningRates {
        new,
        backbone: new * cfg.backbone_lr_ratio,
    }
}

/// Per-epoch schedule: linear warmup over epochs `0..warmup_epochs` with both
/// endpoints hit, then `base_lr`, then the step decays.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> LearningRates {
    if epoch < cfg.warmup_epochs {
        return rates(warmup(epoch as f64, cfg), cfg);
    }
    let lr = cfg
        .decays
        .iter()
        .rev()
        .find(|(start, _)| epoch >= *start)
        .map_or(cfg.base_lr, |&(_, lr)| lr);
    rates(lr, cfg)
}

fn warmup(position: f64, cfg: &TrainConfig) -> f64 {
    let span = cfg.warmup_epochs.saturating_sub(1) as f64;
    if span == 0.0 || position >= span {
        return cfg.base_lr;
    }
    cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * (position / span)
}

/// Like [`lr_at`], but with the warmup advanced by `iteration / iterations` of an epoch.
pub fn lr_at_iteration(epoch: usize, iteration: usize, iterations: usize, cfg: &TrainConfig) -> LearningRates {
    if epoch < cfg.warmup_epochs {
        let position = epoch as f64 + iteration as f64 / iterations.max(1) as f64;
        return rates(warmup(position, cfg), cfg);
    }
    lr_at(epoch, cfg)
}

/// Target distributions for `labels` over `n` classes.
pub fn smoothed_targets<T: Real>(labels: &[usize], n: usize, eps: f64, variant: SmoothingVariant) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid("smoothed_cross_entropy", format!("label {bad} out of range for {n} classes")));
    }
    let (on, off) = match variant {
        SmoothingVariant::Uniform => (1.0 - eps + eps / n as f64, eps / n as f64),
        SmoothingVariant::OffTarget if n > 1 => (1.0 - eps, eps / (n - 1) as f64),
        SmoothingVariant::OffTarget => (1.0, 0.0),
    };
    let mut data = vec![T::lit(off); labels.len() * n];
    for (row, &l) in labels.iter().enumerate() {
        data[row * n + l] = T::lit(on);
    }
    Tensor::new(vec![labels.len(), n], data)
}

/// Mean over the batch of `-sum(target * log_softmax(logits))` with smoothed targets.
pub fn smoothed_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    eps: f64,
    variant: SmoothingVariant,
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "smoothed_cross_entropy",
            lhs: s,
            rhs: vec![labels.len()],
        });
    }
    let target = smoothed_targets(labels, s[1], eps, variant)?;
    g.soft_cross_entropy(logits, &target)
}

/// Unweighted sum of the per-branch smoothed losses.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &[usize],
    eps: f64,
    variant: SmoothingVariant,
) -> Result<Var> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| Error::invalid("total_loss", "no logits"))?;
    let mut loss = smoothed_cross_entropy(g, *first, labels, eps, variant)?;
    for &l in rest {
        let term = smoothed_cross_entropy(g, l, labels, eps, variant)?;
        loss = g.add(loss, term)?;
    }
    Ok(loss)
}

/// Adam with L2 regularization folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; if p.trainable { p.value.numel() } else { 0 }]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update from the gradients currently held in `store`.
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, lr: LearningRates, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable || p.frozen {
                continue;
            }
            let rate = match p.group {
                ParamGroup::Backbone => lr.backbone,
                ParamGroup::New => lr.new,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grads = p.grad.data().to_vec();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let wf = w.as_f64();
                let g = grads[k].as_f64() + weight_decay * wf;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let delta = rate * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                if delta != 0.0 {
                    *w = T::lit(wf - delta);
                }
            }
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Predicted class per row from the sum of the branch logits.
fn predictions(g: &Graph<f32>, logits: &[Var]) -> Vec<usize> {
    let s = g.shape(logits[0]);
    let (b, n) = (s[0], s[1]);
    let mut summed = vec![0.0f32; b * n];
    for &l in logits {
        for (acc, &v) in summed.iter_mut().zip(g.value(l).data()) {
            *acc += v;
        }
    }
    summed.chunks(n).map(argmax).collect()
}

fn labels_of(samples: &[Sample], idx: &[usize], classes: usize) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let l = samples[i].label;
            usize::try_from(l)
                .ok()
                .filter(|&l| l < classes)
                .ok_or_else(|| Error::Data(format!("{}: label {l} outside 0..{classes}", samples[i].source)))
        })
        .collect()
}

/// One optimization step on a prepared batch; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut Adam,
    x: Tensor<f32>,
    labels: &[usize],
    lr: LearningRates,
    cfg: &TrainConfig,
    dropout_stream: &[u64],
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let xv = g.leaf(x, false)?;
    let outs = net.forward(&mut g, xv, Mode::Train, &mut rng_from(dropout_stream))?;
    let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
    let loss = total_loss(&mut g, &logits, labels, cfg.label_smoothing, cfg.smoothing)?;
    let value = g.value(loss).item() as f64;
    let correct = predictions(&g, &logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    g.backward(loss)?;
    net.store.zero_grad();
    g.accumulate_grads(&mut net.store);
    adam.update(&mut net.store, lr, cfg.weight_decay);
    Ok((value, correct))
}

/// Eval-mode classification accuracy over `samples`.
pub fn classification_accuracy(
    net: &mut Network<f32>,
    samples: &[Sample],
    aug: &AugmentationConfig,
    batch: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let classes = net.cfg.num_ids;
    let all: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0;
    for idx in all.chunks(batch.max(1)) {
        let labels = labels_of(samples, idx, classes)?;
        let x = load_batch(samples, idx, aug, None)?;
        let mut g = Graph::new();
        let xv = g.leaf(x, false)?;
        let outs = net.forward(&mut g, xv, Mode::Eval, &mut rng_from(&[0]))?;
        let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
        correct += predictions(&g, &logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions made during the epoch.
    pub running_acc: f64,
    pub val_acc: f64,
    pub lr: (f64, f64),
    pub gammas: [Option<f64>; 4],
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let gamma = |g: Option<f64>| g.map_or_else(|| "nan".to_string(), |v| format!("{v:.6e}"));
        format!(
            "{},{:.6},{:.6},{:.6e},{:.6e},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_acc,
            self.lr.0,
            self.lr.1,
            gamma(self.gammas[0]),
            gamma(self.gammas[1]),
            gamma(self.gammas[2]),
            gamma(self.gammas[3]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub final_loss: f64,
    pub best_val_acc: f64,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(out, "{}", l.csv_row());
    }
    out
}

fn diagnose(err: Error, epoch: usize, batch: usize, net: &Network<f32>, lr: LearningRates) -> Error {
    match err {
        Error::NonFinite { op } => Error::Numeric(format!(
            "non-finite value in {op} at epoch {epoch}, batch {batch}; gammas [s3, s4, c3, c4] = {:?}; lr new {:.3e}, backbone {:.3e}",
            net.gammas(),
            lr.new,
            lr.backbone
        )),
        other => other,
    }
}

/// Full training run. With `out` set, writes `metrics.csv` after every epoch,
/// periodic `epoch_NNN.ckpt` files and `final.ckpt`.
pub fn train_loop(
    net: &mut Network<f32>,
    split: &RetrievalSplit,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    out: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    aug.validate()?;
    if split.num_classes() != net.cfg.num_ids {
        return Err(Error::Config(format!(
            "split has {} training identities but the classifiers have {} outputs",
            split.num_classes(),
            net.cfg.num_ids
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for id in net.attention_gammas() {
        net.store.set_frozen(id, cfg.freeze_gamma);
    }
    let classes = net.cfg.num_ids;
    let mut adam = Adam::new(&net.store);
    let mut summary = TrainSummary {
        epochs: Vec::with_capacity(cfg.epochs),
        final_loss: f64::NAN,
        best_val_acc: f64::NAN,
        best_epoch: None,
        checkpoints: Vec::new(),
    };
    let n = split.train.len();
    let iterations = n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(&[cfg.seed, epoch as u64, 0x5415]));
        let (mut loss_sum, mut correct) = (0.0, 0);
        let epoch_lr = lr_at(epoch, cfg);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let lr = if cfg.per_iteration_warmup {
                lr_at_iteration(epoch, b, iterations, cfg)
            } else {
                epoch_lr
            };
            let labels = labels_of(&split.train, idx, classes)?;
            let x = load_batch(&split.train, idx, aug, Some((cfg.seed, epoch as u64)))?;
            let stream = [cfg.seed, epoch as u64, b as u64, 0xD409];
            let (loss, hits) =
                train_step(net, &mut adam, x, &labels, lr, cfg, &stream).map_err(|e| diagnose(e, epoch, b, net, lr))?;
            if !loss.is_finite() {
                return Err(diagnose(Error::NonFinite { op: "loss" }, epoch, b, net, lr));
            }
            loss_sum += loss * idx.len() as f64;
            correct += hits;
        }
        let val_acc = classification_accuracy(net, &split.validation, aug, cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            running_acc: correct as f64 / n as f64,
            val_acc,
            lr: (epoch_lr.new, epoch_lr.backbone),
            gammas: net.gammas(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3}",
            log.train_loss,
            log.running_acc,
            log.val_acc
        );
        if val_acc.is_finite() && (summary.best_val_acc.is_nan() || val_acc > summary.best_val_acc) {
            summary.best_val_acc = val_acc;
            summary.best_epoch = Some(epoch);
        }
        summary.final_loss = log.train_loss;
        summary.epochs.push(log);
        if let Some(dir) = out {
            let path = dir.join("metrics.csv");
            fs::write(&path, metrics_csv(&summary.epochs)).map_err(|e| Error::io(&path, e))?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
                net.save(&path)?;
                summary.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out {
        let path = dir.join("metrics.csv");
        fs::write(&path, metrics_csv(&summary.epochs)).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("final.ckpt");
        net.save(&path)?;
        summary.checkpoints.push(path);
    }
    Ok(summary)
}

pub const TOY_IDENTITIES: usize = 10;
pub const TOY_IMAGES_PER_IDENTITY: usize = 8;
pub const TOY_IMAGE_SIZE: u32 = 40;

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub summary: TrainSummary,
    pub train_accuracy: f64,
    pub retrieval: RepetitionMetrics,
}

/// Trains the toy network on the synthetic identities and scores it on a
/// closed split of the same identities.
pub fn toy_run(seed: u64, cfg: &TrainConfig, out: Option<&Path>) -> Result<(Network<f32>, ToyOutcome)> {
    let ds = synthetic_dataset(TOY_IDENTITIES, TOY_IMAGES_PER_IDENTITY, TOY_IMAGE_SIZE, seed);
    let split = make_closed_split(&ds, seed, 0)?;
    let mut net = Network::<f32>::new(NetworkConfig {
        seed,
        ..NetworkConfig::toy(TOY_IDENTITIES)
    })?;
    let aug = AugmentationConfig::toy();
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let summary = train_loop(&mut net, &split, &cfg, &aug, out)?;
    let train_accuracy = classification_accuracy(&mut net, &split.train, &aug, cfg.batch_size)?;
    let retrieval = evaluate(&mut net, &split, &aug, cfg.batch_size)?;
    Ok((
        net,
        ToyOutcome {
            summary,
            train_accuracy,
            retrieval,
        },
    ))
}
