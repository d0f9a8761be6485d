//! Three-branch network: shared backbone stages, then global, spatial and
//! channel branches, each with its own copy of the remaining stages and a
//! classifier head.
//!
//! ```text
//! x -> stages[..split] -+-> S3 -> tail_s -> S4 -> GAP -> s
//!                       +--------> tail_g -------> GAP -> g
//!                       +-> C3 -> tail_c -> C4 -> GAP -> c
//! ```
//!
//! The retrieval descriptor is `[s, g, c]` taken straight after pooling; the
//! heads only feed the classifiers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{cam_forward, sam_rpe_forward, CamState, RpeVariant, SamRpeConfig, SamRpeState};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::seed::named_rng;
use crate::tensor::{BatchNormState, Graph, Mode, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Small conv stack trained from scratch.
    Toy,
    /// Same stage layout, weights imported from a named-tensor file.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    /// Stride of the final stage; every earlier stage downsamples by 2.
    pub last_stride: usize,
    /// Number of shared stages before the branches fork.
    pub split_point: usize,
    pub kernel_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Toy,
            widths: vec![16, 32, 64, 64],
            last_stride: 1,
            split_point: 3,
            kernel_size: 3,
        }
    }
}

impl BackboneConfig {
    /// ResNet50 stage widths, so the branches end in 2048 channels.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            widths: vec![256, 512, 1024, 2048],
            kernel_size: 1,
            ..Default::default()
        }
    }

    pub fn stride(&self, stage: usize) -> usize {
        if stage + 1 == self.widths.len() {
            self.last_stride
        } else {
            2
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn split_channels(&self) -> usize {
        self.widths[self.split_point - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("backbone: {msg}")));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("invalid stage widths {:?}", self.widths));
        }
        if !(1..=2).contains(&self.last_stride) {
            return bad(format!("last_stride must be 1 or 2, got {}", self.last_stride));
        }
        if self.split_point == 0 || self.split_point >= self.widths.len() {
            return bad(format!(
                "split_point {} must lie in 1..{}",
                self.split_point,
                self.widths.len()
            ));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        for c in [self.split_channels(), self.embedding_dim()] {
            if c < 8 || c % 8 != 0 {
                return bad(format!("attention widths must be multiples of 8, got {c}"));
            }
        }
        Ok(())
    }

    /// Spatial extent after each stage for an input of `hw`.
    pub fn extents(&self, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let pad = self.kernel_size / 2;
        let mut cur = hw;
        let mut out = Vec::with_capacity(self.widths.len());
        for stage in 0..self.widths.len() {
            let s = self.stride(stage);
            let step = |n: usize| {
                (n + 2 * pad)
                    .checked_sub(self.kernel_size)
                    .map(|v| v / s + 1)
                    .ok_or_else(|| Error::Config(format!("input {hw:?} too small for the backbone")))
            };
            cur = (step(cur.0)?, step(cur.1)?);
            out.push(cur);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSet {
    pub spatial: bool,
    pub channel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Spatial,
    Global,
    Channel,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Spatial => "spatial",
            BranchKind::Global => "global",
            BranchKind::Channel => "channel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub input_hw: (usize, usize),
    pub num_ids: usize,
    pub reduced_dim: usize,
    pub lrelu_slope: f64,
    pub dropout: f64,
    pub branches: BranchSet,
    pub use_rpe: bool,
    pub rpe_variant: RpeVariant,
    /// All branches run the global branch's tail stages.
    pub share_tail: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: BackboneConfig::default(),
            input_hw: (324, 324),
            num_ids: 72,
            reduced_dim: 512,
            lrelu_slope: 0.1,
            dropout: 0.5,
            branches: BranchSet {
                spatial: true,
                channel: true,
            },
            use_rpe: true,
            rpe_variant: RpeVariant::Paper,
            share_tail: false,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn toy(num_ids: usize) -> Self {
        NetworkConfig {
            input_hw: (32, 32),
            num_ids,
            reduced_dim: 64,
            ..Default::default()
        }
    }

    /// Active branches in descriptor order.
    pub fn branch_kinds(&self) -> Vec<BranchKind> {
        let mut kinds = Vec::with_capacity(3);
        if self.branches.spatial {
            kinds.push(BranchKind::Spatial);
        }
        kinds.push(BranchKind::Global);
        if self.branches.channel {
            kinds.push(BranchKind::Channel);
        }
        kinds
    }

    pub fn descriptor_dim(&self) -> usize {
        self.branch_kinds().len() * self.backbone.embedding_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone.extents(self.input_hw)?;
        if self.num_ids == 0 || self.reduced_dim == 0 {
            return Err(Error::Config("num_ids and reduced_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub weight: ParamId,
    pub bn: BatchNormState,
    pub stride: usize,
    pub pad: usize,
}

impl ConvStage {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let name = format!("{prefix}.conv.weight");
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let init = Tensor::randn(vec![cout, cin, kernel, kernel], std, &mut named_rng(seed, &name));
        Ok(ConvStage {
            weight: store.add(&name, init, ParamGroup::Backbone)?,
            bn: BatchNormState::new(store, &format!("{prefix}.bn"), cout, ParamGroup::Backbone)?,
            stride,
            pad: kernel / 2,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        let y = g.batch_norm(store, &self.bn, y, mode)?;
        g.relu(y)
    }
}

/// FC -> BN -> leaky ReLU -> dropout -> classifier.
#[derive(Debug, Clone)]
pub struct BranchHead {
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub bn: BatchNormState,
    pub slope: f64,
    pub dropout: f64,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
}

impl BranchHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &NetworkConfig) -> Result<Self> {
        let (cin, red, n) = (cfg.backbone.embedding_dim(), cfg.reduced_dim, cfg.num_ids);
        let group = ParamGroup::New;
        let mut dense = |name: &str, fan_in: usize, fan_out: usize, gain: f64| -> Result<(ParamId, ParamId)> {
            let wname = format!("{prefix}.{name}.weight");
            let init = Tensor::randn(vec![fan_in, fan_out], (gain / fan_in as f64).sqrt(), &mut named_rng(cfg.seed, &wname));
            let w = store.add(&wname, init, group)?;
            let b = store.add(&format!("{prefix}.{name}.bias"), Tensor::zeros(vec![fan_out]), group)?;
            Ok((w, b))
        };
        let (fc_weight, fc_bias) = dense("fc", cin, red, 2.0)?;
        let (cls_weight, cls_bias) = dense("classifier", red, n, 1.0)?;
        Ok(BranchHead {
            fc_weight,
            fc_bias,
            bn: BatchNormState::new(store, &format!("{prefix}.bn"), red, group)?,
            slope: cfg.lrelu_slope,
            dropout: cfg.dropout,
            cls_weight,
            cls_bias,
        })
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        embedding: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let w = g.param(store, self.fc_weight)?;
        let b = g.param(store, self.fc_bias)?;
        let y = g.matmul(embedding, w)?;
        let y = g.add_bias(y, b)?;
        let y = g.batch_norm(store, &self.bn, y, mode)?;
        let y = g.leaky_relu(y, self.slope)?;
        let y = g.dropout(y, self.dropout, mode, rng)?;
        let w = g.param(store, self.cls_weight)?;
        let b = g.param(store, self.cls_bias)?;
        let y = g.matmul(y, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub enum Attention {
    Spatial(Box<SamRpeState>),
    Channel(CamState),
}

impl Attention {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Attention::Spatial(s) => sam_rpe_forward(g, store, x, s, mode),
            Attention::Channel(c) => cam_forward(g, store, x, c),
        }
    }

    pub fn gamma(&self) -> ParamId {
        match self {
            Attention::Spatial(s) => s.gamma,
            Attention::Channel(c) => c.gamma,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub kind: BranchKind,
    /// Index into [`Architecture::tails`].
    pub tail: usize,
    pub pre: Option<Attention>,
    pub post: Option<Attention>,
    pub head: BranchHead,
}

/// Parameter handles and wiring; the values live in the paired [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub shared: Vec<ConvStage>,
    pub tails: Vec<Vec<ConvStage>>,
    pub branches: Vec<Branch>,
}

impl Architecture {
    /// Forward pass with parameters read from `store`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<BranchOutput>> {
        let mut feat = x;
        for stage in &self.shared {
            feat = stage.forward(g, store, feat, mode)?;
        }
        let mut outputs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut y = feat;
            if let Some(a) = &branch.pre {
                y = a.forward(g, store, y, mode)?;
            }
            for stage in &self.tails[branch.tail] {
                y = stage.forward(g, store, y, mode)?;
            }
            if let Some(a) = &branch.post {
                y = a.forward(g, store, y, mode)?;
            }
            let embedding = g.global_average_pool(y)?;
            let logits = branch.head.forward(g, store, embedding, mode, rng)?;
            outputs.push(BranchOutput {
                kind: branch.kind,
                embedding,
                logits,
            });
        }
        Ok(outputs)
    }
}

pub struct BranchOutput {
    pub kind: BranchKind,
    pub embedding: Var,
    pub logits: Var,
}

pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let bb = &cfg.backbone;
        let extents = bb.extents(cfg.input_hw)?;
        let mut store = ParamStore::new();
        let k = bb.kernel_size;

        let mut shared = Vec::with_capacity(bb.split_point);
        let mut cin = 3;
        for stage in 0..bb.split_point {
            let prefix = format!("backbone.stage{}", stage + 1);
            shared.push(ConvStage::new(&mut store, &prefix, cin, bb.widths[stage], k, bb.stride(stage), cfg.seed)?);
            cin = bb.widths[stage];
        }

        let kinds = cfg.branch_kinds();
        let tail_owners: Vec<BranchKind> = if cfg.share_tail { vec![BranchKind::Global] } else { kinds.clone() };
        let mut tails = Vec::with_capacity(tail_owners.len());
        for owner in &tail_owners {
            let mut stages = Vec::new();
            let mut cin = bb.split_channels();
            for stage in bb.split_point..bb.widths.len() {
                let prefix = format!("{}.stage{}", owner.name(), stage + 1);
                stages.push(ConvStage::new(&mut store, &prefix, cin, bb.widths[stage], k, bb.stride(stage), cfg.seed)?);
                cin = bb.widths[stage];
            }
            tails.push(stages);
        }

        let split_hw = extents[bb.split_point - 1];
        let last_hw = *extents.last().unwrap_or(&split_hw);
        let sam = |store: &mut ParamStore<T>, name: &str, c: usize, hw: (usize, usize)| -> Result<Attention> {
            let sc = SamRpeConfig {
                channels: c,
                height: hw.0,
                width: hw.1,
                use_rpe: cfg.use_rpe,
                variant: cfg.rpe_variant,
            };
            Ok(Attention::Spatial(Box::new(SamRpeState::new(store, name, sc, cfg.seed)?)))
        };

        let mut branches = Vec::with_capacity(kinds.len());
        for kind in kinds {
            let tail = if cfg.share_tail {
                0
            } else {
                tail_owners.iter().position(|&o| o == kind).unwrap_or(0)
            };
            let (pre, post) = match kind {
                BranchKind::Global => (None, None),
                BranchKind::Spatial => (
                    Some(sam(&mut store, "s3", bb.split_channels(), split_hw)?),
                    Some(sam(&mut store, "s4", bb.embedding_dim(), last_hw)?),
                ),
                BranchKind::Channel => (
                    Some(Attention::Channel(CamState::new(&mut store, "c3")?)),
                    Some(Attention::Channel(CamState::new(&mut store, "c4")?)),
                ),
            };
            let head = BranchHead::new(&mut store, &format!("head_{}", kind.name()), &cfg)?;
            branches.push(Branch {
                kind,
                tail,
                pre,
                post,
                head,
            });
        }

        Ok(Network {
            cfg,
            arch: Architecture { shared, tails, branches },
            store,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.cfg.descriptor_dim()
    }

    /// Per-branch pooled embeddings and classifier logits, in `[s, g, c]` order.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<BranchOutput>> {
        let xs = g.shape(x).to_vec();
        let (h, w) = self.cfg.input_hw;
        if xs.len() != 4 || xs[1] != 3 || xs[2] != h || xs[3] != w {
            return Err(Error::Shape {
                op: "network",
                lhs: xs,
                rhs: vec![0, 3, h, w],
            });
        }
        self.arch.forward(g, &mut self.store, x, mode, rng)
    }

    /// Eval-mode descriptor `[s, g, c]` for a `[B,3,H,W]` batch.
    pub fn embed(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false)?;
        let outs = self.forward(&mut g, xv, Mode::Eval, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let embeddings: Vec<Var> = outs.iter().map(|o| o.embedding).collect();
        let d = g.concat(&embeddings, 1)?;
        Ok(g.value(d).clone())
    }

    /// Attention gammas as `[s3, s4, c3, c4]`; absent modules are `None`.
    pub fn gammas(&self) -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for b in &self.arch.branches {
            let base = match b.kind {
                BranchKind::Spatial => 0,
                BranchKind::Channel => 2,
                BranchKind::Global => continue,
            };
            for (i, a) in [&b.pre, &b.post].into_iter().enumerate() {
                if let Some(a) = a {
                    out[base + i] = Some(self.store.value(a.gamma()).data()[0].as_f64());
                }
            }
        }
        out
    }

    pub fn attention_gammas(&self) -> Vec<ParamId> {
        self.arch
            .branches
            .iter()
            .flat_map(|b| [&b.pre, &b.post])
            .flatten()
            .map(Attention::gamma)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, &meta, &self.store)
    }

    /// Rebuild a network from the configuration stored in a checkpoint, then load its tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let file = checkpoint::read(path)?;
        let cfg: NetworkConfig =
            serde_json::from_str(&file.meta).map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
        let mut net = Network::new(cfg)?;
        file.load_into(&mut net.store)?;
        Ok(net)
    }

    /// Load backbone stage tensors exported elsewhere; any other names in the file are rejected.
    pub fn import_backbone(&mut self, path: &Path) -> Result<()> {
        let file = checkpoint::read(path)?;
        file.load_subset(&mut self.store, |name| {
            name.starts_with("backbone.") || name.contains(".stage")
        })
    }
}
