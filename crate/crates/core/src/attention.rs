//! Channel attention (CAM) and spatial attention with factorized relative
//! positional encodings (SAM-RPE).
//!
//! Both modules are residual: `out = gamma * attended + input`, with `gamma`
//! starting at exactly zero so a freshly built module is the identity.
//!
//! Layout conventions: feature maps are `[B, C, H, W]`; flattening the
//! spatial axes is row-major, so position `p = h * W + w`. Batch elements
//! are processed independently with shared parameters.

use crate::error::{Error, Result};
use crate::seed::named_rng;
use crate::tensor::{
    pointwise_conv, Activation, BatchNormState, Graph, Mode, ParamGroup, ParamId, ParamStore, Real, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// How relative shifts are assigned to key positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpeVariant {
    /// Re-indexing masks exactly as the height formula `r = i - h` reads,
    /// where `h` is the row and `i` the column of the key position (and
    /// `r = h - w` for the width mask).
    #[default]
    Paper,
    /// Conventional factorization: the height term uses the row offset
    /// between key and query, the width term the column offset.
    Rowwise,
}

impl std::str::FromStr for RpeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RpeVariant::Paper),
            "rowwise" => Ok(RpeVariant::Rowwise),
            other => Err(Error::Config(format!("unknown rpe_variant {other:?} (expected paper|rowwise)"))),
        }
    }
}

impl std::fmt::Display for RpeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RpeVariant::Paper => "paper",
            RpeVariant::Rowwise => "rowwise",
        })
    }
}

/// 0/1 matrix mapping each flattened position to the embedding row of its shift.
///
/// For the height axis the matrix is `HW x (2H-1)`; for width, `HW x (2W-1)`.
/// Column `r + (L-1)` stands for shift `r`, with `L` the extent of the axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReindexMask {
    pub axis: Axis,
    pub height: usize,
    pub width: usize,
    /// Per position, the column holding the single 1, or `None` for an all-zero row.
    columns: Vec<Option<usize>>,
}

impl ReindexMask {
    pub fn rows(&self) -> usize {
        self.height * self.width
    }

    pub fn cols(&self) -> usize {
        2 * self.axis_len() - 1
    }

    fn axis_len(&self) -> usize {
        match self.axis {
            Axis::Height => self.height,
            Axis::Width => self.width,
        }
    }

    pub fn column_of(&self, position: usize) -> Option<usize> {
        self.columns[position]
    }

    pub fn entry(&self, row: usize, col: usize) -> u8 {
        u8::from(self.columns[row] == Some(col))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let cols = self.cols();
        let mut t = Tensor::zeros(vec![self.rows(), cols]);
        for (p, c) in self.columns.iter().enumerate() {
            if let Some(c) = c {
                t.data_mut()[p * cols + c] = T::one();
            }
        }
        t
    }
}

/// Build the re-indexing mask for one axis of an `H x W` map.
///
/// Height: the row for position `(h, i)` has its 1 at shift `r = i - h`
/// when `|r| <= H - 1`. Width: the row for `(h, w)` has its 1 at
/// `r = h - w` when `|r| <= W - 1`. Rows whose shift falls outside the
/// embedding range are all-zero.
pub fn build_reindex_mask(axis: Axis, height: usize, width: usize) -> Result<ReindexMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("build_reindex_mask", format!("empty map {height}x{width}")));
    }
    let len = match axis {
        Axis::Height => height,
        Axis::Width => width,
    } as isize;
    let mut columns = Vec::with_capacity(height * width);
    for h in 0..height as isize {
        for w in 0..width as isize {
            let r = match axis {
                Axis::Height => w - h,
                Axis::Width => h - w,
            };
            columns.push((r.abs() < len).then(|| (r + len - 1) as usize));
        }
    }
    Ok(ReindexMask {
        axis,
        height,
        width,
        columns,
    })
}

/// Positional attention term `V (P Q)` with `P = mask * r_emb`.
///
/// `q` is `[(B,) d_k, HW]`, `v` is `[(B,) C, HW]`, `r_emb` is
/// `[(2L-1), d_k]`. Returns `[B, C, H, W]` (or `[C, H, W]` unbatched).
pub fn relative_position_term<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    v: Var,
    r_emb: Var,
    mask: &ReindexMask,
) -> Result<Var> {
    let (qs, vs, rs) = (g.shape(q).to_vec(), g.shape(v).to_vec(), g.shape(r_emb).to_vec());
    let hw = mask.rows();
    let batched = qs.len() == 3;
    let q_pos = *qs.last().unwrap_or(&0);
    let v_pos = *vs.last().unwrap_or(&0);
    let dk = qs[qs.len().saturating_sub(2)];
    if q_pos != hw || v_pos != hw || rs != [mask.cols(), dk] || vs.len() != qs.len() {
        return Err(Error::Shape {
            op: "relative_position_term",
            lhs: qs,
            rhs: rs,
        });
    }
    let mask_var = g.constant(mask.to_tensor())?;
    let p = g.matmul(mask_var, r_emb)?;
    let pq = g.matmul(p, q)?;
    let e = g.matmul(v, pq)?;
    let c = vs[vs.len() - 2];
    if batched {
        g.reshape(e, &[vs[0], c, mask.height, mask.width])
    } else {
        g.reshape(e, &[c, mask.height, mask.width])
    }
}

/// Conventional height/width relative term: logits `L[p, p'] = R[s(p, p')] . q_{p'}`
/// with `s` the row (height) or column (width) offset between key `p` and query `p'`.
pub fn relative_position_term_rowwise<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    v: Var,
    r_emb: Var,
    axis: Axis,
    height: usize,
    width: usize,
) -> Result<Var> {
    let hw = height * width;
    let len = match axis {
        Axis::Height => height,
        Axis::Width => width,
    };
    let coord = |p: usize| match axis {
        Axis::Height => p / width,
        Axis::Width => p % width,
    };
    let mut index = Vec::with_capacity(hw * hw);
    for key in 0..hw {
        for query in 0..hw {
            index.push(coord(key) + len - 1 - coord(query));
        }
    }
    let table = g.matmul(r_emb, q)?;
    let logits = g.gather_rows(table, &index, hw)?;
    let e = g.matmul(v, logits)?;
    let vs = g.shape(v).to_vec();
    let mut shape = vs[..vs.len() - 1].to_vec();
    shape.extend([height, width]);
    g.reshape(e, &shape)
}

/// Learnable state of a channel attention module.
#[derive(Debug, Clone)]
pub struct CamState {
    pub gamma: ParamId,
}

impl CamState {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(CamState {
            gamma: store.add(&format!("{prefix}.gamma"), Tensor::zeros(vec![1]), ParamGroup::New)?,
        })
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// `A_c` as `[B, C, C]` or `A_s` as `[B, HW, HW]`.
    pub attention: Var,
}

/// Channel attention: `A_c = softmax_rows(K Q^T)` on the raw reshaped input,
/// `out = gamma * (A_c V) + input`.
pub fn cam_forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, state: &CamState) -> Result<Var> {
    Ok(cam_forward_detailed(g, store, x, state)?.output)
}

pub fn cam_forward_detailed<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    state: &CamState,
) -> Result<AttentionOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("cam_forward", format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = g.reshape(x, &[b, c, h * w])?;
    let qt = g.transpose(flat)?;
    let logits = g.matmul(flat, qt)?;
    let attention = g.softmax_rows(logits)?;
    let attended = g.matmul(attention, flat)?;
    let attended = g.reshape(attended, &[b, c, h, w])?;
    let gamma = g.param(store, state.gamma)?;
    let scaled = g.scale_by(attended, gamma)?;
    let output = g.add(scaled, x)?;
    Ok(AttentionOutput { output, attention })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamRpeConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// When false the module is plain content attention, `gamma * V A_s + input`.
    pub use_rpe: bool,
    pub variant: RpeVariant,
}

impl SamRpeConfig {
    pub fn key_dim(&self) -> usize {
        self.channels / 8
    }
}

/// Learnable state of a spatial attention module with relative positional encodings.
#[derive(Debug, Clone)]
pub struct SamRpeState {
    pub cfg: SamRpeConfig,
    pub w_k: ParamId,
    pub w_q: ParamId,
    pub w_v: ParamId,
    pub bn_k: BatchNormState,
    pub bn_q: BatchNormState,
    pub bn_v: BatchNormState,
    pub r_h: ParamId,
    pub r_w: ParamId,
    pub bn_h: BatchNormState,
    pub bn_w: BatchNormState,
    pub gamma: ParamId,
    pub mask_h: ReindexMask,
    pub mask_w: ReindexMask,
}

impl SamRpeState {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: SamRpeConfig, seed: u64) -> Result<Self> {
        if cfg.channels < 8 {
            return Err(Error::invalid(
                "sam_rpe",
                format!("need at least 8 channels for d_k = C/8 >= 1, got {}", cfg.channels),
            ));
        }
        let (c, dk) = (cfg.channels, cfg.key_dim());
        let group = ParamGroup::New;
        let mut proj = |name: &str, out: usize| -> Result<ParamId> {
            let full = format!("{prefix}.{name}");
            let std = (2.0 / c as f64).sqrt();
            let init = Tensor::randn(vec![out, c], std, &mut named_rng(seed, &full));
            store.add(&full, init, group)
        };
        let w_k = proj("w_k", dk)?;
        let w_q = proj("w_q", dk)?;
        let w_v = proj("w_v", c)?;
        let bn_k = BatchNormState::new(store, &format!("{prefix}.bn_k"), dk, group)?;
        let bn_q = BatchNormState::new(store, &format!("{prefix}.bn_q"), dk, group)?;
        let bn_v = BatchNormState::new(store, &format!("{prefix}.bn_v"), c, group)?;
        let emb_std = 1.0 / (dk as f64).sqrt();
        let mut emb = |name: &str, rows: usize| -> Result<ParamId> {
            let full = format!("{prefix}.{name}");
            let init = Tensor::randn(vec![rows, dk], emb_std, &mut named_rng(seed, &full));
            store.add(&full, init, group)
        };
        let r_h = emb("r_h", 2 * cfg.height - 1)?;
        let r_w = emb("r_w", 2 * cfg.width - 1)?;
        let bn_h = BatchNormState::new(store, &format!("{prefix}.bn_h"), c, group)?;
        let bn_w = BatchNormState::new(store, &format!("{prefix}.bn_w"), c, group)?;
        let gamma = store.add(&format!("{prefix}.gamma"), Tensor::zeros(vec![1]), group)?;
        Ok(SamRpeState {
            cfg,
            w_k,
            w_q,
            w_v,
            bn_k,
            bn_q,
            bn_v,
            r_h,
            r_w,
            bn_h,
            bn_w,
            gamma,
            mask_h: build_reindex_mask(Axis::Height, cfg.height, cfg.width)?,
            mask_w: build_reindex_mask(Axis::Width, cfg.height, cfg.width)?,
        })
    }
}

/// Spatial attention: `A_s = softmax_rows(K^T Q)`,
/// `out = gamma * (V A_s + BN(E_H) + BN(E_W)) + input`.
pub fn sam_rpe_forward<T: Real>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    x: Var,
    state: &SamRpeState,
    mode: Mode,
) -> Result<Var> {
    Ok(sam_rpe_forward_detailed(g, store, x, state, mode)?.output)
}

pub fn sam_rpe_forward_detailed<T: Real>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    x: Var,
    state: &SamRpeState,
    mode: Mode,
) -> Result<AttentionOutput> {
    let cfg = &state.cfg;
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::Shape {
            op: "sam_rpe_forward",
            lhs: s,
            rhs: vec![cfg.channels, cfg.height, cfg.width],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (dk, hw) = (cfg.key_dim(), h * w);

    let project = |g: &mut Graph<T>, store: &mut ParamStore<T>, wid: ParamId, bn: &BatchNormState, out: usize| -> Result<Var> {
        let wv = g.param(store, wid)?;
        let y = pointwise_conv(g, store, x, wv, Some(bn), Activation::Relu, mode)?;
        g.reshape(y, &[b, out, hw])
    };
    let k = project(g, store, state.w_k, &state.bn_k, dk)?;
    let q = project(g, store, state.w_q, &state.bn_q, dk)?;
    let v = project(g, store, state.w_v, &state.bn_v, c)?;

    let kt = g.transpose(k)?;
    let logits = g.matmul(kt, q)?;
    let attention = g.softmax_rows(logits)?;
    let mut sum = g.matmul(v, attention)?;

    if cfg.use_rpe {
        for (axis, emb, mask, bn) in [
            (Axis::Height, state.r_h, &state.mask_h, &state.bn_h),
            (Axis::Width, state.r_w, &state.mask_w, &state.bn_w),
        ] {
            let r = g.param(store, emb)?;
            let e = match cfg.variant {
                RpeVariant::Paper => relative_position_term(g, q, v, r, mask)?,
                RpeVariant::Rowwise => relative_position_term_rowwise(g, q, v, r, axis, h, w)?,
            };
            let e = g.batch_norm(store, bn, e, mode)?;
            let e = g.reshape(e, &[b, c, hw])?;
            sum = g.add(sum, e)?;
        }
    }

    let sum = g.reshape(sum, &[b, c, h, w])?;
    let gamma = g.param(store, state.gamma)?;
    let scaled = g.scale_by(sum, gamma)?;
    let output = g.add(scaled, x)?;
    Ok(AttentionOutput { output, attention })
}
