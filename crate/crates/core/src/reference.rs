//! Naive loop implementations used as independent oracles.
//!
//! Nothing here touches the autodiff graph or the matrix kernels: every
//! quantity is an explicit sum over indices on `f64` vectors. The self-check
//! command and the test suites compare the optimized paths against these.

use crate::attention::{Axis, RpeVariant, SamRpeState};
use crate::tensor::{BatchNormState, Mode, ParamStore, Real};

/// Re-indexing mask evaluated directly from its definition as a triple loop
/// over (own index, other index, shift). Rows are flattened positions `h * W + w`.
pub fn reindex_mask(axis: Axis, height: usize, width: usize) -> Vec<Vec<u8>> {
    let (own_len, other_len) = match axis {
        Axis::Height => (height, width),
        Axis::Width => (width, height),
    };
    let span = 2 * own_len - 1;
    let mut mask = vec![vec![0u8; span]; height * width];
    for own in 0..own_len as isize {
        for other in 0..other_len as isize {
            for r in -(own_len as isize - 1)..=(own_len as isize - 1) {
                if other - own == r {
                    let (h, w) = match axis {
                        Axis::Height => (own, other),
                        Axis::Width => (other, own),
                    };
                    let row = h as usize * width + w as usize;
                    mask[row][(r + own_len as isize - 1) as usize] = 1;
                }
            }
        }
    }
    mask
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Channel attention on one `C x H x W` sample; returns (output, A_c).
pub fn cam(x: &[f64], c: usize, hw: usize, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut attn = vec![0.0; c * c];
    for i in 0..c {
        let logits: Vec<f64> = (0..c)
            .map(|j| (0..hw).map(|p| x[i * hw + p] * x[j * hw + p]).sum())
            .collect();
        attn[i * c..(i + 1) * c].copy_from_slice(&softmax(&logits));
    }
    let mut out = vec![0.0; c * hw];
    for i in 0..c {
        for p in 0..hw {
            let av: f64 = (0..c).map(|j| attn[i * c + j] * x[j * hw + p]).sum();
            out[i * hw + p] = gamma * av + x[i * hw + p];
        }
    }
    (out, attn)
}

#[derive(Debug, Clone)]
pub struct BnRef {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnRef {
    pub fn from_state<T: Real>(store: &ParamStore<T>, bn: &BatchNormState) -> Self {
        let read = |id| store.value(id).to_f64_vec();
        BnRef {
            scale: read(bn.scale),
            shift: read(bn.shift),
            mean: read(bn.running_mean),
            var: read(bn.running_var),
            eps: bn.eps,
        }
    }

    /// Normalize `x[b][c][p]` (flattened) in place.
    fn apply(&self, x: &mut [f64], batch: usize, c: usize, hw: usize, mode: Mode) {
        for ch in 0..c {
            let idx = |b: usize, p: usize| (b * c + ch) * hw + p;
            let (mean, var) = match mode {
                Mode::Eval => (self.mean[ch], self.var[ch]),
                Mode::Train => {
                    let n = (batch * hw) as f64;
                    let mut m = 0.0;
                    for b in 0..batch {
                        for p in 0..hw {
                            m += x[idx(b, p)];
                        }
                    }
                    m /= n;
                    let mut v = 0.0;
                    for b in 0..batch {
                        for p in 0..hw {
                            v += (x[idx(b, p)] - m).powi(2);
                        }
                    }
                    (m, v / n)
                }
            };
            for b in 0..batch {
                for p in 0..hw {
                    let i = idx(b, p);
                    x[i] = self.scale[ch] * (x[i] - mean) / (var + self.eps).sqrt() + self.shift[ch];
                }
            }
        }
    }
}

/// All parameters of a spatial attention module, as plain row-major vectors.
#[derive(Debug, Clone)]
pub struct SamRpeRef {
    pub channels: usize,
    pub key_dim: usize,
    pub height: usize,
    pub width: usize,
    pub use_rpe: bool,
    pub variant: RpeVariant,
    pub w_k: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_v: Vec<f64>,
    pub bn_k: BnRef,
    pub bn_q: BnRef,
    pub bn_v: BnRef,
    pub r_h: Vec<f64>,
    pub r_w: Vec<f64>,
    pub bn_h: BnRef,
    pub bn_w: BnRef,
    pub gamma: f64,
}

impl SamRpeRef {
    pub fn from_state<T: Real>(store: &ParamStore<T>, s: &SamRpeState) -> Self {
        let read = |id| store.value(id).to_f64_vec();
        SamRpeRef {
            channels: s.cfg.channels,
            key_dim: s.cfg.key_dim(),
            height: s.cfg.height,
            width: s.cfg.width,
            use_rpe: s.cfg.use_rpe,
            variant: s.cfg.variant,
            w_k: read(s.w_k),
            w_q: read(s.w_q),
            w_v: read(s.w_v),
            bn_k: BnRef::from_state(store, &s.bn_k),
            bn_q: BnRef::from_state(store, &s.bn_q),
            bn_v: BnRef::from_state(store, &s.bn_v),
            r_h: read(s.r_h),
            r_w: read(s.r_w),
            bn_h: BnRef::from_state(store, &s.bn_h),
            bn_w: BnRef::from_state(store, &s.bn_w),
            gamma: store.value(s.gamma).data()[0].as_f64(),
        }
    }

    fn project(&self, x: &[f64], batch: usize, w: &[f64], out: usize, bn: &BnRef, mode: Mode) -> Vec<f64> {
        let (c, hw) = (self.channels, self.height * self.width);
        let mut y = vec![0.0; batch * out * hw];
        for b in 0..batch {
            for o in 0..out {
                for p in 0..hw {
                    let mut s = 0.0;
                    for i in 0..c {
                        s += w[o * c + i] * x[(b * c + i) * hw + p];
                    }
                    y[(b * out + o) * hw + p] = s;
                }
            }
        }
        bn.apply(&mut y, batch, out, hw, mode);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    /// Embedding row used for key position `key` when attending from query `query`.
    fn shift_row(&self, axis: Axis, mask: &[Vec<u8>], key: usize, query: usize) -> Option<usize> {
        match self.variant {
            RpeVariant::Paper => mask[key].iter().position(|&m| m == 1),
            RpeVariant::Rowwise => {
                let w = self.width;
                Some(match axis {
                    Axis::Height => key / w + self.height - 1 - query / w,
                    Axis::Width => key % w + w - 1 - query % w,
                })
            }
        }
    }

    /// Full forward on a `[B, C, H, W]` batch; returns (output, A_s per sample).
    pub fn forward(&self, x: &[f64], batch: usize, mode: Mode) -> (Vec<f64>, Vec<f64>) {
        let (c, dk, hw) = (self.channels, self.key_dim, self.height * self.width);
        let k = self.project(x, batch, &self.w_k, dk, &self.bn_k, mode);
        let q = self.project(x, batch, &self.w_q, dk, &self.bn_q, mode);
        let v = self.project(x, batch, &self.w_v, c, &self.bn_v, mode);

        let mut attn = vec![0.0; batch * hw * hw];
        let mut content = vec![0.0; batch * c * hw];
        let mut e_h = vec![0.0; batch * c * hw];
        let mut e_w = vec![0.0; batch * c * hw];
        let mask_h = reindex_mask(Axis::Height, self.height, self.width);
        let mask_w = reindex_mask(Axis::Width, self.height, self.width);
        for b in 0..batch {
            let kq = |arr: &[f64], d: usize, p: usize| arr[(b * dk + d) * hw + p];
            for p in 0..hw {
                let logits: Vec<f64> = (0..hw)
                    .map(|pp| (0..dk).map(|d| kq(&k, d, p) * kq(&q, d, pp)).sum())
                    .collect();
                let row = softmax(&logits);
                attn[(b * hw + p) * hw..(b * hw + p + 1) * hw].copy_from_slice(&row);
            }
            for ch in 0..c {
                for pp in 0..hw {
                    let mut s = 0.0;
                    for p in 0..hw {
                        s += v[(b * c + ch) * hw + p] * attn[(b * hw + p) * hw + pp];
                    }
                    content[(b * c + ch) * hw + pp] = s;
                }
            }
            if !self.use_rpe {
                continue;
            }
            for (axis, mask, emb, out) in [
                (Axis::Height, &mask_h, &self.r_h, &mut e_h),
                (Axis::Width, &mask_w, &self.r_w, &mut e_w),
            ] {
                for ch in 0..c {
                    for pp in 0..hw {
                        let mut s = 0.0;
                        for p in 0..hw {
                            let Some(row) = self.shift_row(axis, mask, p, pp) else { continue };
                            let logit: f64 = (0..dk).map(|d| emb[row * dk + d] * kq(&q, d, pp)).sum();
                            s += v[(b * c + ch) * hw + p] * logit;
                        }
                        out[(b * c + ch) * hw + pp] = s;
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * c * hw];
        if self.use_rpe {
            self.bn_h.apply(&mut e_h, batch, c, hw, mode);
            self.bn_w.apply(&mut e_w, batch, c, hw, mode);
        }
        for i in 0..out.len() {
            let pos = if self.use_rpe { e_h[i] + e_w[i] } else { 0.0 };
            out[i] = self.gamma * (content[i] + pos) + x[i];
        }
        (out, attn)
    }
}

/// Average precision by enumerating the ranked relevance list: the mean,
/// over relevant ranks `k`, of (relevant items in the top `k`) / `k`.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let hits: Vec<usize> = relevant_in_rank_order
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| i)
        .collect();
    if hits.is_empty() {
        return None;
    }
    let sum: f64 = hits
        .iter()
        .map(|&i| {
            let in_top = relevant_in_rank_order[..=i].iter().filter(|&&r| r).count();
            in_top as f64 / (i + 1) as f64
        })
        .sum();
    Some(sum / hits.len() as f64)
}

/// Gallery indices by ascending cosine distance computed from explicit norms,
/// ties broken by gallery index.
pub fn cosine_ranking(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let dot: f64 = query.iter().zip(g).map(|(a, b)| a * b).sum();
            (1.0 - dot / (qn * norm(g)), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}
