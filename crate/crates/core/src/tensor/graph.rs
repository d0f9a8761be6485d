use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use super::{check_perm, gemm, inverse_perm, numel, BatchNormState, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Train mode uses batch statistics and dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    ScaleConst {
        x: Var,
        c: T,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SoftCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<T>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
        batch: usize,
        rows_in: usize,
        rows_out: usize,
        cols: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax_rows",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::ScaleConst { .. } => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Dropout { .. } => "dropout",
            Op::GlobalAvgPool { .. } => "global_average_pool",
            Op::Sum { .. } => "sum",
            Op::SoftCrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let cols = self.ho * self.wo;
        let mut out = vec![T::zero(); self.col_rows() * cols];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dst[oy * self.wo + ox] = x[(c * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im<T: Real>(&self, cols_data: &[T], dx: &mut [T]) {
        let cols = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let d = &mut dx[(c * self.h + iy as usize) * self.w + ix as usize];
                            *d = *d + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. Gradients accumulate
/// across multiple uses of a node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.nodes[v.0].param = Some(id);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Matrix product over the last two axes, with an optional leading batch
    /// axis on either side (an unbatched operand is broadcast).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || shape_err("matmul", &sa, &sb);
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(bad());
        }
        let a_batched = sa.len() == 3;
        let b_batched = sb.len() == 3;
        let (ba, m, k) = if a_batched { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
        let (bb, k2, n) = if b_batched { (sb[0], sb[1], sb[2]) } else { (1, sb[0], sb[1]) };
        if k != k2 || (a_batched && b_batched && ba != bb) {
            return Err(bad());
        }
        let batch = if a_batched { ba } else { bb };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        out.par_chunks_mut((m * n).max(1)).enumerate().for_each(|(i, c)| {
            let ai = if a_batched { &ad[i * m * k..(i + 1) * m * k] } else { ad };
            let bi = if b_batched { &bd[i * k * n..(i + 1) * k * n] } else { bd };
            gemm(m, k, n, ai, false, bi, false, c, false);
        });
        let shape = if a_batched || b_batched { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            &[a, b],
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_perm(perm, self.shape(x).len())?;
        let value = self.value(x).permute(perm)?;
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Softmax along the last axis, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_last(self.value(x))?;
        self.push(value, Op::Softmax { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add { a, b }, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub { a, b }, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul { a, b }, a, b, |x, y| x * y)
    }

    /// Multiply every element by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::invalid("scale_by", format!("scale must be scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| c * v);
        self.push(value, Op::ScaleBy { x, s }, &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| c * v);
        self.push(value, Op::ScaleConst { x, c }, &[x])
    }

    /// Add a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_bias", &sx, &sb));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n.max(1)) {
            add_into(row, &bias);
        }
        self.push(value, Op::AddBias { x, b }, &[x, b])
    }

    /// 2-D cross-correlation without bias: `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if sx[2] + 2 * pad < kh || sx[3] + 2 * pad < kw {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh,
            kw,
            stride,
            pad,
            ho: (sx[2] + 2 * pad - kh) / stride + 1,
            wo: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let in_len = geom.cin * geom.h * geom.w;
        let out_len = geom.cout * geom.ho * geom.wo;
        let mut out = vec![T::zero(); geom.batch * out_len];
        out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(b, o)| {
            let xb = &xd[b * in_len..(b + 1) * in_len];
            let cols_len = geom.ho * geom.wo;
            if geom.is_pointwise() {
                gemm(geom.cout, geom.cin, cols_len, wd, false, xb, false, o, false);
            } else {
                let cols = geom.im2col(xb);
                gemm(geom.cout, geom.col_rows(), cols_len, wd, false, &cols, false, o, false);
            }
        });
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.ho, geom.wo], out)?;
        self.push(value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Batch normalization over every axis except axis 1 (channels).
    ///
    /// In train mode the batch statistics normalize the input and the running
    /// statistics in `store` are updated; in eval mode the running statistics
    /// are used as constants.
    pub fn batch_norm(&mut self, store: &mut ParamStore<T>, bn: &BatchNormState, x: Var, mode: Mode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || sx[1] != bn.channels {
            return Err(shape_err("batch_norm", &sx, &[bn.channels]));
        }
        let (batch, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let count = batch * inner;
        if count == 0 {
            return Err(Error::invalid("batch_norm", "empty input"));
        }
        let scale = self.param(store, bn.scale)?;
        let shift = self.param(store, bn.shift)?;
        let eps = T::lit(bn.eps);
        let xd = self.value(x).data().to_vec();
        let channel_iter = |ch: usize| {
            (0..batch).flat_map(move |b| {
                let start = (b * c + ch) * inner;
                start..start + inner
            })
        };
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let nf = T::lit(count as f64);
                let mut means = Vec::with_capacity(c);
                let mut vars = Vec::with_capacity(c);
                for ch in 0..c {
                    let mean = channel_iter(ch).map(|i| xd[i]).sum::<T>() / nf;
                    let var = channel_iter(ch)
                        .map(|i| (xd[i] - mean) * (xd[i] - mean))
                        .sum::<T>()
                        / nf;
                    means.push(mean);
                    vars.push(var);
                }
                let mom = T::lit(bn.momentum);
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count as f64 - 1.0))
                } else {
                    T::one()
                };
                let rm = store.value_mut(bn.running_mean).data_mut();
                for (r, &m) in rm.iter_mut().zip(&means) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                let rv = store.value_mut(bn.running_var).data_mut();
                for (r, &v) in rv.iter_mut().zip(&vars) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
                (means, vars)
            }
            Mode::Eval => (
                store.value(bn.running_mean).data().to_vec(),
                store.value(bn.running_var).data().to_vec(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let sd = self.value(scale).data().to_vec();
        let hd = self.value(shift).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            for i in channel_iter(ch) {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = sd[ch] * xh + hd[ch];
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            &[x, scale, shift],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let slope = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Inverted dropout; the identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over all spatial positions: `[B,C,H,W] -> [B,C]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] == 0 || sx[3] == 0 {
            return Err(Error::invalid("global_average_pool", format!("expected [B,C,H,W] with H,W >= 1, got {sx:?}")));
        }
        let hw = sx[2] * sx[3];
        let denom = T::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![sx[0], sx[1]], data)?;
        self.push(value, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Mean over rows of `-sum_j target[j] * log softmax(logits)[j]`.
    ///
    /// `target` is a `[B,N]` matrix of per-row probability distributions.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || target.shape() != sl.as_slice() {
            return Err(shape_err("cross_entropy", &sl, target.shape()));
        }
        let (b, n) = (sl[0], sl[1]);
        let probs = softmax_last(self.value(logits))?.into_data();
        let ld = self.value(logits).data();
        let td = target.data();
        let mut total = T::zero();
        for r in 0..b {
            let row = &ld[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..n {
                let t = td[r * n + j];
                if t != T::zero() {
                    total = total - t * (row[j] - lse);
                }
            }
        }
        let value = Tensor::scalar(total / T::lit(b.max(1) as f64));
        self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                probs,
                target: td.to_vec(),
            },
            &[logits],
        )
    }

    /// Per-column row gather: for `x` of shape `[(B,) R, N]`, returns
    /// `[(B,) P, N]` with `out[p, n] = x[index[p * N + n], n]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize], rows_out: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, rows_in, cols) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(Error::invalid("gather_rows", format!("rank {} not in 2..=3", sx.len()))),
        };
        if index.len() != rows_out * cols || index.iter().any(|&i| i >= rows_in) {
            return Err(Error::invalid("gather_rows", "index table does not fit the input"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * rows_out * cols);
        for b in 0..batch {
            let base = b * rows_in * cols;
            for p in 0..rows_out {
                for n in 0..cols {
                    out.push(xd[base + index[p * cols + n] * cols + n]);
                }
            }
        }
        let shape = if sx.len() == 3 { vec![batch, rows_out, cols] } else { vec![rows_out, cols] };
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
                batch,
                rows_in,
                rows_out,
                cols,
            },
            &[x],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<T>| match &mut grads[v.0] {
            Some(existing) => add_into(existing, &d),
            slot @ None => *slot = Some(d),
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (ad, bd) = (val(a), val(b));
                if needs(a) {
                    let mut da = vec![T::zero(); if a_batched { batch * m * k } else { m * k }];
                    if a_batched {
                        da.par_chunks_mut((m * k).max(1)).enumerate().for_each(|(bi, d)| {
                            let bsl = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                            gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], false, bsl, true, d, false);
                        });
                    } else {
                        for bi in 0..batch {
                            let bsl = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                            gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], false, bsl, true, &mut da, true);
                        }
                    }
                    acc(a, da);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); if b_batched { batch * k * n } else { k * n }];
                    if b_batched {
                        db.par_chunks_mut((k * n).max(1)).enumerate().for_each(|(bi, d)| {
                            let asl = if a_batched { &ad[bi * m * k..(bi + 1) * m * k] } else { ad };
                            gemm(k, m, n, asl, true, &g[bi * m * n..(bi + 1) * m * n], false, d, false);
                        });
                    } else {
                        for bi in 0..batch {
                            let asl = if a_batched { &ad[bi * m * k..(bi + 1) * m * k] } else { ad };
                            gemm(k, m, n, asl, true, &g[bi * m * n..(bi + 1) * m * n], false, &mut db, true);
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Permute { x, perm } => {
                let gt = Tensor::new(nodes[i].value.shape().to_vec(), g.to_vec())?;
                acc(*x, gt.permute(&inverse_perm(perm))?.into_data());
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Concat { xs, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x.0].value.shape()[*axis] * inner;
                    if needs(x) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        acc(x, d);
                    }
                    offset += len;
                }
            }
            Op::Softmax { x } => {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, d);
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    acc(a, g.to_vec());
                }
                if needs(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    acc(a, g.to_vec());
                }
                if needs(b) {
                    acc(b, g.iter().map(|&v| -v).collect());
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect());
                }
            }
            &Op::ScaleBy { x, s } => {
                let c = val(s)[0];
                if needs(x) {
                    acc(x, g.iter().map(|&d| d * c).collect());
                }
                if needs(s) {
                    let ds: T = g.iter().zip(val(x)).map(|(&d, &v)| d * v).sum();
                    acc(s, vec![ds]);
                }
            }
            &Op::ScaleConst { x, c } => acc(x, g.iter().map(|&d| d * c).collect()),
            &Op::AddBias { x, b } => {
                if needs(x) {
                    acc(x, g.to_vec());
                }
                if needs(b) {
                    let n = nodes[b.0].value.numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n.max(1)) {
                        add_into(&mut db, row);
                    }
                    acc(b, db);
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let (xd, wd) = (val(x), val(w));
                let in_len = geom.cin * geom.h * geom.w;
                let out_len = geom.cout * geom.ho * geom.wo;
                let cols_len = geom.ho * geom.wo;
                let krows = geom.col_rows();
                let need_x = needs(x);
                let need_w = needs(w);
                // per-sample partials, reduced in batch order for determinism
                let partials: Vec<(Vec<T>, Vec<T>)> = (0..geom.batch)
                    .into_par_iter()
                    .map(|b| {
                        let xb = &xd[b * in_len..(b + 1) * in_len];
                        let gb = &g[b * out_len..(b + 1) * out_len];
                        let cols = if geom.is_pointwise() { None } else { Some(geom.im2col(xb)) };
                        let colsr = cols.as_deref().unwrap_or(xb);
                        let mut dw = Vec::new();
                        if need_w {
                            dw = vec![T::zero(); geom.cout * krows];
                            gemm(geom.cout, cols_len, krows, gb, false, colsr, true, &mut dw, false);
                        }
                        let mut dx = Vec::new();
                        if need_x {
                            let mut dcols = vec![T::zero(); krows * cols_len];
                            gemm(krows, geom.cout, cols_len, wd, true, gb, false, &mut dcols, false);
                            if geom.is_pointwise() {
                                dx = dcols;
                            } else {
                                dx = vec![T::zero(); in_len];
                                geom.col2im(&dcols, &mut dx);
                            }
                        }
                        (dw, dx)
                    })
                    .collect();
                if need_w {
                    let mut dw = vec![T::zero(); geom.cout * krows];
                    for (p, _) in &partials {
                        add_into(&mut dw, p);
                    }
                    acc(w, dw);
                }
                if need_x {
                    let mut dx = Vec::with_capacity(geom.batch * in_len);
                    for (_, p) in partials {
                        dx.extend(p);
                    }
                    acc(x, dx);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let s = nodes[x.0].value.shape();
                let (batch, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let count = T::lit((batch * inner) as f64);
                let sd = val(*scale);
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let idx = || {
                        (0..batch).flat_map(move |b| {
                            let start = (b * c + ch) * inner;
                            start..start + inner
                        })
                    };
                    let sum_g: T = idx().map(|j| g[j]).sum();
                    let sum_gx: T = idx().map(|j| g[j] * xhat[j]).sum();
                    dscale[ch] = sum_gx;
                    dshift[ch] = sum_g;
                    let k = sd[ch] * inv_std[ch];
                    if *train {
                        for j in idx() {
                            dx[j] = k * (g[j] - sum_g / count - xhat[j] * sum_gx / count);
                        }
                    } else {
                        for j in idx() {
                            dx[j] = k * g[j];
                        }
                    }
                }
                if needs(*x) {
                    acc(*x, dx);
                }
                if needs(*scale) {
                    acc(*scale, dscale);
                }
                if needs(*shift) {
                    acc(*shift, dshift);
                }
            }
            &Op::Relu { x } => acc(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            &Op::LeakyRelu { x, slope } => acc(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { slope * d })
                    .collect(),
            ),
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect()),
            &Op::GlobalAvgPool { x } => {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let denom = T::lit(hw as f64);
                let mut d = Vec::with_capacity(nodes[x.0].value.numel());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv / denom, hw));
                }
                acc(x, d);
            }
            &Op::Sum { x } => acc(x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::SoftCrossEntropy { logits, probs, target } => {
                let b = nodes[logits.0].value.shape()[0].max(1);
                let k = g[0] / T::lit(b as f64);
                let n = probs.len() / b;
                let mut d = Vec::with_capacity(probs.len());
                for (pr, tr) in probs.chunks(n.max(1)).zip(target.chunks(n.max(1))) {
                    let mass: T = tr.iter().copied().sum();
                    d.extend(pr.iter().zip(tr).map(|(&p, &t)| k * (mass * p - t)));
                }
                acc(*logits, d);
            }
            Op::GatherRows {
                x,
                index,
                batch,
                rows_in,
                rows_out,
                cols,
            } => {
                let mut d = vec![T::zero(); batch * rows_in * cols];
                for bi in 0..*batch {
                    for p in 0..*rows_out {
                        for n in 0..*cols {
                            let dst = bi * rows_in * cols + index[p * cols + n] * cols + n;
                            d[dst] = d[dst] + g[(bi * rows_out + p) * cols + n];
                        }
                    }
                }
                acc(*x, d);
            }
        }
        Ok(())
    }

    /// Add every parameter leaf's gradient into `store`.
    pub fn accumulate_grads(&self, store: &mut ParamStore<T>) {
        for node_idx in self.param_nodes.values() {
            let node = &self.nodes[node_idx.0];
            if let (Some(id), Some(Some(g))) = (node.param, self.grads.get(node_idx.0)) {
                store.add_grad(id, g);
            }
        }
    }
}

/// Row-wise softmax of the last axis; rejects non-finite input.
pub(crate) fn softmax_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let n = *x.shape().last().ok_or_else(|| Error::invalid("softmax_rows", "scalar input"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}
