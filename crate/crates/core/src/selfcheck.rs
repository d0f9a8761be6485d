//! Built-in correctness report: optimized paths against loop oracles and
//! invariants, runnable from the command line without any data.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::{
    build_reindex_mask, cam_forward, cam_forward_detailed, sam_rpe_forward, sam_rpe_forward_detailed, Axis, CamState,
    RpeVariant, SamRpeConfig, SamRpeState,
};
use crate::error::Result;
use crate::evaluation::{mean_ap, rank1};
use crate::gradcheck::{check_gradients, check_gradients_with_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::reference::{self, SamRpeRef};
use crate::seed::rng_from;
use crate::tensor::{Graph, Mode, ParamStore, Tensor};
use crate::training::{lr_at, TrainConfig};

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    /// Replace the softmax under test with one that skips normalization.
    pub corrupt_softmax: bool,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub category: &'static str,
    pub invariant: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} [{}] {}: {}", self.category, self.invariant, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn categories(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for c in &self.checks {
            if !out.contains(&c.category) {
                out.push(c.category);
            }
        }
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} checks in {} categories, {failed} failed",
            self.checks.len(),
            self.categories().len()
        )
    }
}

struct Recorder {
    checks: Vec<CheckResult>,
}

impl Recorder {
    fn push(&mut self, category: &'static str, invariant: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(CheckResult {
            category,
            invariant: invariant.to_string(),
            passed,
            detail,
        });
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn softmax_graph(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let s = g.softmax_rows(v)?;
    Ok(g.value(s).clone())
}

fn softmax_unnormalized(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = *x.shape().last().unwrap_or(&1);
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn gradient_checks(rec: &mut Recorder) {
    let mut r = rng_from(&[0x5E1F, 1]);
    let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut r);
    let x4 = Tensor::<f64>::randn(vec![2, 2, 4, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], 0.5, &mut r);
    let probe = Tensor::<f64>::randn(vec![2, 3, 2, 2], 1.0, &mut r);
    let soft_probe = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);

    let report = |res: Result<crate::gradcheck::GradCheckReport>| {
        res.map(|rep| {
            (
                rep.passes(DEFAULT_TOLERANCE),
                format!("max relative error {:.2e} over {} evaluations", rep.max_rel_error, rep.evaluations),
            )
        })
    };

    rec.push(
        "gradients",
        "matmul",
        report(check_gradients(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let t = g.relu(m)?;
                g.sum(t)
            },
            &[a.clone(), b],
            DEFAULT_STEP,
        )),
    );
    rec.push(
        "gradients",
        "softmax rows",
        report(check_gradients(
            |g, v| {
                let s = g.softmax_rows(v[0])?;
                let p = g.constant(soft_probe.clone())?;
                let m = g.mul(s, p)?;
                g.sum(m)
            },
            &[a],
            DEFAULT_STEP,
        )),
    );
    rec.push(
        "gradients",
        "conv2d",
        report(check_gradients(
            |g, v| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                let p = g.constant(probe.clone())?;
                let m = g.mul(y, p)?;
                g.sum(m)
            },
            &[x4, w],
            DEFAULT_STEP,
        )),
    );

    let mut store = ParamStore::<f64>::new();
    let cam = CamState::new(&mut store, "c").inspect(|cam| {
        store.value_mut(cam.gamma).data_mut()[0] = 0.5;
    });
    let x = Tensor::<f64>::randn(vec![2, 3, 2, 2], 0.7, &mut r);
    let probe = Tensor::<f64>::randn(vec![2, 3, 2, 2], 1.0, &mut r);
    rec.push(
        "gradients",
        "channel attention",
        cam.and_then(|cam| {
            report(check_gradients_with_params(
                |g, store, v| {
                    let y = cam_forward(g, store, v[0], &cam)?;
                    let p = g.constant(probe.clone())?;
                    let m = g.mul(y, p)?;
                    g.sum(m)
                },
                &[x],
                &store,
                DEFAULT_STEP,
            ))
        }),
    );

    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::<f64>::new();
        let cfg = SamRpeConfig {
            channels: 8,
            height: 2,
            width: 2,
            use_rpe: true,
            variant: RpeVariant::Paper,
        };
        let x = Tensor::<f64>::randn(vec![2, 8, 2, 2], 1.0, &mut r);
        let probe = Tensor::<f64>::randn(vec![2, 8, 2, 2], 1.0, &mut r);
        let outcome = SamRpeState::new(&mut store, "s", cfg, 3).and_then(|state| {
            store.value_mut(state.gamma).data_mut()[0] = 0.7;
            report(check_gradients_with_params(
                |g, store, v| {
                    let y = sam_rpe_forward(g, store, v[0], &state, mode)?;
                    let p = g.constant(probe.clone())?;
                    let m = g.mul(y, p)?;
                    g.sum(m)
                },
                &[x],
                &store,
                DEFAULT_STEP,
            ))
        });
        rec.push("gradients", &format!("spatial attention ({mode:?})"), outcome);
    }
}

fn softmax_checks(rec: &mut Recorder, opts: Options) {
    let softmax: fn(&Tensor<f64>) -> Result<Tensor<f64>> =
        if opts.corrupt_softmax { softmax_unnormalized } else { softmax_graph };
    let mut r = rng_from(&[0x5E1F, 2]);
    let outcome = (|| {
        let mut worst = 0.0f64;
        for i in 0..100 {
            let scale = if i % 2 == 0 { 1.0 } else { 1e4 };
            let x = Tensor::<f64>::uniform(vec![6, 7], -scale, scale, &mut r);
            let s = softmax(&x)?;
            for row in s.data().chunks(7) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((worst <= 1e-6, format!("max |row sum - 1| = {worst:.2e} over 100 inputs up to 1e4")))
    })();
    rec.push("softmax", "softmax rows sum to one", outcome);

    let outcome = (|| {
        let x = Tensor::<f64>::randn(vec![4, 5], 3.0, &mut r);
        let s = softmax(&x)?;
        let mut worst = 0.0f64;
        for (got, row) in s.data().chunks(5).zip(x.data().chunks(5)) {
            worst = worst.max(max_diff(got, &reference::softmax(row)));
        }
        Ok((worst < 1e-12, format!("max deviation from loop softmax {worst:.2e}")))
    })();
    rec.push("softmax", "softmax matches loop oracle", outcome);

    let outcome = (|| {
        let mut worst = 0.0f64;
        for i in 0..20 {
            let scale = if i % 2 == 0 { 1.0 } else { 1e2 };
            let x = Tensor::<f64>::uniform(vec![1, 8, 3, 2], -scale, scale, &mut r);
            let mut store = ParamStore::<f64>::new();
            let cam = CamState::new(&mut store, "c")?;
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false)?;
            let out = cam_forward_detailed(&mut g, &store, xv, &cam)?;
            let state = SamRpeState::new(
                &mut store,
                "s",
                SamRpeConfig {
                    channels: 8,
                    height: 3,
                    width: 2,
                    use_rpe: true,
                    variant: RpeVariant::Paper,
                },
                i,
            )?;
            let sam = sam_rpe_forward_detailed(&mut g, &mut store, xv, &state, Mode::Eval)?;
            for attn in [out.attention, sam.attention] {
                let v = g.value(attn);
                let n = *v.shape().last().unwrap_or(&1);
                for row in v.data().chunks(n) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        Ok((worst <= 1e-6, format!("max |row sum - 1| = {worst:.2e}")))
    })();
    rec.push("softmax", "attention maps are row-stochastic", outcome);
}

fn identity_checks(rec: &mut Recorder) {
    let mut r = rng_from(&[0x5E1F, 3]);
    let x = Tensor::<f32>::randn(vec![2, 16, 3, 2], 2.0, &mut r);
    let bit_equal = |a: &Tensor<f32>| a.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let outcome = (|| {
        let mut store = ParamStore::<f32>::new();
        let cam = CamState::new(&mut store, "c")?;
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false)?;
        let y = cam_forward(&mut g, &store, xv, &cam)?;
        Ok((bit_equal(g.value(y)), "output bits compared with input".to_string()))
    })();
    rec.push("identity", "channel attention with zero gamma", outcome);
    let outcome = (|| {
        let mut store = ParamStore::<f32>::new();
        let cfg = SamRpeConfig {
            channels: 16,
            height: 3,
            width: 2,
            use_rpe: true,
            variant: RpeVariant::Paper,
        };
        let state = SamRpeState::new(&mut store, "s", cfg, 1)?;
        let mut ok = true;
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false)?;
            let y = sam_rpe_forward(&mut g, &mut store, xv, &state, mode)?;
            ok &= bit_equal(g.value(y));
        }
        Ok((ok, "output bits compared with input in train and eval".to_string()))
    })();
    rec.push("identity", "spatial attention with zero gamma", outcome);
}

fn mask_checks(rec: &mut Recorder) {
    let outcome = (|| {
        let mut compared = 0;
        for h in 1..=5 {
            for w in 1..=5 {
                for axis in [Axis::Height, Axis::Width] {
                    let mask = build_reindex_mask(axis, h, w)?;
                    let oracle = reference::reindex_mask(axis, h, w);
                    for (row, expected) in oracle.iter().enumerate() {
                        for (col, &e) in expected.iter().enumerate() {
                            if mask.entry(row, col) != e {
                                return Ok((false, format!("{axis:?} {h}x{w} entry ({row},{col}) differs")));
                            }
                            compared += 1;
                        }
                    }
                }
            }
        }
        Ok((true, format!("{compared} entries equal for extents up to 5")))
    })();
    rec.push("mask", "re-index mask matches triple loop", outcome);
}

fn oracle_checks(rec: &mut Recorder) {
    let mut r = rng_from(&[0x5E1F, 4]);
    let outcome = (|| {
        let mut worst = 0.0f64;
        for h in 1..=3 {
            for w in 1..=3 {
                let x = Tensor::<f64>::randn(vec![1, 8, h, w], 1.0, &mut r);
                let mut store = ParamStore::<f64>::new();
                let cam = CamState::new(&mut store, "c")?;
                store.value_mut(cam.gamma).data_mut()[0] = 0.8;
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), false)?;
                let y = cam_forward(&mut g, &store, xv, &cam)?;
                let (expected, _) = reference::cam(x.data(), 8, h * w, 0.8);
                worst = worst.max(max_diff(g.value(y).data(), &expected));
            }
        }
        Ok((worst < 1e-5, format!("max deviation {worst:.2e} for H,W in 1..=3")))
    })();
    rec.push("attention oracle", "channel attention matches loops", outcome);

    let outcome = (|| {
        let mut worst = 0.0f64;
        for h in 1..=3 {
            for w in 1..=3 {
                for variant in [RpeVariant::Paper, RpeVariant::Rowwise] {
                    let x = Tensor::<f64>::randn(vec![1, 8, h, w], 1.0, &mut r);
                    let mut store = ParamStore::<f64>::new();
                    let cfg = SamRpeConfig {
                        channels: 8,
                        height: h,
                        width: w,
                        use_rpe: true,
                        variant,
                    };
                    let state = SamRpeState::new(&mut store, "s", cfg, (h * 3 + w) as u64)?;
                    store.value_mut(state.gamma).data_mut()[0] = 0.6;
                    let oracle = SamRpeRef::from_state(&store, &state);
                    let (expected, _) = oracle.forward(x.data(), 1, Mode::Eval);
                    let mut g = Graph::new();
                    let xv = g.leaf(x.clone(), false)?;
                    let y = sam_rpe_forward(&mut g, &mut store, xv, &state, Mode::Eval)?;
                    worst = worst.max(max_diff(g.value(y).data(), &expected));
                }
            }
        }
        Ok((worst < 1e-5, format!("max deviation {worst:.2e} for H,W in 1..=3")))
    })();
    rec.push("attention oracle", "spatial attention matches loops", outcome);
}

fn metric_checks(rec: &mut Recorder) {
    let mut r = rng_from(&[0x5E1F, 5]);
    let outcome = (|| {
        for _ in 0..50 {
            let n = r.random_range(2..10);
            let classes = r.random_range(1..=n);
            let g_labels: Vec<i64> = (0..n).map(|i| (i % classes) as i64).collect();
            let q_labels: Vec<i64> = (0..r.random_range(1..5)).map(|_| r.random_range(0..classes) as i64).collect();
            let ranking: Vec<Vec<usize>> = q_labels
                .iter()
                .map(|_| {
                    let mut o: Vec<usize> = (0..n).collect();
                    o.shuffle(&mut r);
                    o
                })
                .collect();
            let mut ap = 0.0;
            let mut top = 0.0;
            for (order, &q) in ranking.iter().zip(&q_labels) {
                let rel: Vec<bool> = order.iter().map(|&j| g_labels[j] == q).collect();
                ap += reference::average_precision(&rel).unwrap_or(f64::NAN);
                top += if rel[0] { 1.0 } else { 0.0 };
            }
            let count = q_labels.len() as f64;
            if mean_ap(&ranking, &q_labels, &g_labels)? != ap / count || rank1(&ranking, &q_labels, &g_labels) != top / count {
                return Ok((false, "metric differs from enumeration".to_string()));
            }
        }
        let at_four = mean_ap(&[vec![1, 2, 3, 0]], &[0], &[0, 1, 2, 3])?;
        Ok((at_four == 0.25, format!("50 problems equal, single match at rank 4 gives {at_four}")))
    })();
    rec.push("metrics", "mAP and rank-1 match enumeration", outcome);
}

fn schedule_checks(rec: &mut Recorder) {
    let cfg = TrainConfig::default();
    let expected = [(0, 8e-6), (10, 8e-4), (40, 4e-4), (60, 2e-4)];
    let got: Vec<(usize, f64)> = expected.iter().map(|&(e, _)| (e, lr_at(e, &cfg).new)).collect();
    let ok = got.iter().zip(&expected).all(|(a, b)| a.1 == b.1);
    rec.push("schedule", "learning-rate checkpoints", Ok((ok, format!("{got:?}"))));
}

pub fn run(opts: Options) -> Report {
    let mut rec = Recorder { checks: Vec::new() };
    gradient_checks(&mut rec);
    softmax_checks(&mut rec, opts);
    identity_checks(&mut rec);
    mask_checks(&mut rec);
    oracle_checks(&mut rec);
    metric_checks(&mut rec);
    schedule_checks(&mut rec);
    Report { checks: rec.checks }
}
