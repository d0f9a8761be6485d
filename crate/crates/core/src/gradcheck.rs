//! Central finite-difference gradient checking.
//!
//! The numerical side only re-runs the forward closure on perturbed inputs;
//! it never touches the backward pass it is checking.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>], store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut store = store.clone();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &mut store, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare the graph gradient of `build(inputs)` against central differences.
///
/// `build` must return a scalar and be a deterministic function of its inputs.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with_params(|g, _, vars| build(g, vars), inputs, &ParamStore::new(), step)
}

/// Like [`check_gradients`], additionally checking every trainable parameter of `store`.
///
/// Each evaluation runs on a fresh clone of `store`, so running-statistics
/// updates made in train mode do not leak between evaluations. Parameter
/// elements are reported with input index `inputs.len() + param index`.
pub fn check_gradients_with_params<F>(
    build: F,
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &mut analytic_store, &vars)?;
    g.backward(out)?;
    g.accumulate_grads(&mut analytic_store);
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let trainable: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for &id in &trainable {
        analytic.push(analytic_store.grad(id).clone());
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        evaluations: 0,
    };
    let mut record = |slot: usize, ei: usize, a: f64, numeric: f64| {
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst = (slot, ei);
            report.analytic = a;
            report.numeric = numeric;
        }
    };
    let mut evaluations = 0;
    let mut perturbed = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            perturbed[ti].data_mut()[ei] = orig + step;
            let plus = evaluate(&build, &perturbed, store)?;
            perturbed[ti].data_mut()[ei] = orig - step;
            let minus = evaluate(&build, &perturbed, store)?;
            perturbed[ti].data_mut()[ei] = orig;
            evaluations += 2;
            record(ti, ei, analytic[ti].data()[ei], (plus - minus) / (2.0 * step));
        }
    }
    let mut pstore = store.clone();
    for (pi, &id) in trainable.iter().enumerate() {
        let slot = inputs.len() + pi;
        for ei in 0..store.value(id).numel() {
            let orig = store.value(id).data()[ei];
            pstore.value_mut(id).data_mut()[ei] = orig + step;
            let plus = evaluate(&build, inputs, &pstore)?;
            pstore.value_mut(id).data_mut()[ei] = orig - step;
            let minus = evaluate(&build, inputs, &pstore)?;
            pstore.value_mut(id).data_mut()[ei] = orig;
            evaluations += 2;
            record(slot, ei, analytic[slot].data()[ei], (plus - minus) / (2.0 * step));
        }
    }
    report.evaluations = evaluations;
    Ok(report)
}
