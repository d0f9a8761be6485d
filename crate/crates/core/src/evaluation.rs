//! Cosine-distance retrieval metrics: rank-1, mAP and CMC.

use serde::{Deserialize, Serialize};

use crate::data::{load_batch, AugmentationConfig, RetrievalSplit, Sample};
use crate::error::{Error, Result};
use crate::network::Network;

pub const DEFAULT_CMC_DEPTH: usize = 10;

/// Row-major `[len, dim]` embedding matrix with one label per row.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<i64>,
    pub ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, rows: Vec<f64>, labels: Vec<i64>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * labels.len() {
            return Err(Error::invalid(
                "embedding_set",
                format!("{} values do not form {} rows of width {dim}", rows.len(), labels.len()),
            ));
        }
        let ids = (0..labels.len()).map(|i| i.to_string()).collect();
        Ok(EmbeddingSet { dim, rows, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn unit_rows(&self, role: &str) -> Result<Vec<f64>> {
        let mut out = self.rows.clone();
        for (i, row) in out.chunks_mut(self.dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!("{role} embedding {} has zero or non-finite norm", self.ids[i])));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }
}

/// For each query, gallery indices by ascending `1 - cos`, ties by gallery index.
pub fn cosine_rank(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<Vec<usize>>> {
    if query.dim != gallery.dim {
        return Err(Error::Shape {
            op: "cosine_rank",
            lhs: vec![query.len(), query.dim],
            rhs: vec![gallery.len(), gallery.dim],
        });
    }
    let q = query.unit_rows("query")?;
    let g = gallery.unit_rows("gallery")?;
    let d = query.dim;
    Ok(q.chunks(d)
        .map(|qr| {
            let mut scored: Vec<(f64, usize)> = g
                .chunks(d)
                .enumerate()
                .map(|(j, gr)| (1.0 - qr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>(), j))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

pub fn rank1(ranking: &[Vec<usize>], q_labels: &[i64], g_labels: &[i64]) -> f64 {
    if ranking.is_empty() {
        return 0.0;
    }
    let hits = ranking
        .iter()
        .zip(q_labels)
        .filter(|(r, &q)| r.first().is_some_and(|&j| g_labels[j] == q))
        .count();
    hits as f64 / ranking.len() as f64
}

/// Mean over queries of the precision at each relevant rank, averaged over relevant items.
pub fn mean_ap(ranking: &[Vec<usize>], q_labels: &[i64], g_labels: &[i64]) -> Result<f64> {
    if ranking.is_empty() {
        return Err(Error::Data("no queries to score".into()));
    }
    let mut total = 0.0;
    for (qi, (order, &label)) in ranking.iter().zip(q_labels).enumerate() {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            if g_labels[j] == label {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(Error::Data(format!("query {qi} (label {label}) has no match in the gallery")));
        }
        total += sum / hits as f64;
    }
    Ok(total / ranking.len() as f64)
}

/// `cmc[k]` is the fraction of queries with a match within the top `k + 1`.
pub fn cmc(ranking: &[Vec<usize>], q_labels: &[i64], g_labels: &[i64], depth: usize) -> Vec<f64> {
    let mut counts = vec![0usize; depth];
    for (order, &label) in ranking.iter().zip(q_labels) {
        if let Some(first) = order.iter().take(depth).position(|&j| g_labels[j] == label) {
            counts[first..].iter_mut().for_each(|c| *c += 1);
        }
    }
    let n = ranking.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionMetrics {
    pub repetition: u64,
    pub rank1: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
}

pub fn score(query: &EmbeddingSet, gallery: &EmbeddingSet, repetition: u64) -> Result<RepetitionMetrics> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("empty gallery or query set".into()));
    }
    let ranking = cosine_rank(query, gallery)?;
    Ok(RepetitionMetrics {
        repetition,
        rank1: rank1(&ranking, &query.labels, &gallery.labels),
        map: mean_ap(&ranking, &query.labels, &gallery.labels)?,
        cmc: cmc(&ranking, &query.labels, &gallery.labels, DEFAULT_CMC_DEPTH),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub repetitions: Vec<RepetitionMetrics>,
    pub mean_rank1: f64,
    pub std_rank1: f64,
    pub mean_map: f64,
    pub std_map: f64,
    pub mean_cmc: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation over repetitions.
pub fn aggregate(reps: Vec<RepetitionMetrics>) -> EvalReport {
    let (mean_rank1, std_rank1) = mean_std(&reps.iter().map(|r| r.rank1).collect::<Vec<_>>());
    let (mean_map, std_map) = mean_std(&reps.iter().map(|r| r.map).collect::<Vec<_>>());
    let depth = reps.iter().map(|r| r.cmc.len()).min().unwrap_or(0);
    let mean_cmc = (0..depth)
        .map(|k| reps.iter().map(|r| r.cmc[k]).sum::<f64>() / reps.len() as f64)
        .collect();
    EvalReport {
        repetitions: reps,
        mean_rank1,
        std_rank1,
        mean_map,
        std_map,
        mean_cmc,
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repetition,rank1,mAP\n");
        for r in &self.repetitions {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.repetition, r.rank1, r.map));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_rank1, self.mean_map));
        out.push_str(&format!("std,{:.6},{:.6}\n", self.std_rank1, self.std_map));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Eval-mode descriptors for `samples`, `batch` images at a time.
pub fn embed_samples(
    net: &mut Network<f32>,
    samples: &[Sample],
    aug: &AugmentationConfig,
    batch: usize,
) -> Result<EmbeddingSet> {
    let dim = net.descriptor_dim();
    let mut rows = Vec::with_capacity(samples.len() * dim);
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let x = load_batch(samples, chunk, aug, None)?;
        rows.extend(net.embed(&x)?.data().iter().map(|&v| v as f64));
    }
    let mut set = EmbeddingSet::new(dim, rows, samples.iter().map(|s| s.label).collect())?;
    set.ids = samples.iter().map(|s| s.source.to_string()).collect();
    Ok(set)
}

pub fn evaluate(
    net: &mut Network<f32>,
    split: &RetrievalSplit,
    aug: &AugmentationConfig,
    batch: usize,
) -> Result<RepetitionMetrics> {
    if split.gallery.is_empty() || split.query.is_empty() {
        return Err(Error::Data("split has an empty gallery or query set".into()));
    }
    let gallery = embed_samples(net, &split.gallery, aug, batch)?;
    let query = embed_samples(net, &split.query, aug, batch)?;
    score(&query, &gallery, split.repetition)
}
