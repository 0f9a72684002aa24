//! Retrieval metrics, k-NN attribute probes, binary NDCG, the PCA sweep
//! and exact top-k search.

mod search;
mod sweep;

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use search::{multimodal, top_k, Hit, Modality};
pub use sweep::{pca_dim_sweep, sweep_csv, SweepRow};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_PROBE_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub n_queries: usize,
    pub mean_rank_t2i: f64,
    pub mean_rank_i2t: f64,
    pub recall_t2i: BTreeMap<usize, f64>,
    pub recall_i2t: BTreeMap<usize, f64>,
}

impl RetrievalMetrics {
    pub fn recall_at_t2i(&self, k: usize) -> f64 {
        self.recall_t2i.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// One line in the shape of a published retrieval table.
    pub fn summary(&self) -> String {
        let fmt = |m: &BTreeMap<usize, f64>| {
            m.iter()
                .map(|(k, v)| format!("R@{k} {:.4}", v))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "n={} | text->image MR {:.3} {} | image->text MR {:.3} {}",
            self.n_queries,
            self.mean_rank_t2i,
            fmt(&self.recall_t2i),
            self.mean_rank_i2t,
            fmt(&self.recall_i2t)
        )
    }
}

/// 1-based rank of gallery row `i` for query row `i` under cosine
/// similarity. Ties count against the true match.
pub fn ranks(query: &Matrix, gallery: &Matrix) -> Result<Vec<usize>> {
    if query.shape() != gallery.shape() {
        return Err(Error::shape(
            format!("{}x{}", query.rows(), query.cols()),
            format!("{}x{}", gallery.rows(), gallery.cols()),
        ));
    }
    let sims = query.normalize_rows().matmul_t(&gallery.normalize_rows())?;
    Ok((0..sims.rows())
        .into_par_iter()
        .map(|i| {
            let row = sims.row(i);
            let own = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| j != i && s >= own)
                .count()
        })
        .collect())
}

fn summarize(ranks: &[usize], ks: &[usize]) -> (f64, BTreeMap<usize, f64>) {
    let n = ranks.len() as f64;
    let mean = ranks.iter().sum::<usize>() as f64 / n;
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    (mean, recall)
}

/// Metrics for paired rows: `text` row `i` describes `photo` row `i`.
/// Text-to-image ranks photo rows for each text query; image-to-text swaps.
pub fn retrieval_metrics(text: &Matrix, photo: &Matrix, ks: &[usize]) -> Result<RetrievalMetrics> {
    let n = text.rows();
    if n == 0 {
        return Err(Error::degenerate("no queries"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::degenerate(format!("recall@{k} needs 1 <= k <= {n}")));
    }
    let (mean_rank_t2i, recall_t2i) = summarize(&ranks(text, photo)?, ks);
    let (mean_rank_i2t, recall_i2t) = summarize(&ranks(photo, text)?, ks);
    Ok(RetrievalMetrics {
        n_queries: n,
        mean_rank_t2i,
        mean_rank_i2t,
        recall_t2i,
        recall_i2t,
    })
}

/// Accuracy of a cosine k-NN majority vote. Vote ties go to the smaller label.
pub fn knn_probe(
    train: &Matrix,
    train_labels: &[u32],
    test: &Matrix,
    test_labels: &[u32],
    k: usize,
) -> Result<f64> {
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(Error::shape(
            format!("{} train and {} test labels", train.rows(), test.rows()),
            format!("{} and {}", train_labels.len(), test_labels.len()),
        ));
    }
    if train.cols() != test.cols() {
        return Err(Error::shape(format!("{} columns", train.cols()), format!("{}", test.cols())));
    }
    if k == 0 || train.rows() < k {
        return Err(Error::degenerate(format!("k = {k} with {} training rows", train.rows())));
    }
    if test.rows() == 0 {
        return Err(Error::degenerate("empty probe test set"));
    }
    let sims = test.normalize_rows().matmul_t(&train.normalize_rows())?;
    let correct = (0..test.rows())
        .into_par_iter()
        .filter(|&i| {
            let row = sims.row(i);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
            for &j in &order[..k] {
                *votes.entry(train_labels[j]).or_default() += 1;
            }
            let best = votes.values().copied().max().unwrap_or(0);
            let label = votes.iter().find(|(_, &c)| c == best).map(|(&l, _)| l);
            label == Some(test_labels[i])
        })
        .count();
    Ok(correct as f64 / test.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub k: usize,
    pub accuracy: BTreeMap<String, f64>,
}

/// Probes every attribute present in all label maps.
pub fn probe_attributes(
    train: &Matrix,
    train_attrs: &[&BTreeMap<String, u32>],
    test: &Matrix,
    test_attrs: &[&BTreeMap<String, u32>],
    k: usize,
) -> Result<ProbeReport> {
    let names: Vec<&String> = match train_attrs.first() {
        Some(first) => first.keys().collect(),
        None => return Err(Error::degenerate("no training labels")),
    };
    let mut accuracy = BTreeMap::new();
    for name in names {
        let pick = |attrs: &[&BTreeMap<String, u32>]| -> Result<Vec<u32>> {
            attrs
                .iter()
                .map(|a| {
                    a.get(name)
                        .copied()
                        .ok_or_else(|| Error::degenerate(format!("missing attribute {name}")))
                })
                .collect()
        };
        let acc = knn_probe(train, &pick(train_attrs)?, test, &pick(test_attrs)?, k)?;
        accuracy.insert(name.clone(), acc);
    }
    Ok(ProbeReport { k, accuracy })
}

/// Binary-gain NDCG at `depth` with 1-based positions. An empty relevant
/// set scores 0.
pub fn ndcg_binary(ranking: &[u64], relevant: &HashSet<u64>, depth: usize) -> Result<f64> {
    if ranking.is_empty() {
        return Err(Error::degenerate("empty ranking"));
    }
    if relevant.is_empty() || depth == 0 {
        return Ok(0.0);
    }
    let gain = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(depth)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id))
        .map(|(i, _)| gain(i + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(depth)).map(gain).sum();
    Ok(dcg / ideal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalMetrics,
    pub probes: Option<ProbeReport>,
    pub sweep: Vec<SweepRow>,
}
