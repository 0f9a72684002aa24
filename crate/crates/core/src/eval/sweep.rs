use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{retrieval_metrics, RetrievalMetrics};
use crate::codec::ScalarQuantizer;
use crate::error::{Error, Result};
use crate::linalg::{pca_fit, Matrix, PcaModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dim: usize,
    pub quantized: bool,
    pub metrics: RetrievalMetrics,
}

/// Retrieval quality after keeping the top `dim` principal components.
///
/// One PCA is fitted on the stacked training embeddings of both towers.
/// Test embeddings are projected, optionally quantized to 8 bits per
/// coordinate (quantizer fitted on training coordinates), and mapped back
/// to the embedding space before scoring.
#[allow(clippy::too_many_arguments)]
pub fn pca_dim_sweep(
    train_photo: &Matrix,
    train_text: &Matrix,
    test_photo: &Matrix,
    test_text: &Matrix,
    dims: &[usize],
    quantize_8bit: bool,
    ks: &[usize],
) -> Result<Vec<SweepRow>> {
    let d = train_photo.cols();
    if let Some(&bad) = dims.iter().find(|&&k| k == 0 || k > d) {
        return Err(Error::degenerate(format!("sweep dim {bad} outside [1, {d}]")));
    }
    let train = Matrix::vstack(&[train_photo, train_text])?;
    let full = pca_fit(&train, dims.iter().copied().max().unwrap_or(1))?;
    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        let pca = full.truncate(dim)?;
        let photo = reduce(&pca, &train, test_photo, quantize_8bit)?;
        let text = reduce(&pca, &train, test_text, quantize_8bit)?;
        rows.push(SweepRow {
            dim,
            quantized: quantize_8bit,
            metrics: retrieval_metrics(&text, &photo, ks)?,
        });
    }
    Ok(rows)
}

fn reduce(pca: &PcaModel, train: &Matrix, x: &Matrix, quantize: bool) -> Result<Matrix> {
    let mut coords = pca.project(x)?;
    if quantize {
        let q = ScalarQuantizer::fit(&pca.project(train)?)?;
        coords = q.decode(&q.encode(&coords)?)?;
    }
    pca.reconstruct(&coords)
}

/// `dim,quantized,mean_rank_t2i,mean_rank_i2t,recall_t2i@K...,recall_i2t@K...`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("dim,quantized,mean_rank_t2i,mean_rank_i2t");
    if let Some(first) = rows.first() {
        for k in first.metrics.recall_t2i.keys() {
            let _ = write!(out, ",recall_t2i@{k}");
        }
        for k in first.metrics.recall_i2t.keys() {
            let _ = write!(out, ",recall_i2t@{k}");
        }
    }
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = write!(out, "{},{},{},{}", r.dim, r.quantized, m.mean_rank_t2i, m.mean_rank_i2t);
        for v in m.recall_t2i.values().chain(m.recall_i2t.values()) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn paired(n: usize, d: usize, noise: f64, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Matrix::zeros(n, d);
        for v in a.as_mut_slice() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut b = a.clone();
        for v in b.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise * z;
        }
        (a.normalize_rows(), b.normalize_rows())
    }

    #[test]
    fn full_rank_matches_unprojected() {
        let (tp, tt) = paired(200, 12, 0.8, 1);
        let (hp, ht) = paired(100, 12, 0.8, 2);
        let rows = pca_dim_sweep(&tp, &tt, &hp, &ht, &[12], false, &[1, 10]).unwrap();
        let direct = retrieval_metrics(&ht, &hp, &[1, 10]).unwrap();
        let m = &rows[0].metrics;
        assert!((m.mean_rank_t2i - direct.mean_rank_t2i).abs() < 1e-9);
        for (a, b) in m.recall_t2i.values().zip(direct.recall_t2i.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_has_one_line_per_dim() {
        let (tp, tt) = paired(100, 8, 0.5, 3);
        let rows = pca_dim_sweep(&tp, &tt, &tp, &tt, &[2, 4, 8], true, &[1, 5]).unwrap();
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("dim,quantized,mean_rank_t2i,mean_rank_i2t,recall_t2i@1"));
        assert!(pca_dim_sweep(&tp, &tt, &tp, &tt, &[9], false, &[1]).is_err());
    }
}
