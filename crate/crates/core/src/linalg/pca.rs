use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// A fitted principal component analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x d`, orthonormal rows, ordered by decreasing variance.
    pub components: Matrix,
    /// Sample variance (divided by `n - 1`) along each component.
    pub explained_variance: Vec<f64>,
    /// Sample variance summed over all input dimensions.
    pub total_variance: f64,
}

/// Fits the top-`k` principal directions of `x` from the SVD of the centered
/// data matrix.
pub fn pca_fit(x: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::degenerate(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::degenerate(format!(
            "PCA rank {k} outside [1, {}]",
            n.min(d)
        )));
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let total_variance = centered.frobenius_norm().powi(2) / (n - 1) as f64;

    let svd = centered.to_nalgebra().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::degenerate("SVD failed to produce right singular vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut components = Matrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (out_row, &src) in order.iter().take(k).enumerate() {
        let row = components.row_mut(out_row);
        for (c, v) in row.iter_mut().enumerate() {
            *v = v_t[(src, c)];
        }
        // Sign convention: the largest-magnitude coordinate is positive.
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        let s = svd.singular_values[src];
        explained_variance.push(s * s / (n - 1) as f64);
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// Coordinates of `x` in the component basis, `n x k`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} columns", self.input_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut centered = x.clone();
        for r in 0..x.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_t(&self.components)
    }

    /// Maps `n x k` coordinates back into the input space.
    pub fn reconstruct(&self, coords: &Matrix) -> Result<Matrix> {
        let mut out = coords.matmul(&self.components)?;
        for r in 0..out.rows() {
            for (v, m) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance == 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// Keeps only the leading `k` components.
    pub fn truncate(&self, k: usize) -> Result<PcaModel> {
        if k == 0 || k > self.output_dim() {
            return Err(Error::degenerate(format!(
                "cannot truncate {} components to {k}",
                self.output_dim()
            )));
        }
        Ok(PcaModel {
            mean: self.mean.clone(),
            components: self.components.slice_rows(0, k),
            explained_variance: self.explained_variance[..k].to_vec(),
            total_variance: self.total_variance,
        })
    }
}
