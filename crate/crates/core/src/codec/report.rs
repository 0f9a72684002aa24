use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, percentiles, squared_distance, Matrix};

/// Percentile columns of the compression error table.
pub const REPORT_PERCENTILES: [f64; 6] = [0.05, 0.25, 0.50, 0.75, 0.90, 0.99];

/// Distribution of per-vector reconstruction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub n: usize,
    /// L2 error at each of [`REPORT_PERCENTILES`].
    pub l2: Vec<f64>,
    pub mean_l2: f64,
    /// Error divided by the norm of the original vector, same percentiles.
    pub relative: Vec<f64>,
    pub mean_relative: f64,
}

pub fn per_vector_l2(x: &Matrix, x_hat: &Matrix) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            format!("{}x{}", x.rows(), x.cols()),
            format!("{}x{}", x_hat.rows(), x_hat.cols()),
        ));
    }
    Ok(x
        .row_iter()
        .zip(x_hat.row_iter())
        .map(|(a, b)| squared_distance(a, b).sqrt())
        .collect())
}

pub fn compression_report(x: &Matrix, x_hat: &Matrix) -> Result<CompressionReport> {
    let errors = per_vector_l2(x, x_hat)?;
    let relative: Vec<f64> = errors
        .iter()
        .zip(x.row_iter())
        .map(|(e, row)| {
            let n = norm(row);
            if n > 0.0 {
                e / n
            } else {
                0.0
            }
        })
        .collect();
    let n = errors.len();
    Ok(CompressionReport {
        n,
        l2: percentiles(&errors, &REPORT_PERCENTILES)?,
        mean_l2: errors.iter().sum::<f64>() / n as f64,
        relative: percentiles(&relative, &REPORT_PERCENTILES)?,
        mean_relative: relative.iter().sum::<f64>() / n as f64,
    })
}

/// Percentage reduction of `better` relative to `baseline`, per percentile.
pub fn relative_reduction(baseline: &[f64], better: &[f64]) -> Vec<f64> {
    baseline
        .iter()
        .zip(better)
        .map(|(&b, &o)| if b == 0.0 { 0.0 } else { 100.0 * (1.0 - o / b) })
        .collect()
}

/// Renders labelled rows of L2 percentiles, plus a reduction row when exactly
/// two codecs are compared.
pub fn render_table(rows: &[(&str, &[f64])]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "");
    for p in REPORT_PERCENTILES {
        let _ = write!(out, " {:>9}", format!("p{}", (p * 100.0).round()));
    }
    out.push('\n');
    for (label, values) in rows {
        let _ = write!(out, "{label:<24}");
        for v in *values {
            let _ = write!(out, " {v:>9.4}");
        }
        out.push('\n');
    }
    if let [(_, base), (_, other)] = rows {
        let _ = write!(out, "{:<24}", "L2 error reduction (%)");
        for v in relative_reduction(base, other) {
            let _ = write!(out, " {v:>9.2}");
        }
        out.push('\n');
    }
    out
}
