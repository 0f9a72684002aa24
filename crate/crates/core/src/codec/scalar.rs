use serde::{Deserialize, Serialize};

use super::CodeBlock;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const LEVELS: f64 = 255.0;

/// Per-dimension affine 8-bit quantizer: code `c` decodes to `min + c * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarQuantizer {
    pub min: Vec<f64>,
    /// Strictly positive; 1 for constant dimensions.
    pub scale: Vec<f64>,
}

/// Next `f32` strictly above `v` (for finite positive-range values).
fn next_f32_up(v: f32) -> f32 {
    f32::from_bits(if v >= 0.0 { v.to_bits() + 1 } else { v.to_bits() - 1 })
}

/// Largest `f32` not greater than `v`.
fn f32_floor(v: f64) -> f32 {
    let r = v as f32;
    if f64::from(r) > v {
        if r > 0.0 {
            f32::from_bits(r.to_bits() - 1)
        } else if r == 0.0 {
            -f32::from_bits(1)
        } else {
            f32::from_bits(r.to_bits() + 1)
        }
    } else {
        r
    }
}

impl ScalarQuantizer {
    /// Fits min/scale per column. Parameters are stored at `f32` precision,
    /// rounded outward so the training range is always covered.
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::degenerate("scalar quantizer fitted on empty data"));
        }
        let d = x.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in x.row_iter() {
            for (c, &v) in row.iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let mut min = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for c in 0..d {
            if !lo[c].is_finite() || !hi[c].is_finite() {
                return Err(Error::degenerate(format!("non-finite values in column {c}")));
            }
            if hi[c] == lo[c] {
                min.push(f64::from(lo[c] as f32));
                scale.push(1.0);
                continue;
            }
            let m = f32_floor(lo[c]);
            let mut s = ((hi[c] - f64::from(m)) / LEVELS) as f32;
            while f64::from(m) + LEVELS * f64::from(s) < hi[c] {
                s = next_f32_up(s);
            }
            min.push(f64::from(m));
            scale.push(f64::from(s));
        }
        Ok(ScalarQuantizer { min, scale })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::shape(format!("{} columns", self.dim()), format!("{cols}")));
        }
        Ok(())
    }

    /// Rounds half to even; values outside the fitted range saturate.
    pub fn encode(&self, x: &Matrix) -> Result<CodeBlock> {
        self.check(x.cols())?;
        let mut codes = Vec::with_capacity(x.len());
        for row in x.row_iter() {
            for ((&v, &m), &s) in row.iter().zip(&self.min).zip(&self.scale) {
                let q = ((v - m) / s).round_ties_even().clamp(0.0, LEVELS);
                codes.push(q as u8);
            }
        }
        CodeBlock::new(x.rows(), self.dim(), codes)
    }

    pub fn decode(&self, codes: &CodeBlock) -> Result<Matrix> {
        self.check(codes.bytes_per_vector)?;
        let mut data = Vec::with_capacity(codes.codes.len());
        for i in 0..codes.n {
            for ((&c, &m), &s) in codes.vector(i).iter().zip(&self.min).zip(&self.scale) {
                data.push(m + f64::from(c) * s);
            }
        }
        Matrix::new(codes.n, self.dim(), data)
    }
}
