use serde::{Deserialize, Serialize};

use super::CodeBlock;
use crate::error::{Error, Result};
use crate::linalg::{assign_nearest, kmeans_fit, lloyd, Matrix};

/// Seed used for the k-means run of sub-space `j`.
pub fn subspace_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Per-sub-space codebooks of a product quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqCodebook {
    /// Dimension of the vectors accepted by `encode`.
    pub input_dim: usize,
    pub m: usize,
    pub k: usize,
    pub sub_dim: usize,
    /// `m` matrices of shape `k x sub_dim`.
    pub codebooks: Vec<Matrix>,
}

/// Smallest multiple of `m` that is `>= d`.
pub fn padded_dim(d: usize, m: usize) -> usize {
    d.div_ceil(m) * m
}

/// Trains one k-means codebook per column slice. Inputs are zero-padded to a
/// multiple of `m` columns.
pub fn pq_train(x: &Matrix, m: usize, k: usize, iters: usize, seed: u64) -> Result<PqCodebook> {
    let mut pq = pq_train_exact(x, m, k, iters, seed)?;
    pq.round_to_f32();
    Ok(pq)
}

pub(crate) fn pq_train_exact(
    x: &Matrix,
    m: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<PqCodebook> {
    validate(x, m, k)?;
    let input_dim = x.cols();
    let padded = x.resize_cols(padded_dim(input_dim, m));
    let sub_dim = padded.cols() / m;
    let codebooks = (0..m)
        .map(|j| {
            let slice = padded.slice_cols(j * sub_dim, sub_dim);
            kmeans_fit(&slice, k, iters, subspace_seed(seed, j)).map(|km| km.centroids)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PqCodebook {
        input_dim,
        m,
        k,
        sub_dim,
        codebooks,
    })
}

fn validate(x: &Matrix, m: usize, k: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::degenerate("PQ with zero sub-spaces"));
    }
    if k == 0 || k > 256 {
        return Err(Error::degenerate(format!("PQ codebook size {k} outside [1, 256]")));
    }
    if x.rows() < k {
        return Err(Error::degenerate(format!(
            "PQ with k = {k} needs at least {k} training vectors, got {}",
            x.rows()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::degenerate("PQ on zero-dimensional vectors"));
    }
    Ok(())
}

impl PqCodebook {
    pub fn padded_dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn bytes_per_vector(&self) -> usize {
        self.m
    }

    pub(crate) fn round_to_f32(&mut self) {
        self.codebooks.iter_mut().for_each(Matrix::round_to_f32);
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                format!("{} columns", self.input_dim),
                format!("{}", x.cols()),
            ));
        }
        Ok(())
    }

    /// Nearest centroid per sub-space; ties go to the lowest index.
    pub fn encode(&self, x: &Matrix) -> Result<CodeBlock> {
        self.check_input(x)?;
        let padded = x.resize_cols(self.padded_dim());
        let n = x.rows();
        let mut codes = vec![0u8; n * self.m];
        for (j, book) in self.codebooks.iter().enumerate() {
            let slice = padded.slice_cols(j * self.sub_dim, self.sub_dim);
            let (labels, _) = assign_nearest(&slice, book);
            for (i, label) in labels.into_iter().enumerate() {
                codes[i * self.m + j] = label as u8;
            }
        }
        CodeBlock::new(n, self.m, codes)
    }

    /// Concatenates the selected centroids and drops the padding columns.
    pub fn decode(&self, codes: &CodeBlock) -> Result<Matrix> {
        self.decode_padded(codes)
            .map(|full| full.resize_cols(self.input_dim))
    }

    pub(crate) fn decode_padded(&self, codes: &CodeBlock) -> Result<Matrix> {
        if codes.bytes_per_vector != self.m {
            return Err(Error::shape(
                format!("{} bytes per vector", self.m),
                format!("{}", codes.bytes_per_vector),
            ));
        }
        let mut out = Matrix::zeros(codes.n, self.padded_dim());
        for i in 0..codes.n {
            let row = out.row_mut(i);
            for (j, &c) in codes.vector(i).iter().enumerate() {
                let c = usize::from(c);
                if c >= self.k {
                    return Err(Error::Format(format!("code {c} out of range for k = {}", self.k)));
                }
                row[j * self.sub_dim..(j + 1) * self.sub_dim]
                    .copy_from_slice(self.codebooks[j].row(c));
            }
        }
        Ok(out)
    }

    /// Runs further Lloyd iterations on every sub-space starting from the
    /// current codebooks. Returns the total squared reconstruction error.
    pub(crate) fn refine(&mut self, padded: &Matrix, iters: usize) -> f64 {
        let mut total = 0.0;
        for j in 0..self.m {
            let slice = padded.slice_cols(j * self.sub_dim, self.sub_dim);
            let km = lloyd(&slice, self.codebooks[j].clone(), iters);
            total += km.inertia;
            self.codebooks[j] = km.centroids;
        }
        total
    }

    /// Total squared reconstruction error over the rows of `padded`.
    pub(crate) fn squared_error(&self, padded: &Matrix) -> f64 {
        (0..self.m)
            .map(|j| {
                let slice = padded.slice_cols(j * self.sub_dim, self.sub_dim);
                assign_nearest(&slice, &self.codebooks[j]).1.iter().sum::<f64>()
            })
            .sum()
    }
}
