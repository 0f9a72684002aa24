//! Optimized product quantization.
//!
//! Inputs are zero-padded to `rotated_dim`, rotated by a square orthogonal
//! matrix, then product-quantized. Training alternates between Lloyd updates
//! of the codebooks with the rotation fixed, and a Procrustes update of the
//! rotation with the codes fixed. Both half-steps can only lower the total
//! squared reconstruction error, so the objective is monotone.

use serde::{Deserialize, Serialize};

use super::pq::{pq_train_exact, PqCodebook};
use super::CodeBlock;
use crate::error::{Error, Result};
use crate::linalg::{procrustes, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpqCodec {
    pub input_dim: usize,
    pub rotated_dim: usize,
    /// `rotated_dim x rotated_dim`; vectors are rotated as `x · rotation`.
    pub rotation: Matrix,
    pub pq: PqCodebook,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpqParams {
    pub m: usize,
    pub k: usize,
    pub rotated_dim: usize,
    pub outer_iters: usize,
    /// Lloyd iterations for the initial codebooks and after every rotation update.
    pub kmeans_iters: usize,
    pub seed: u64,
}

/// Objective and rotation health after every outer iteration (index 0 is the
/// plain PQ initialisation).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpqTrace {
    pub objective: Vec<f64>,
    pub orthogonality_error: Vec<f64>,
}

pub fn opq_train(x: &Matrix, params: &OpqParams) -> Result<OpqCodec> {
    opq_train_traced(x, params).map(|(codec, _)| codec)
}

pub fn opq_train_traced(x: &Matrix, params: &OpqParams) -> Result<(OpqCodec, OpqTrace)> {
    let d = x.cols();
    let dim = params.rotated_dim;
    if dim < d {
        return Err(Error::degenerate(format!(
            "rotated dimension {dim} smaller than input dimension {d}"
        )));
    }
    if params.m == 0 || !dim.is_multiple_of(params.m) {
        return Err(Error::degenerate(format!(
            "rotated dimension {dim} not divisible by {} sub-spaces",
            params.m
        )));
    }

    let padded = x.resize_cols(dim);
    let mut rotation = Matrix::identity(dim);
    let mut pq = pq_train_exact(&padded, params.m, params.k, params.kmeans_iters, params.seed)?;
    let mut trace = OpqTrace {
        objective: vec![pq.squared_error(&padded)],
        orthogonality_error: vec![0.0],
    };

    for _ in 0..params.outer_iters {
        let rotated = padded.matmul(&rotation)?;
        let codes = pq.encode(&rotated)?;
        let target = pq.decode_padded(&codes)?;
        rotation = procrustes(&padded, &target)?;
        let rotated = padded.matmul(&rotation)?;
        let objective = pq.refine(&rotated, params.kmeans_iters);
        trace.objective.push(objective);
        trace.orthogonality_error.push(rotation.orthogonality_error());
    }

    pq.round_to_f32();
    rotation.round_to_f32();
    Ok((
        OpqCodec {
            input_dim: d,
            rotated_dim: dim,
            rotation,
            pq,
        },
        trace,
    ))
}

impl OpqCodec {
    pub fn bytes_per_vector(&self) -> usize {
        self.pq.bytes_per_vector()
    }

    pub fn rotate(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                format!("{} columns", self.input_dim),
                format!("{}", x.cols()),
            ));
        }
        x.resize_cols(self.rotated_dim).matmul(&self.rotation)
    }

    pub fn encode(&self, x: &Matrix) -> Result<CodeBlock> {
        self.pq.encode(&self.rotate(x)?)
    }

    /// Decodes in the rotated space, rotates back with the transpose and
    /// drops the padding.
    pub fn decode(&self, codes: &CodeBlock) -> Result<Matrix> {
        let rotated = self.pq.decode(codes)?;
        Ok(rotated
            .matmul_t(&self.rotation)?
            .resize_cols(self.input_dim))
    }
}
