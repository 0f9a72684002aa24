use serde::{Deserialize, Serialize};

use super::{CodeBlock, ScalarQuantizer};
use crate::error::Result;
use crate::linalg::{pca_fit, Matrix, PcaModel};

/// PCA reduction to `k` dimensions followed by 8-bit scalar quantization of
/// the coordinates: `k` bytes per vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaCodec {
    pub pca: PcaModel,
    pub quantizer: ScalarQuantizer,
}

impl PcaCodec {
    pub fn fit(x: &Matrix, k: usize) -> Result<Self> {
        let mut pca = pca_fit(x, k)?;
        round_pca(&mut pca);
        let coords = pca.project(x)?;
        let quantizer = ScalarQuantizer::fit(&coords)?;
        Ok(PcaCodec { pca, quantizer })
    }

    pub fn input_dim(&self) -> usize {
        self.pca.input_dim()
    }

    pub fn bytes_per_vector(&self) -> usize {
        self.pca.output_dim()
    }

    pub fn encode(&self, x: &Matrix) -> Result<CodeBlock> {
        self.quantizer.encode(&self.pca.project(x)?)
    }

    /// Dequantized PCA coordinates, `n x k`.
    pub fn decode_coords(&self, codes: &CodeBlock) -> Result<Matrix> {
        self.quantizer.decode(codes)
    }

    /// Reconstruction in the original space, `n x d`.
    pub fn decode(&self, codes: &CodeBlock) -> Result<Matrix> {
        self.pca.reconstruct(&self.decode_coords(codes)?)
    }
}

fn round_pca(pca: &mut PcaModel) {
    let r = |v: &mut f64| *v = f64::from(*v as f32);
    pca.mean.iter_mut().for_each(r);
    pca.explained_variance.iter_mut().for_each(r);
    r(&mut pca.total_variance);
    pca.components.round_to_f32();
}
