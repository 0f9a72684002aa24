//! Vector compression: PQ, OPQ, 8-bit scalar quantization and PCA + 8-bit,
//! with a shared byte-code container and a binary codec file format.
//!
//! Codec file layout (little-endian):
//!
//! ```text
//! "BLCODEC1"  8 bytes
//! kind        u8    0 = PQ, 1 = OPQ, 2 = SCALAR, 3 = PCA
//! PQ:     input_dim u32, m u32, k u32, sub_dim u32, codebooks f32[m * k * sub_dim]
//! OPQ:    input_dim u32, rotated_dim u32, rotation f32[rotated_dim^2], then the PQ block
//! SCALAR: dim u32, min f32[dim], scale f32[dim]
//! PCA:    input_dim u32, k u32, mean f32[input_dim], components f32[k * input_dim],
//!         explained_variance f32[k], total_variance f32, then the SCALAR block
//! ```

mod opq;
mod pca_codec;
mod pq;
mod report;
mod scalar;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use opq::{opq_train, opq_train_traced, OpqCodec, OpqParams, OpqTrace};
pub use pca_codec::PcaCodec;
pub use pq::{padded_dim, pq_train, subspace_seed, PqCodebook};
pub use report::{
    compression_report, per_vector_l2, relative_reduction, render_table, CompressionReport,
    REPORT_PERCENTILES,
};
pub use scalar::ScalarQuantizer;

use crate::error::{Error, Result};
use crate::io::{dim_u32, write_atomic, ByteReader, ByteWriter};
use crate::linalg::{Matrix, PcaModel};

pub const CODEC_MAGIC: &[u8; 8] = b"BLCODEC1";

/// `n` code vectors of `bytes_per_vector` bytes each, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub n: usize,
    pub bytes_per_vector: usize,
    pub codes: Vec<u8>,
}

impl CodeBlock {
    pub fn new(n: usize, bytes_per_vector: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != n * bytes_per_vector {
            return Err(Error::shape(
                format!("{} code bytes", n * bytes_per_vector),
                format!("{}", codes.len()),
            ));
        }
        Ok(CodeBlock {
            n,
            bytes_per_vector,
            codes,
        })
    }

    pub fn vector(&self, i: usize) -> &[u8] {
        &self.codes[i * self.bytes_per_vector..(i + 1) * self.bytes_per_vector]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Pq,
    Opq,
    Scalar,
    Pca,
}

impl CodecKind {
    pub fn tag(self) -> u8 {
        match self {
            CodecKind::Pq => 0,
            CodecKind::Opq => 1,
            CodecKind::Scalar => 2,
            CodecKind::Pca => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => CodecKind::Pq,
            1 => CodecKind::Opq,
            2 => CodecKind::Scalar,
            3 => CodecKind::Pca,
            other => return Err(Error::Format(format!("unknown codec kind {other}"))),
        })
    }
}

/// Any trained codec.
#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Pq(PqCodebook),
    Opq(OpqCodec),
    Scalar(ScalarQuantizer),
    Pca(PcaCodec),
}

impl Codec {
    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Pq(_) => CodecKind::Pq,
            Codec::Opq(_) => CodecKind::Opq,
            Codec::Scalar(_) => CodecKind::Scalar,
            Codec::Pca(_) => CodecKind::Pca,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Codec::Pq(c) => c.input_dim,
            Codec::Opq(c) => c.input_dim,
            Codec::Scalar(c) => c.dim(),
            Codec::Pca(c) => c.input_dim(),
        }
    }

    pub fn bytes_per_vector(&self) -> usize {
        match self {
            Codec::Pq(c) => c.bytes_per_vector(),
            Codec::Opq(c) => c.bytes_per_vector(),
            Codec::Scalar(c) => c.dim(),
            Codec::Pca(c) => c.bytes_per_vector(),
        }
    }

    pub fn encode(&self, x: &Matrix) -> Result<CodeBlock> {
        match self {
            Codec::Pq(c) => c.encode(x),
            Codec::Opq(c) => c.encode(x),
            Codec::Scalar(c) => c.encode(x),
            Codec::Pca(c) => c.encode(x),
        }
    }

    /// Reconstruction in the input space.
    pub fn decode(&self, codes: &CodeBlock) -> Result<Matrix> {
        match self {
            Codec::Pq(c) => c.decode(codes),
            Codec::Opq(c) => c.decode(codes),
            Codec::Scalar(c) => c.decode(codes),
            Codec::Pca(c) => c.decode(codes),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(CODEC_MAGIC);
        w.u8(self.kind().tag());
        match self {
            Codec::Pq(pq) => write_pq(&mut w, pq)?,
            Codec::Opq(opq) => {
                w.u32(dim_u32(opq.input_dim)?);
                w.u32(dim_u32(opq.rotated_dim)?);
                w.f32s(opq.rotation.as_slice());
                write_pq(&mut w, &opq.pq)?;
            }
            Codec::Scalar(q) => write_scalar(&mut w, q)?,
            Codec::Pca(c) => {
                let pca = &c.pca;
                w.u32(dim_u32(pca.input_dim())?);
                w.u32(dim_u32(pca.output_dim())?);
                w.f32s(&pca.mean);
                w.f32s(pca.components.as_slice());
                w.f32s(&pca.explained_variance);
                w.f32s(&[pca.total_variance]);
                write_scalar(&mut w, &c.quantizer)?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Codec> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CODEC_MAGIC)?;
        let codec = match CodecKind::from_tag(r.u8()?)? {
            CodecKind::Pq => Codec::Pq(read_pq(&mut r)?),
            CodecKind::Opq => {
                let input_dim = r.u32()? as usize;
                let rotated_dim = r.u32()? as usize;
                let rotation = r.matrix(rotated_dim, rotated_dim)?;
                let pq = read_pq(&mut r)?;
                if pq.input_dim != rotated_dim || input_dim > rotated_dim {
                    return Err(Error::Format("inconsistent OPQ dimensions".into()));
                }
                Codec::Opq(OpqCodec {
                    input_dim,
                    rotated_dim,
                    rotation,
                    pq,
                })
            }
            CodecKind::Scalar => Codec::Scalar(read_scalar(&mut r)?),
            CodecKind::Pca => {
                let d = r.u32()? as usize;
                let k = r.u32()? as usize;
                let mean = r.f32s(d)?;
                let components = r.matrix(k, d)?;
                let explained_variance = r.f32s(k)?;
                let total_variance = r.f32s(1)?[0];
                let quantizer = read_scalar(&mut r)?;
                if quantizer.dim() != k {
                    return Err(Error::Format("PCA quantizer width differs from k".into()));
                }
                Codec::Pca(PcaCodec {
                    pca: PcaModel {
                        mean,
                        components,
                        explained_variance,
                        total_variance,
                    },
                    quantizer,
                })
            }
        };
        r.finish()?;
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Codec> {
        Codec::from_bytes(&fs::read(path)?)
    }
}

fn write_pq(w: &mut ByteWriter, pq: &PqCodebook) -> Result<()> {
    w.u32(dim_u32(pq.input_dim)?);
    w.u32(dim_u32(pq.m)?);
    w.u32(dim_u32(pq.k)?);
    w.u32(dim_u32(pq.sub_dim)?);
    for book in &pq.codebooks {
        w.f32s(book.as_slice());
    }
    Ok(())
}

fn read_pq(r: &mut ByteReader<'_>) -> Result<PqCodebook> {
    let input_dim = r.u32()? as usize;
    let m = r.u32()? as usize;
    let k = r.u32()? as usize;
    let sub_dim = r.u32()? as usize;
    if k == 0 || k > 256 || m == 0 || input_dim > m * sub_dim {
        return Err(Error::Format(format!(
            "invalid PQ header: input_dim {input_dim}, m {m}, k {k}, sub_dim {sub_dim}"
        )));
    }
    let codebooks = (0..m)
        .map(|_| r.matrix(k, sub_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(PqCodebook {
        input_dim,
        m,
        k,
        sub_dim,
        codebooks,
    })
}

fn write_scalar(w: &mut ByteWriter, q: &ScalarQuantizer) -> Result<()> {
    w.u32(dim_u32(q.dim())?);
    w.f32s(&q.min);
    w.f32s(&q.scale);
    Ok(())
}

fn read_scalar(r: &mut ByteReader<'_>) -> Result<ScalarQuantizer> {
    let d = r.u32()? as usize;
    let min = r.f32s(d)?;
    let scale = r.f32s(d)?;
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Format("scalar quantizer scale must be positive".into()));
    }
    Ok(ScalarQuantizer { min, scale })
}
