//! `BLMODEL1` checkpoints: magic, `u32` header length, JSON header, then
//! every tensor as little-endian `f32` in the order the header lists them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dual::DualEncoder;
use super::layers::{Dense, Visit};
use super::set_encoder::{EncoderLayer, SetEncoderConfig, SetEncoderParams, SetEncoderWeights};
use super::text_encoder::{TextEncoderConfig, TextEncoderParams, TextEncoderWeights};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader, ByteWriter};
use crate::linalg::Matrix;

pub const MODEL_MAGIC: &[u8; 8] = b"BLMODEL1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    photo: SetEncoderConfig,
    text: TextEncoderConfig,
    text_frozen: Vec<bool>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Serializes `model` with free-form `meta` (loss state, provenance).
/// Tensors are written at `f32` precision.
pub fn checkpoint_bytes(model: &DualEncoder, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut named = Vec::new();
    model.photo.weights.visit("photo", &mut named);
    model.text.weights.visit("text", &mut named);
    let header = Header {
        format_version: FORMAT_VERSION,
        photo: model.photo.config.clone(),
        text: model.text.config.clone(),
        text_frozen: model.text.frozen.clone(),
        tensors: named
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = ByteWriter::default();
    w.bytes(MODEL_MAGIC);
    w.u32(u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?);
    w.bytes(&json);
    for (_, m) in named {
        w.f32s(m.as_slice());
    }
    Ok(w.into_inner())
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(DualEncoder, serde_json::Value)> {
    let mut r = ByteReader::new(buf);
    r.expect_magic(MODEL_MAGIC)?;
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    header.photo.validate()?;
    header.text.validate()?;
    if header.text_frozen.len() != header.text.layers {
        return Err(Error::Format("freeze flags do not match text layers".into()));
    }
    let mut model = skeleton(&header.photo, &header.text);
    model.text.frozen = header.text_frozen;
    let mut expected = Vec::new();
    model.photo.weights.visit("photo", &mut expected);
    model.text.weights.visit("text", &mut expected);
    if expected.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((name, m), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || m.shape() != (entry.rows, entry.cols) {
            return Err(Error::Format(format!(
                "tensor {} {}x{} does not match architecture ({name} {}x{})",
                entry.name,
                entry.rows,
                entry.cols,
                m.rows(),
                m.cols()
            )));
        }
    }
    let mut tensors = model.photo.weights.tensors_mut();
    tensors.extend(model.text.weights.tensors_mut());
    for t in tensors {
        *t = r.matrix(t.rows(), t.cols())?;
    }
    r.finish()?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(path: &Path, model: &DualEncoder, meta: &serde_json::Value) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(DualEncoder, serde_json::Value)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Zero-valued model with the shapes implied by the configs.
fn skeleton(photo: &SetEncoderConfig, text: &TextEncoderConfig) -> DualEncoder {
    let dm = photo.model_dim;
    let row = || Matrix::zeros(1, dm);
    let layers = (0..photo.layers)
        .map(|_| EncoderLayer {
            ln1_g: row(),
            ln1_b: row(),
            q: Dense::zeros(dm, dm),
            k: Dense::zeros(dm, dm),
            v: Dense::zeros(dm, dm),
            o: Dense::zeros(dm, dm),
            ln2_g: row(),
            ln2_b: row(),
            ff1: Dense::zeros(dm, 4 * dm),
            ff2: Dense::zeros(4 * dm, dm),
        })
        .collect();
    let text_layers = (0..text.layers)
        .map(|i| {
            let fan_in = if i == 0 { text.input_dim } else { text.hidden_dim };
            let fan_out = if i + 1 == text.layers { text.output_dim } else { text.hidden_dim };
            Dense::zeros(fan_in, fan_out)
        })
        .collect();
    DualEncoder {
        photo: SetEncoderParams {
            config: photo.clone(),
            weights: SetEncoderWeights {
                input: Dense::zeros(photo.input_dim, dm),
                positional: Matrix::zeros(photo.max_photos, dm),
                layers,
                final_g: row(),
                final_b: row(),
                output: Dense::zeros(dm, photo.output_dim),
            },
        },
        text: TextEncoderParams {
            config: text.clone(),
            frozen: vec![false; text.layers],
            weights: TextEncoderWeights { layers: text_layers },
        },
    }
}
