use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{join, Visit};
use super::set_encoder::{PhotoBatch, SetEncoderConfig, SetEncoderParams, SetEncoderWeights};
use super::tape::{Gradients, Tape, Var};
use super::text_encoder::{TextEncoderConfig, TextEncoderParams, TextEncoderWeights};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Rows per chunk when embedding large collections.
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DualWeights<T> {
    pub photo: SetEncoderWeights<T>,
    pub text: TextEncoderWeights<T>,
}

impl<T> Visit<T> for DualWeights<T> {
    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        self.photo.visit(&join(p, "photo"), out);
        self.text.visit(&join(p, "text"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.photo.visit_mut(out);
        self.text.visit_mut(out);
    }
}

/// Static facts about one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub trainable: bool,
    /// Dense weight matrices get weight decay; biases, norms and positions do not.
    pub decay: bool,
}

/// A contrastive batch: row `i` of the text matrix belongs to photo set `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub photos: PhotoBatch,
    pub text: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.photos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photos.is_empty()
    }
}

pub struct ForwardOutput {
    pub weights: DualWeights<Var>,
    /// `B x d_out` unit rows.
    pub photo: Var,
    pub text: Var,
    /// Raw cosine similarities, `photo · textᵀ`.
    pub logits: Var,
}

impl ForwardOutput {
    /// Gradients of every model tensor in [`DualEncoder::param_specs`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.weights
            .named()
            .into_iter()
            .map(|(_, &v)| grads.get_or_zeros(v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub photo: SetEncoderParams,
    pub text: TextEncoderParams,
}

impl DualEncoder {
    pub fn init(photo: SetEncoderConfig, text: TextEncoderConfig, seed: u64) -> Result<Self> {
        if photo.output_dim != text.output_dim {
            return Err(Error::Config(format!(
                "tower output dims differ: {} vs {}",
                photo.output_dim, text.output_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let photo = SetEncoderParams::init(photo, &mut rng)?;
        let text = TextEncoderParams::init(text, &mut rng)?;
        Ok(DualEncoder { photo, text })
    }

    pub fn output_dim(&self) -> usize {
        self.photo.config.output_dim
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (name, _) in self.photo.weights.named() {
            let decay = name.ends_with(".w");
            specs.push(ParamSpec {
                name: join("photo", &name),
                trainable: true,
                decay,
            });
        }
        for (i, layer) in self.text.weights.layers.iter().enumerate() {
            for (name, _) in layer.named() {
                let decay = name == "w";
                specs.push(ParamSpec {
                    name: format!("text.layers.{i}.{name}"),
                    trainable: !self.text.frozen[i],
                    decay,
                });
            }
        }
        specs
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.photo.weights.named().into_iter().map(|(_, m)| m).collect();
        out.extend(self.text.weights.named().into_iter().map(|(_, m)| m));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.photo.weights.tensors_mut();
        out.extend(self.text.weights.tensors_mut());
        out
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records both towers and the `B x B` cosine logits. With `detach_text`
    /// the text embeddings enter the logits as constants.
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch, detach_text: bool) -> Result<ForwardOutput> {
        if batch.len() < 2 {
            return Err(Error::degenerate(format!("batch of {} listings, need at least 2", batch.len())));
        }
        if batch.text.rows() != batch.len() {
            return Err(Error::shape(
                format!("{} text rows", batch.len()),
                format!("{}", batch.text.rows()),
            ));
        }
        let weights = DualWeights {
            photo: self.photo.bind(tape, true),
            text: self.text.bind(tape, true),
        };
        let photo = self.photo.forward(tape, &weights.photo, &batch.photos)?;
        let mut text = self.text.forward(tape, &weights.text, &batch.text)?;
        if detach_text {
            text = tape.detach(text);
        }
        let logits = tape.matmul_t(photo, text)?;
        Ok(ForwardOutput {
            weights,
            photo,
            text,
            logits,
        })
    }

    /// Embeds photo sets given as `(photos, count)` pairs.
    pub fn encode_photo_sets(&self, sets: &[(&Matrix, usize)]) -> Result<Matrix> {
        let c = &self.photo.config;
        let mut parts = Vec::new();
        for chunk in sets.chunks(ENCODE_CHUNK) {
            let batch = PhotoBatch::new(c.max_photos, c.input_dim, chunk)?;
            parts.push(self.photo.encode_batch(&batch)?);
        }
        stack(parts, c.output_dim)
    }

    pub fn encode_texts(&self, text: &Matrix) -> Result<Matrix> {
        let mut parts = Vec::new();
        let mut start = 0;
        while start < text.rows() {
            let len = ENCODE_CHUNK.min(text.rows() - start);
            parts.push(self.text.encode_batch(&text.slice_rows(start, len))?);
            start += len;
        }
        stack(parts, self.text.config.output_dim)
    }
}

fn stack(parts: Vec<Matrix>, cols: usize) -> Result<Matrix> {
    if parts.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Matrix::vstack(&refs)
}
