use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{join, normal_matrix, Dense, Visit};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final representation at the last real photo.
    LastPhoto,
    /// Mean over real photos (ablation).
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetEncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_photos: usize,
    pub output_dim: usize,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_pooling() -> Pooling {
    Pooling::LastPhoto
}

fn default_true() -> bool {
    true
}

impl Default for SetEncoderConfig {
    fn default() -> Self {
        SetEncoderConfig {
            input_dim: 16,
            model_dim: 64,
            heads: 4,
            layers: 4,
            max_photos: 8,
            output_dim: 64,
            pooling: Pooling::LastPhoto,
            positional: true,
        }
    }
}

impl SetEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.input_dim == 0 || c.model_dim == 0 || c.output_dim == 0 || c.max_photos == 0 {
            return Err(Error::Config("set encoder dimensions must be positive".into()));
        }
        if c.layers == 0 {
            return Err(Error::Config("set encoder needs at least one layer".into()));
        }
        if c.heads == 0 || !c.model_dim.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                c.model_dim, c.heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub q: Dense<T>,
    pub k: Dense<T>,
    pub v: Dense<T>,
    pub o: Dense<T>,
    pub ln2_g: T,
    pub ln2_b: T,
    pub ff1: Dense<T>,
    pub ff2: Dense<T>,
}

impl<T> EncoderLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }
}

impl<T> Visit<T> for EncoderLayer<T> {
    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(p, "ln1_g"), &self.ln1_g));
        out.push((join(p, "ln1_b"), &self.ln1_b));
        self.q.visit(&join(p, "q"), out);
        self.k.visit(&join(p, "k"), out);
        self.v.visit(&join(p, "v"), out);
        self.o.visit(&join(p, "o"), out);
        out.push((join(p, "ln2_g"), &self.ln2_g));
        out.push((join(p, "ln2_b"), &self.ln2_b));
        self.ff1.visit(&join(p, "ff1"), out);
        self.ff2.visit(&join(p, "ff2"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.ln1_g);
        out.push(&mut self.ln1_b);
        self.q.visit_mut(out);
        self.k.visit_mut(out);
        self.v.visit_mut(out);
        self.o.visit_mut(out);
        out.push(&mut self.ln2_g);
        out.push(&mut self.ln2_b);
        self.ff1.visit_mut(out);
        self.ff2.visit_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEncoderWeights<T> {
    pub input: Dense<T>,
    /// `max_photos x model_dim`.
    pub positional: T,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_g: T,
    pub final_b: T,
    pub output: Dense<T>,
}

impl<T> SetEncoderWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SetEncoderWeights<U> {
        SetEncoderWeights {
            input: self.input.map(f),
            positional: f(&self.positional),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_g: f(&self.final_g),
            final_b: f(&self.final_b),
            output: self.output.map(f),
        }
    }
}

impl<T> Visit<T> for SetEncoderWeights<T> {
    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        self.input.visit(&join(p, "input"), out);
        out.push((join(p, "positional"), &self.positional));
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(p, &format!("layers.{i}")), out);
        }
        out.push((join(p, "final_g"), &self.final_g));
        out.push((join(p, "final_b"), &self.final_b));
        self.output.visit(&join(p, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.input.visit_mut(out);
        out.push(&mut self.positional);
        for l in &mut self.layers {
            l.visit_mut(out);
        }
        out.push(&mut self.final_g);
        out.push(&mut self.final_b);
        self.output.visit_mut(out);
    }
}

/// Photo sets of a batch laid out as blocks of `max_photos` rows, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoBatch {
    pub tokens: Matrix,
    pub counts: Vec<usize>,
    pub max_photos: usize,
}

impl PhotoBatch {
    /// Each set is `(photos, count)`; only the first `count` rows are read.
    pub fn new(max_photos: usize, input_dim: usize, sets: &[(&Matrix, usize)]) -> Result<Self> {
        let mut tokens = Matrix::zeros(sets.len() * max_photos, input_dim);
        let mut counts = Vec::with_capacity(sets.len());
        for (b, (photos, count)) in sets.iter().enumerate() {
            let count = *count;
            if count == 0 || count > max_photos {
                return Err(Error::degenerate(format!(
                    "photo count {count} outside [1, {max_photos}]"
                )));
            }
            if photos.cols() != input_dim || photos.rows() < count {
                return Err(Error::shape(
                    format!("at least {count}x{input_dim}"),
                    format!("{}x{}", photos.rows(), photos.cols()),
                ));
            }
            for r in 0..count {
                tokens.row_mut(b * max_photos + r).copy_from_slice(photos.row(r));
            }
            counts.push(count);
        }
        Ok(PhotoBatch {
            tokens,
            counts,
            max_photos,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// The set encoder: input projection, learned positions, transformer
/// blocks, pooling, output projection, unit normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEncoderParams {
    pub config: SetEncoderConfig,
    pub weights: SetEncoderWeights<Matrix>,
}

impl SetEncoderParams {
    pub fn init(config: SetEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dm = config.model_dim;
        let ones = || Matrix::filled(1, dm, 1.0);
        let zeros = || Matrix::zeros(1, dm);
        let input = Dense::init(config.input_dim, dm, rng);
        let positional = normal_matrix(config.max_photos, dm, 0.1, rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                ln1_g: ones(),
                ln1_b: zeros(),
                q: Dense::init(dm, dm, rng),
                k: Dense::init(dm, dm, rng),
                v: Dense::init(dm, dm, rng),
                o: Dense::init(dm, dm, rng),
                ln2_g: ones(),
                ln2_b: zeros(),
                ff1: Dense::init(dm, 4 * dm, rng),
                ff2: Dense::init(4 * dm, dm, rng),
            })
            .collect();
        let output = Dense::init(dm, config.output_dim, rng);
        Ok(SetEncoderParams {
            config,
            weights: SetEncoderWeights {
                input,
                positional,
                layers,
                final_g: ones(),
                final_b: zeros(),
                output,
            },
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SetEncoderWeights<Var> {
        self.weights.map(&mut |m| tape.leaf(m.clone(), trainable))
    }

    /// Records the encoder on `tape`; returns `B x output_dim` unit rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &SetEncoderWeights<Var>,
        batch: &PhotoBatch,
    ) -> Result<Var> {
        let c = &self.config;
        if batch.max_photos != c.max_photos || batch.tokens.cols() != c.input_dim {
            return Err(Error::shape(
                format!("blocks of {} photos of dim {}", c.max_photos, c.input_dim),
                format!("blocks of {} photos of dim {}", batch.max_photos, batch.tokens.cols()),
            ));
        }
        if batch.is_empty() {
            return Err(Error::degenerate("empty photo batch"));
        }
        let x = tape.constant(batch.tokens.clone());
        let mut h = w.input.apply(tape, x)?;
        if c.positional {
            h = tape.add_tiled(h, w.positional)?;
        }
        for layer in &w.layers {
            let a = tape.layer_norm(h, layer.ln1_g, layer.ln1_b)?;
            let q = layer.q.apply(tape, a)?;
            let k = layer.k.apply(tape, a)?;
            let v = layer.v.apply(tape, a)?;
            let att = tape.block_attention(q, k, v, c.heads, c.max_photos, &batch.counts)?;
            let o = layer.o.apply(tape, att)?;
            h = tape.add(h, o)?;
            let a = tape.layer_norm(h, layer.ln2_g, layer.ln2_b)?;
            let f = layer.ff1.apply(tape, a)?;
            let f = tape.gelu(f);
            let f = layer.ff2.apply(tape, f)?;
            h = tape.add(h, f)?;
        }
        let h = tape.layer_norm(h, w.final_g, w.final_b)?;
        let pooled = match c.pooling {
            Pooling::LastPhoto => {
                let rows: Vec<usize> = batch
                    .counts
                    .iter()
                    .enumerate()
                    .map(|(b, &n)| b * c.max_photos + n - 1)
                    .collect();
                tape.gather_rows(h, &rows)?
            }
            Pooling::Mean => tape.block_mean(h, c.max_photos, &batch.counts)?,
        };
        let out = w.output.apply(tape, pooled)?;
        Ok(tape.normalize_rows(out))
    }

    /// Embeds a batch without recording gradients.
    pub fn encode_batch(&self, batch: &PhotoBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &w, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Embeds one photo set; rows of `photos` past `count` are ignored.
    pub fn encode(&self, photos: &Matrix, count: usize) -> Result<Vec<f64>> {
        let batch = PhotoBatch::new(self.config.max_photos, self.config.input_dim, &[(photos, count)])?;
        Ok(self.encode_batch(&batch)?.into_vec())
    }
}
