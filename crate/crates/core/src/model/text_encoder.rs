use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{join, Dense, Visit};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub output_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            input_dim: 16,
            hidden_dim: 64,
            layers: 4,
            output_dim: 64,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("text encoder needs at least one layer".into()));
        }
        Ok(())
    }

    fn layer_dims(&self, i: usize) -> (usize, usize) {
        let fan_in = if i == 0 { self.input_dim } else { self.hidden_dim };
        let fan_out = if i + 1 == self.layers {
            self.output_dim
        } else {
            self.hidden_dim
        };
        (fan_in, fan_out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderWeights<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T> TextEncoderWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TextEncoderWeights<U> {
        TextEncoderWeights {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

impl<T> Visit<T> for TextEncoderWeights<T> {
    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(p, &format!("layers.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for l in &mut self.layers {
            l.visit_mut(out);
        }
    }
}

/// Stack of affine layers with GELU between them; hidden-to-hidden layers
/// are residual. Each layer can be frozen independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    pub config: TextEncoderConfig,
    pub frozen: Vec<bool>,
    pub weights: TextEncoderWeights<Matrix>,
}

impl TextEncoderParams {
    pub fn init(config: TextEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| {
                let (a, b) = config.layer_dims(i);
                Dense::init(a, b, rng)
            })
            .collect();
        Ok(TextEncoderParams {
            frozen: vec![false; config.layers],
            config,
            weights: TextEncoderWeights { layers },
        })
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    /// Freezes everything except the listed layer indices.
    pub fn unfreeze_only(&mut self, layers: &[usize]) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&i| i >= self.config.layers) {
            return Err(Error::Config(format!(
                "text layer {bad} does not exist ({} layers)",
                self.config.layers
            )));
        }
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = !layers.contains(&i);
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TextEncoderWeights<Var> {
        TextEncoderWeights {
            layers: self
                .weights
                .layers
                .iter()
                .zip(&self.frozen)
                .map(|(l, &frozen)| l.map(&mut |m| tape.leaf(m.clone(), trainable && !frozen)))
                .collect(),
        }
    }

    /// Records the tower on `tape` for `x: B x input_dim`; returns unit rows.
    pub fn forward(&self, tape: &mut Tape, w: &TextEncoderWeights<Var>, x: &Matrix) -> Result<Var> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                format!("{} columns", self.config.input_dim),
                format!("{}", x.cols()),
            ));
        }
        let mut h = tape.constant(x.clone());
        let last = w.layers.len() - 1;
        for (i, layer) in w.layers.iter().enumerate() {
            let z = layer.apply(tape, h)?;
            if i == last {
                h = z;
            } else {
                let a = tape.gelu(z);
                let (fan_in, fan_out) = self.config.layer_dims(i);
                h = if i > 0 && fan_in == fan_out {
                    tape.add(h, a)?
                } else {
                    a
                };
            }
        }
        Ok(tape.normalize_rows(h))
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &w, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode(&self, text: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&Matrix::row_vector(text))?.into_vec())
    }
}
