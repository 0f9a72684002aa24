//! The single JSON document that drives a pipeline run.

use serde::{Deserialize, Serialize};

use crate::align::{LossConfig, Stage, TrainSchedule};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_PROBE_K;
use crate::model::{SetEncoderConfig, TextEncoderConfig};
use crate::synth::{FilterConfig, GeneratorConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecChoice {
    Pq,
    Opq,
    Scalar,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSettings {
    pub kind: CodecChoice,
    /// PQ/OPQ sub-spaces.
    pub m: usize,
    /// PQ/OPQ centroids per sub-space.
    pub k: usize,
    /// OPQ working dimension; `None` keeps the input dimension.
    #[serde(default)]
    pub rotated_dim: Option<usize>,
    pub outer_iters: usize,
    pub kmeans_iters: usize,
    /// Components kept by the PCA codec.
    pub pca_dim: usize,
}

impl Default for CodecSettings {
    fn default() -> Self {
        CodecSettings {
            kind: CodecChoice::Opq,
            m: 16,
            k: 256,
            rotated_dim: None,
            outer_iters: 10,
            kmeans_iters: 25,
            pca_dim: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub probe_k: usize,
    /// PCA sweep dimensions; empty disables the sweep.
    #[serde(default)]
    pub sweep_dims: Vec<usize>,
    #[serde(default)]
    pub quantize_8bit: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![1, 5, 10],
            probe_k: DEFAULT_PROBE_K,
            sweep_dims: vec![2, 8, 32, 64],
            quantize_8bit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub filters: FilterConfig,
    /// Score alignment with the generating maps before training.
    #[serde(default = "default_true")]
    pub prelim_filter: bool,
    pub holdout_fraction: f64,
    pub photo_encoder: SetEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub codec: CodecSettings,
    pub eval: EvalSettings,
}

fn default_true() -> bool {
    true
}

impl Default for PipelineConfig {
    /// The standard desk configuration: 1024 low-noise listings split evenly
    /// into a training set and a 512-listing holdout gallery.
    fn default() -> Self {
        let generator = GeneratorConfig {
            photo_noise: 0.05,
            text_noise: 0.05,
            ..GeneratorConfig::default()
        };
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            photo_encoder: SetEncoderConfig {
                input_dim: generator.d,
                model_dim: 32,
                max_photos: generator.max_photos,
                ..SetEncoderConfig::default()
            },
            text_encoder: TextEncoderConfig {
                input_dim: generator.d_text,
                ..TextEncoderConfig::default()
            },
            generator,
            filters: FilterConfig::default(),
            prelim_filter: true,
            holdout_fraction: 0.5,
            loss: LossConfig::default(),
            schedule: TrainSchedule {
                stages: vec![
                    Stage {
                        epochs: 30,
                        lr: 1e-3,
                        unfrozen_text_layers: vec![],
                    },
                    Stage {
                        epochs: 15,
                        lr: 5e-4,
                        unfrozen_text_layers: vec![2, 3],
                    },
                ],
                warmup_steps: 20,
                ..TrainSchedule::default()
            },
            codec: CodecSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub generator: u64,
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub codec: u64,
}

impl PipelineConfig {
    /// Parses strictly: unknown fields and unknown schema versions fail,
    /// with line and column in the message.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not recognized (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.generator
            .validate()
            .map_err(|e| Error::Config(format!("generator: {e}")))?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        self.photo_encoder.validate()?;
        self.text_encoder.validate()?;
        let p = &self.photo_encoder;
        let t = &self.text_encoder;
        if p.input_dim != self.generator.d || p.max_photos != self.generator.max_photos {
            return Err(Error::Config(
                "photo_encoder input_dim/max_photos must match the generator".into(),
            ));
        }
        if t.input_dim != self.generator.d_text {
            return Err(Error::Config("text_encoder input_dim must match generator d_text".into()));
        }
        if p.output_dim != t.output_dim {
            return Err(Error::Config("tower output dims differ".into()));
        }
        self.loss.initial_state()?;
        self.schedule.validate(t.layers)?;
        if let Some(&bad) = self.eval.sweep_dims.iter().find(|&&d| d == 0 || d > p.output_dim) {
            return Err(Error::Config(format!("sweep dim {bad} outside [1, {}]", p.output_dim)));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        let mix = |k: u64| s.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Seeds {
            generator: mix(1),
            split: mix(2),
            init: mix(3),
            train: mix(4),
            codec: mix(5),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seeds().generator,
            ..self.generator.clone()
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seeds().train,
            ..self.schedule.clone()
        }
    }
}
