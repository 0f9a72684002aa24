use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, learning_rate, AdamConfig, AdamState, UpdateRule};
use super::loss::{LossConfig, LossState};
use crate::error::{Error, Result};
use crate::eval::{retrieval_metrics, RetrievalMetrics};
use crate::linalg::Matrix;
use crate::model::{Batch, DualEncoder, PhotoBatch, Tape};
use crate::synth::ListingRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
    /// Text-tower layers trained in this stage; all others stay frozen.
    #[serde(default)]
    pub unfrozen_text_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Warmup and cosine decay restart at every stage.
    pub warmup_steps: usize,
    /// Cosine horizon in optimizer steps; `None` uses the stage length.
    #[serde(default)]
    pub horizon_steps: Option<usize>,
    pub batch_size: usize,
    /// Micro-batches whose gradients are summed before each update.
    #[serde(default = "one")]
    pub accumulation: usize,
    /// Recall cut-offs recorded on the holdout after every epoch.
    #[serde(default = "default_ks")]
    pub eval_ks: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
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
            adam: AdamConfig::default(),
            warmup_steps: 100,
            horizon_steps: None,
            batch_size: 64,
            accumulation: 1,
            eval_ks: default_ks(),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, text_layers: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be at least 1".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("stage {i}: learning rate must be positive")));
            }
            if let Some(&bad) = s.unfrozen_text_layers.iter().find(|&&l| l >= text_layers) {
                return Err(Error::Config(format!(
                    "stage {i}: text layer {bad} does not exist ({text_layers} layers)"
                )));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// The schedule without its coarse stages: the last stage's rate and
    /// unfrozen layers run for the same total epochs.
    pub fn single_stage(&self) -> TrainSchedule {
        let last = self.stages.last();
        let stage = Stage {
            epochs: self.total_epochs(),
            lr: last.map_or(1e-3, |s| s.lr),
            unfrozen_text_layers: last.map(|s| s.unfrozen_text_layers.clone()).unwrap_or_default(),
        };
        TrainSchedule {
            stages: vec![stage],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub scale: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub holdout: Option<RetrievalMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn steps_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Per-epoch summary with holdout text-to-image and image-to-text metrics.
    pub fn epochs_csv(&self) -> String {
        let ks: Vec<usize> = self
            .epochs
            .iter()
            .find_map(|e| e.holdout.as_ref())
            .map(|m| m.recall_t2i.keys().copied().collect())
            .unwrap_or_default();
        let mut out = String::from("stage,epoch,step,mean_loss,mean_rank_t2i,mean_rank_i2t");
        for k in &ks {
            let _ = write!(out, ",recall_t2i@{k}");
        }
        for k in &ks {
            let _ = write!(out, ",recall_i2t@{k}");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{},{},{}", e.stage, e.epoch, e.step, e.mean_loss);
            match &e.holdout {
                Some(m) => {
                    let _ = write!(out, ",{},{}", m.mean_rank_t2i, m.mean_rank_i2t);
                    for v in m.recall_t2i.values().chain(m.recall_i2t.values()) {
                        let _ = write!(out, ",{v}");
                    }
                }
                None => out.push_str(&",".repeat(2 + 2 * ks.len())),
            }
            out.push('\n');
        }
        out
    }

    pub fn last_holdout(&self) -> Option<&RetrievalMetrics> {
        self.epochs.iter().rev().find_map(|e| e.holdout.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: DualEncoder,
    pub loss: LossState,
    pub log: TrainLog,
}

/// Builds the contrastive batch for `records[indices]`.
pub fn make_batch(model: &DualEncoder, records: &[ListingRecord], indices: &[usize]) -> Result<Batch> {
    let c = &model.photo.config;
    let sets: Vec<(&Matrix, usize)> = indices
        .iter()
        .map(|&i| (&records[i].photos, records[i].photo_count))
        .collect();
    let photos = PhotoBatch::new(c.max_photos, c.input_dim, &sets)?;
    let rows: Vec<&[f64]> = indices.iter().map(|&i| records[i].text_features.as_slice()).collect();
    Ok(Batch {
        photos,
        text: Matrix::from_rows(&rows)?,
    })
}

/// Embeds both sides of `records`: `(photo, text)`, one row per record.
pub fn embed_records(model: &DualEncoder, records: &[ListingRecord]) -> Result<(Matrix, Matrix)> {
    let sets: Vec<(&Matrix, usize)> = records.iter().map(|r| (&r.photos, r.photo_count)).collect();
    let photo = model.encode_photo_sets(&sets)?;
    let rows: Vec<&[f64]> = records.iter().map(|r| r.text_features.as_slice()).collect();
    let text = if rows.is_empty() {
        Matrix::zeros(0, model.text.config.input_dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok((photo, model.encode_texts(&text)?))
}

pub fn holdout_metrics(model: &DualEncoder, holdout: &[ListingRecord], ks: &[usize]) -> Result<RetrievalMetrics> {
    let (photo, text) = embed_records(model, holdout)?;
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= holdout.len()).collect();
    retrieval_metrics(&text, &photo, &ks)
}

/// Loss and gradients for one batch, in [`DualEncoder::param_specs`] order
/// followed by the loss scale and bias.
pub fn batch_gradients(model: &DualEncoder, loss: &LossState, batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let out = model.forward_batch(&mut tape, batch, false)?;
    let lv = loss.evaluate(tape.value(out.logits))?;
    let node = tape.scalar(lv.value, vec![(out.logits, lv.d_logits)])?;
    let grads = tape.backward(node)?;
    let mut all = out.gradients(&grads);
    all.push(Matrix::scalar(lv.d_log_scale));
    all.push(Matrix::scalar(lv.d_bias));
    Ok((lv.value, all))
}

/// Runs every stage of `schedule` over `train`, recording holdout metrics
/// after each epoch when `holdout` is given. Deterministic in the inputs.
/// Returned parameters are rounded to `f32`, the checkpoint precision.
pub fn train(
    train: &[ListingRecord],
    holdout: Option<&[ListingRecord]>,
    mut model: DualEncoder,
    loss_cfg: &LossConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    schedule.validate(model.text.config.layers)?;
    let mut loss = loss_cfg.initial_state()?;
    let mut log = TrainLog::default();
    if schedule.total_epochs() == 0 {
        return Ok(TrainOutcome { model, loss, log });
    }
    if train.len() < schedule.batch_size * schedule.accumulation {
        return Err(Error::Config(format!(
            "{} training listings cannot fill one step of {} x {}",
            train.len(),
            schedule.batch_size,
            schedule.accumulation
        )));
    }

    let b = schedule.batch_size;
    let micro_per_epoch = train.len() / b;
    let steps_per_epoch = micro_per_epoch / schedule.accumulation;
    let mut global_step = 0;
    let mut global_epoch = 0;

    for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        model.text.unfreeze_only(&stage.unfrozen_text_layers)?;
        let mut rules: Vec<UpdateRule> = model
            .param_specs()
            .iter()
            .map(|s| UpdateRule {
                trainable: s.trainable,
                decay: s.decay,
            })
            .collect();
        let loss_rule = UpdateRule {
            trainable: loss_cfg.learnable,
            decay: false,
        };
        rules.push(loss_rule);
        rules.push(UpdateRule {
            trainable: loss_cfg.learnable && loss.kind == super::LossKind::Siglip,
            decay: false,
        });
        let mut shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| t.shape()).collect();
        shapes.extend([(1, 1), (1, 1)]);
        let mut state = AdamState::new(&shapes);
        let horizon = schedule
            .horizon_steps
            .unwrap_or(stage.epochs * steps_per_epoch);
        let mut stage_step = 0;

        for _ in 0..stage.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
            rng.set_stream(global_epoch as u64 + 1);
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;

            for step in 0..steps_per_epoch {
                let mut sum: Option<Vec<Matrix>> = None;
                let mut step_loss = 0.0;
                for micro in 0..schedule.accumulation {
                    let start = (step * schedule.accumulation + micro) * b;
                    let batch = make_batch(&model, train, &order[start..start + b])?;
                    let (value, grads) = batch_gradients(&model, &loss, &batch)?;
                    step_loss += value / schedule.accumulation as f64;
                    match &mut sum {
                        Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                        None => sum = Some(grads),
                    }
                }
                let grads = sum.expect("accumulation >= 1");
                let grad_norm = grads
                    .iter()
                    .zip(&rules)
                    .filter(|(_, r)| r.trainable)
                    .map(|(g, _)| g.as_slice().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                let lr = learning_rate(stage.lr, stage_step, schedule.warmup_steps, horizon);

                let mut scale_m = Matrix::scalar(loss.log_scale);
                let mut bias_m = Matrix::scalar(loss.bias);
                let mut params = model.tensors_mut();
                params.push(&mut scale_m);
                params.push(&mut bias_m);
                adam_step(&mut params, &grads, &rules, &mut state, &schedule.adam, lr)?;
                loss.log_scale = scale_m.get(0, 0);
                loss.bias = bias_m.get(0, 0);

                log.steps.push(StepLog {
                    step: global_step,
                    stage: stage_idx,
                    epoch: global_epoch,
                    loss: step_loss,
                    lr,
                    grad_norm,
                    scale: loss.scale(),
                    bias: loss.bias,
                });
                epoch_loss += step_loss;
                global_step += 1;
                stage_step += 1;
            }

            let holdout = match holdout {
                Some(h) if h.len() >= 2 => Some(holdout_metrics(&model, h, &schedule.eval_ks)?),
                _ => None,
            };
            log.epochs.push(EpochLog {
                stage: stage_idx,
                epoch: global_epoch,
                step: global_step,
                mean_loss: epoch_loss / steps_per_epoch.max(1) as f64,
                holdout,
            });
            global_epoch += 1;
        }
    }
    model.round_to_f32();
    Ok(TrainOutcome { model, loss, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::LossKind;
    use crate::model::{SetEncoderConfig, TextEncoderConfig};
    use crate::synth::{generate, GeneratorConfig};

    fn tiny_model(seed: u64) -> DualEncoder {
        let photo = SetEncoderConfig {
            input_dim: 16,
            model_dim: 16,
            heads: 2,
            layers: 1,
            max_photos: 8,
            output_dim: 16,
            ..SetEncoderConfig::default()
        };
        let text = TextEncoderConfig {
            input_dim: 16,
            hidden_dim: 16,
            layers: 3,
            output_dim: 16,
        };
        DualEncoder::init(photo, text, seed).unwrap()
    }

    fn data(n: usize, seed: u64) -> Vec<ListingRecord> {
        generate(&GeneratorConfig {
            n_listings: n,
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn schedule(stages: Vec<Stage>, batch_size: usize) -> TrainSchedule {
        TrainSchedule {
            stages,
            warmup_steps: 5,
            batch_size,
            ..TrainSchedule::default()
        }
    }

    #[test]
    fn zero_epochs_return_the_initial_model() {
        let model = tiny_model(0);
        let s = schedule(vec![Stage { epochs: 0, lr: 1e-3, unfrozen_text_layers: vec![] }], 8);
        let out = train(&data(16, 0), None, model.clone(), &LossConfig::default(), &s).unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.steps.is_empty());
    }

    #[test]
    fn coarse_stage_leaves_text_tower_untouched() {
        let model = tiny_model(1);
        let records = data(64, 1);
        let s = schedule(vec![Stage { epochs: 2, lr: 1e-3, unfrozen_text_layers: vec![] }], 16);
        let out = train(&records, Some(&records[..20]), model.clone(), &LossConfig::default(), &s).unwrap();
        assert_eq!(out.model.text.weights, model.text.weights);
        assert_ne!(out.model.photo.weights, model.photo.weights);
        assert_eq!(out.log.steps.len(), 8);
        assert_eq!(out.log.epochs.len(), 2);
        assert!(out.log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));

        let s = schedule(vec![Stage { epochs: 1, lr: 1e-3, unfrozen_text_layers: vec![2] }], 16);
        let out = train(&records, None, model.clone(), &LossConfig::default(), &s).unwrap();
        let (before, after) = (&model.text.weights.layers, &out.model.text.weights.layers);
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
    }

    #[test]
    fn training_is_deterministic() {
        let records = data(48, 2);
        let s = schedule(
            vec![
                Stage { epochs: 1, lr: 1e-3, unfrozen_text_layers: vec![] },
                Stage { epochs: 1, lr: 5e-4, unfrozen_text_layers: vec![1, 2] },
            ],
            8,
        );
        let cfg = LossConfig { kind: LossKind::Siglip, ..LossConfig::default() };
        let a = train(&records, Some(&records[..10]), tiny_model(3), &cfg, &s).unwrap();
        let b = train(&records, Some(&records[..10]), tiny_model(3), &cfg, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.steps_jsonl().unwrap(), b.log.steps_jsonl().unwrap());
        assert_eq!(a.log.epochs_csv().lines().count(), 3);
    }

    #[test]
    fn accumulation_takes_one_step_per_group() {
        let records = data(40, 4);
        let s = schedule(vec![Stage { epochs: 2, lr: 1e-3, unfrozen_text_layers: vec![] }], 4);
        let acc = TrainSchedule { accumulation: 4, ..s };
        let out = train(&records, None, tiny_model(4), &LossConfig::default(), &acc).unwrap();
        // 10 micro-batches per epoch make 2 full groups of 4.
        assert_eq!(out.log.steps.len(), 4);
    }

    #[test]
    fn unknown_text_layer_is_a_config_error() {
        let s = schedule(vec![Stage { epochs: 1, lr: 1e-3, unfrozen_text_layers: vec![3] }], 8);
        let r = train(&data(16, 5), None, tiny_model(5), &LossConfig::default(), &s);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn single_batch_overfits() {
        let records = data(8, 6);
        let s = TrainSchedule {
            stages: vec![Stage { epochs: 500, lr: 3e-3, unfrozen_text_layers: vec![0, 1, 2] }],
            warmup_steps: 20,
            batch_size: 8,
            adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
            ..TrainSchedule::default()
        };
        let out = train(&records, None, tiny_model(6), &LossConfig::default(), &s).unwrap();
        assert_eq!(out.log.steps.len(), 500);
        let m = holdout_metrics(&out.model, &records, &[1]).unwrap();
        assert_eq!(m.recall_t2i[&1], 1.0);
    }
}
