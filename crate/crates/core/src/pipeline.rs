//! End-to-end stages shared by the command-line tool and the tests.

use serde::{Deserialize, Serialize};

use crate::align::{embed_records, train, TrainOutcome};
use crate::codec::{opq_train, pq_train, Codec, OpqParams, PcaCodec, ScalarQuantizer};
use crate::config::{CodecChoice, CodecSettings, EvalSettings, PipelineConfig};
use crate::error::Result;
use crate::eval::{pca_dim_sweep, probe_attributes, retrieval_metrics, EvalReport};
use crate::linalg::Matrix;
use crate::model::DualEncoder;
use crate::synth::{apply_filters, generate, split, FilterStats, ListingRecord, World};

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<ListingRecord>,
    pub holdout: Vec<ListingRecord>,
    /// Filtering applies to the training side only; the holdout gallery
    /// keeps its full size.
    pub stats: FilterStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub holdout: usize,
    pub filter: FilterStats,
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    let gen = cfg.generator_config();
    let records = generate(&gen)?;
    let (train, holdout) = split(records, cfg.holdout_fraction, cfg.seeds().split)?;
    let (train, stats) = if cfg.prelim_filter {
        let world = World::new(&gen)?;
        let scorer = world.prelim_scorer()?;
        apply_filters(train, &cfg.filters, Some(&scorer))
    } else {
        apply_filters(train, &cfg.filters, None)
    };
    Ok(PreparedData { train, holdout, stats })
}

pub fn init_model(cfg: &PipelineConfig) -> Result<DualEncoder> {
    DualEncoder::init(cfg.photo_encoder.clone(), cfg.text_encoder.clone(), cfg.seeds().init)
}

pub fn train_model(
    cfg: &PipelineConfig,
    train_set: &[ListingRecord],
    holdout: Option<&[ListingRecord]>,
) -> Result<TrainOutcome> {
    train(train_set, holdout, init_model(cfg)?, &cfg.loss, &cfg.train_schedule())
}

/// Retrieval on the holdout pairs, attribute probes fitted on the training
/// photo embeddings, and the PCA sweep when dims are configured.
pub fn evaluate(
    model: &DualEncoder,
    train_set: &[ListingRecord],
    holdout: &[ListingRecord],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let (photo, text) = embed_records(model, holdout)?;
    let ks: Vec<usize> = settings.ks.iter().copied().filter(|&k| k <= holdout.len()).collect();
    let retrieval = retrieval_metrics(&text, &photo, &ks)?;
    let (train_photo, train_text) = embed_records(model, train_set)?;
    let probes = if train_set.len() >= settings.probe_k && !holdout.is_empty() {
        let ta: Vec<_> = train_set.iter().map(|r| &r.attributes).collect();
        let ha: Vec<_> = holdout.iter().map(|r| &r.attributes).collect();
        Some(probe_attributes(&train_photo, &ta, &photo, &ha, settings.probe_k)?)
    } else {
        None
    };
    let sweep = if settings.sweep_dims.is_empty() {
        Vec::new()
    } else {
        pca_dim_sweep(
            &train_photo,
            &train_text,
            &photo,
            &text,
            &settings.sweep_dims,
            settings.quantize_8bit,
            &ks,
        )?
    };
    Ok(EvalReport {
        retrieval,
        probes,
        sweep,
    })
}

pub fn train_codec(settings: &CodecSettings, x: &Matrix, seed: u64) -> Result<Codec> {
    Ok(match settings.kind {
        CodecChoice::Pq => Codec::Pq(pq_train(x, settings.m, settings.k, settings.kmeans_iters, seed)?),
        CodecChoice::Opq => Codec::Opq(opq_train(
            x,
            &OpqParams {
                m: settings.m,
                k: settings.k,
                rotated_dim: settings.rotated_dim.unwrap_or(x.cols()),
                outer_iters: settings.outer_iters,
                kmeans_iters: settings.kmeans_iters,
                seed,
            },
        )?),
        CodecChoice::Scalar => Codec::Scalar(ScalarQuantizer::fit(x)?),
        CodecChoice::Pca => Codec::Pca(PcaCodec::fit(x, settings.pca_dim)?),
    })
}
