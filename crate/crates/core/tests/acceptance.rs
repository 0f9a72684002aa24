//! Acceptance criteria. Every test prints one PASS/FAIL line, then asserts.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bilisting::align::{
    batch_gradients, infonce_loss, siglip_loss, train, LossConfig, LossKind, LossState,
};
use bilisting::codec::{
    opq_train, opq_train_traced, per_vector_l2, pq_train, Codec, OpqParams, PcaCodec,
};
use bilisting::config::{CodecChoice, CodecSettings, PipelineConfig};
use bilisting::eval::{ndcg_binary, pca_dim_sweep, retrieval_metrics, RetrievalMetrics};
use bilisting::io::{load_embeddings, save_embeddings, Embeddings};
use bilisting::linalg::{percentiles, procrustes};
use bilisting::model::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, Batch, DualEncoder, PhotoBatch, Pooling,
    SetEncoderConfig, TextEncoderConfig,
};
use bilisting::pipeline::{evaluate, init_model, prepare_data, train_codec, train_model, PreparedData};
use bilisting::synth::{load_dataset, save_dataset};
use bilisting::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {tag} {name}: {}", detail.as_ref());
    assert!(pass, "criterion {id} ({name}) failed: {}", detail.as_ref());
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z;
    }
    m
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Standard desk runs shared by criteria 2, 3, 5 and 6.

struct SeedRun {
    seed: u64,
    data: PreparedData,
    untrained: RetrievalMetrics,
    two_stage: RetrievalMetrics,
    two_stage_time: Duration,
    single_stage: RetrievalMetrics,
    train_photo: Matrix,
    train_text: Matrix,
    test_photo: Matrix,
    test_text: Matrix,
}

fn standard_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| standard_run(s)).collect())
}

fn standard_run(seed: u64) -> SeedRun {
    let cfg = PipelineConfig::default().with_seed(seed);
    let data = prepare_data(&cfg).unwrap();
    let ks = [1, 5, 10];
    let untrained = evaluate(&init_model(&cfg).unwrap(), &data.train, &data.holdout, &cfg.eval)
        .unwrap()
        .retrieval;

    let start = Instant::now();
    let two = train_model(&cfg, &data.train, None).unwrap();
    let two_stage_time = start.elapsed();
    let report = evaluate(&two.model, &data.train, &data.holdout, &cfg.eval).unwrap();

    let single_schedule = cfg.train_schedule().single_stage();
    let single = train(&data.train, None, init_model(&cfg).unwrap(), &cfg.loss, &single_schedule).unwrap();
    let single_stage = evaluate(&single.model, &data.train, &data.holdout, &cfg.eval)
        .unwrap()
        .retrieval;

    let (train_photo, train_text) = bilisting::align::embed_records(&two.model, &data.train).unwrap();
    let (test_photo, test_text) = bilisting::align::embed_records(&two.model, &data.holdout).unwrap();
    let recomputed = retrieval_metrics(&test_text, &test_photo, &ks).unwrap();
    assert_eq!(recomputed, report.retrieval);
    SeedRun {
        seed,
        data,
        untrained,
        two_stage: report.retrieval,
        two_stage_time,
        single_stage,
        train_photo,
        train_text,
        test_photo,
        test_text,
    }
}

// ---------------------------------------------------------------------------

fn fd_model(seed: u64) -> DualEncoder {
    let photo = SetEncoderConfig {
        input_dim: 6,
        model_dim: 8,
        heads: 2,
        layers: 2,
        max_photos: 3,
        output_dim: 8,
        ..SetEncoderConfig::default()
    };
    let text = TextEncoderConfig {
        input_dim: 5,
        hidden_dim: 8,
        layers: 3,
        output_dim: 8,
    };
    let mut model = DualEncoder::init(photo, text, seed).unwrap();
    model.text.unfreeze_only(&[0, 1, 2]).unwrap();
    model
}

fn fd_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<Matrix> = (0..4).map(|_| gaussian(3, 6, &mut rng)).collect();
    let counts = [3, 1, 2, 3];
    let pairs: Vec<(&Matrix, usize)> = sets.iter().zip(counts).collect();
    Batch {
        photos: PhotoBatch::new(3, 6, &pairs).unwrap(),
        text: gaussian(4, 5, &mut rng),
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for kind in [LossKind::Infonce, LossKind::Siglip] {
            // Loss level, on cosine-range logits.
            let logits = gaussian(4, 4, &mut rng).map(f64::tanh);
            let state = LossState {
                kind,
                log_scale: 1.0,
                bias: -1.5,
            };
            let base = state.evaluate(&logits).unwrap();
            for e in 0..16 {
                let mut p = logits.clone();
                p.as_mut_slice()[e] += h;
                let mut m = logits.clone();
                m.as_mut_slice()[e] -= h;
                let num = (state.evaluate(&p).unwrap().value - state.evaluate(&m).unwrap().value) / (2.0 * h);
                worst = worst.max(rel(base.d_logits.as_slice()[e], num));
                checked += 1;
            }
            let shifted = |ds: f64, db: f64| {
                LossState {
                    kind,
                    log_scale: state.log_scale + ds,
                    bias: state.bias + db,
                }
                .evaluate(&logits)
                .unwrap()
                .value
            };
            worst = worst.max(rel(base.d_log_scale, (shifted(h, 0.0) - shifted(-h, 0.0)) / (2.0 * h)));
            if kind == LossKind::Siglip {
                worst = worst.max(rel(base.d_bias, (shifted(0.0, h) - shifted(0.0, -h)) / (2.0 * h)));
            }

            // Full path: towers, logits and loss.
            let model = fd_model(seed);
            let batch = fd_batch(seed + 10);
            let loss = LossConfig {
                kind,
                ..LossConfig::default()
            }
            .initial_state()
            .unwrap();
            let (_, analytic) = batch_gradients(&model, &loss, &batch).unwrap();
            let n_tensors = model.tensors().len();
            for t in 0..n_tensors {
                for e in 0..model.tensors()[t].len() {
                    let mut plus = model.clone();
                    plus.tensors_mut()[t].as_mut_slice()[e] += h;
                    let mut minus = model.clone();
                    minus.tensors_mut()[t].as_mut_slice()[e] -= h;
                    let num = (batch_gradients(&plus, &loss, &batch).unwrap().0
                        - batch_gradients(&minus, &loss, &batch).unwrap().0)
                        / (2.0 * h);
                    worst = worst.max(rel(analytic[t].as_slice()[e], num));
                    checked += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient correctness",
        worst < 1e-4 && secs < 30.0,
        format!("{checked} partials, worst relative error {worst:.2e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_02_alignment_recovery() {
    let runs = standard_runs();
    let mut pass = true;
    let mut detail = Vec::new();
    for r in runs {
        let r1 = r.two_stage.recall_at_t2i(1);
        let mr = r.two_stage.mean_rank_t2i;
        let chance_hits = r.untrained.recall_at_t2i(1) * r.untrained.n_queries as f64;
        let secs = r.two_stage_time.as_secs_f64();
        pass &= r.two_stage.n_queries == 512 && r1 >= 0.90 && mr <= 2.0 && chance_hits <= 3.0 && secs < 600.0;
        detail.push(format!(
            "seed {}: R@1 {r1:.4} MR {mr:.3} untrained hits {chance_hits}/512 train {} listings {secs:.0}s",
            r.seed,
            r.data.train.len()
        ));
    }
    verdict(2, "alignment recovery", pass, detail.join("; "));
}

#[test]
fn criterion_03_coarse_then_fine() {
    let runs = standard_runs();
    let n = runs.len() as f64;
    let two = runs.iter().map(|r| r.two_stage.mean_rank_t2i).sum::<f64>() / n;
    let one = runs.iter().map(|r| r.single_stage.mean_rank_t2i).sum::<f64>() / n;
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.two_stage.mean_rank_t2i, r.single_stage.mean_rank_t2i))
        .collect();
    verdict(
        3,
        "coarse-then-fine benefit",
        two <= one * 1.05,
        format!("mean rank two-stage {two:.4} vs single-stage {one:.4} (per seed {})", per.join(", ")),
    );
}

/// Independent clustered blocks, mixed by a random rotation.
fn rotated_clustered(d: usize, m: usize, k: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = d / m;
    let centers: Vec<Matrix> = (0..m).map(|_| gaussian(k, block, &mut rng)).collect();
    let mut y = gaussian(n, d, &mut rng).scale(0.05);
    for i in 0..n {
        for (j, c) in centers.iter().enumerate() {
            let pick = rng.random_range(0..k);
            for t in 0..block {
                y.row_mut(i)[j * block + t] += c.get(pick, t);
            }
        }
    }
    let rotation = procrustes(&gaussian(d, d, &mut rng), &Matrix::identity(d)).unwrap();
    y.matmul(&rotation).unwrap()
}

#[test]
fn criterion_04_opq_beats_pq() {
    let start = Instant::now();
    let (d, m, k, n) = (32, 4, 16, 4000);
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let x = rotated_clustered(d, m, k, n, seed);
        let pq = pq_train(&x, m, k, 25, seed).unwrap();
        let params = OpqParams {
            m,
            k,
            rotated_dim: d,
            outer_iters: 20,
            kmeans_iters: 25,
            seed,
        };
        let (opq, trace) = opq_train_traced(&x, &params).unwrap();
        let p50 = |e: Vec<f64>| percentiles(&e, &[0.5]).unwrap()[0];
        let e_pq = p50(per_vector_l2(&x, &pq.decode(&pq.encode(&x).unwrap()).unwrap()).unwrap());
        let e_opq = p50(per_vector_l2(&x, &opq.decode(&opq.encode(&x).unwrap()).unwrap()).unwrap());
        let monotone = trace.objective.windows(2).all(|w| w[1] <= w[0]);
        let reduction = 1.0 - e_opq / e_pq;
        pass &= reduction >= 0.20 && monotone;
        detail.push(format!(
            "seed {seed}: p50 PQ {e_pq:.4} OPQ {e_opq:.4} ({:.1}% lower), monotone {monotone}",
            100.0 * reduction
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    verdict(4, "OPQ vs PQ", pass, format!("{}; {secs:.1}s", detail.join("; ")));
}

#[test]
fn criterion_05_quantization_fidelity() {
    let mut pass = true;
    let mut detail = Vec::new();
    for r in standard_runs() {
        let sweep = |q: bool| {
            pca_dim_sweep(&r.train_photo, &r.train_text, &r.test_photo, &r.test_text, &[40], q, &[10]).unwrap()[0]
                .metrics
                .recall_at_t2i(10)
        };
        let (float, quant) = (sweep(false), sweep(true));
        let delta = (float - quant).abs();
        pass &= delta <= 0.01;
        detail.push(format!("seed {}: R@10 float {float:.4} 8-bit {quant:.4}", r.seed));
    }
    verdict(5, "8-bit fidelity at PCA 40", pass, detail.join("; "));
}

#[test]
fn criterion_06_pca_diminishing_returns() {
    let mut pass = true;
    let mut detail = Vec::new();
    for r in standard_runs() {
        let full = r.train_photo.cols();
        let rows = pca_dim_sweep(
            &r.train_photo,
            &r.train_text,
            &r.test_photo,
            &r.test_text,
            &[2, 8, 32, full],
            false,
            &[10],
        )
        .unwrap();
        let rec: Vec<f64> = rows.iter().map(|row| row.metrics.recall_at_t2i(10)).collect();
        let early = rec[1] - rec[0];
        let late = rec[3] - rec[2];
        pass &= late < early;
        detail.push(format!(
            "seed {}: R@10 {:.4}/{:.4}/{:.4}/{:.4} gain 2->8 {early:.4} 32->{full} {late:.4}",
            r.seed, rec[0], rec[1], rec[2], rec[3]
        ));
    }
    verdict(6, "PCA diminishing returns", pass, detail.join("; "));
}

#[test]
fn criterion_07_metric_exactness() {
    let ids = |v: &[u64]| v.iter().copied().collect::<HashSet<u64>>();
    let a = ndcg_binary(&[7, 8, 9], &ids(&[7]), 3).unwrap();
    let b = ndcg_binary(&[1, 2], &ids(&[2]), 2).unwrap();
    let c = ndcg_binary(&[1, 2, 3], &ids(&[1, 3]), 3).unwrap();
    let c_ref = (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2());
    let ndcg_ok = (a - 1.0).abs() < 1e-9
        && (b - 1.0 / 3f64.log2()).abs() < 1e-9
        && (b - 0.6309).abs() < 1e-4
        && (c - c_ref).abs() < 1e-9
        && (c - 0.9197).abs() < 1e-4;

    // Gallery row i mixes e_i and, more strongly, e_{i+1}: every true match
    // is beaten only by its neighbour.
    let n = 6;
    let query = Matrix::identity(n);
    let mut gallery = Matrix::zeros(n, n);
    for i in 0..n {
        gallery.set(i, i, 0.6);
        gallery.set(i, (i + 1) % n, 0.8);
    }
    let m = retrieval_metrics(&query, &gallery, &[1, 5]).unwrap();
    let rank_ok = m.recall_t2i[&1] == 0.0
        && m.recall_t2i[&5] == 1.0
        && m.mean_rank_t2i == 2.0
        && m.mean_rank_i2t == 2.0;

    let mut uniform_ok = true;
    for b in 2..=16 {
        let v = infonce_loss(&Matrix::filled(b, b, 0.3), 14.0).unwrap().value;
        uniform_ok &= (v - (b as f64).ln()).abs() < 1e-12;
    }
    let siglip_ok = (siglip_loss(&Matrix::zeros(1, 1), 1.0, 0.0).unwrap().value - 2f64.ln()).abs() < 1e-12;
    verdict(
        7,
        "metric exactness",
        ndcg_ok && rank_ok && uniform_ok && siglip_ok,
        format!(
            "ndcg {a:.9}/{b:.9}/{c:.9}, rank-2 construction R@1 {} R@5 {} MR {}, uniform InfoNCE = ln B: {uniform_ok}",
            m.recall_t2i[&1], m.recall_t2i[&5], m.mean_rank_t2i
        ),
    );
}

#[test]
fn criterion_08_code_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian(260, 1024, &mut rng);
    let opq = Codec::Opq(
        opq_train(
            &x,
            &OpqParams {
                m: 256,
                k: 256,
                rotated_dim: 1280,
                outer_iters: 1,
                kmeans_iters: 2,
                seed: 8,
            },
        )
        .unwrap(),
    );
    let codes = opq.encode(&x).unwrap();
    let opq_ok = opq.bytes_per_vector() == 256 && codes.bytes_per_vector == 256 && codes.codes.len() == 256 * 260;

    let y = gaussian(500, 64, &mut rng);
    let pca = Codec::Pca(PcaCodec::fit(&y, 40).unwrap());
    let pcodes = pca.encode(&y).unwrap();
    let pca_ok = pca.bytes_per_vector() == 40 && pcodes.codes.len() == 40 * 500;
    verdict(
        8,
        "code layout",
        opq_ok && pca_ok,
        format!(
            "OPQ m=256 on 1024-d: {} B/vector; PCA-40 + 8-bit: {} B/vector",
            codes.bytes_per_vector, pcodes.bytes_per_vector
        ),
    );
}

fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(seed);
    cfg.generator.n_listings = 160;
    cfg.schedule.batch_size = 16;
    cfg.schedule.stages[0].epochs = 2;
    cfg.schedule.stages[1].epochs = 2;
    cfg
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_09_determinism_and_persistence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(5);
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let d1 = prepare_data(&cfg).unwrap();
    let d2 = prepare_data(&cfg).unwrap();
    save_dataset(&tmp.path().join("a"), &d1.train).unwrap();
    save_dataset(&tmp.path().join("b"), &d2.train).unwrap();
    checks.push(("dataset files", dir_bytes(&tmp.path().join("a")) == dir_bytes(&tmp.path().join("b"))));
    checks.push(("dataset load", load_dataset(&tmp.path().join("a")).unwrap() == d1.train));

    let t1 = train_model(&cfg, &d1.train, Some(&d1.holdout)).unwrap();
    let t2 = train_model(&cfg, &d2.train, Some(&d2.holdout)).unwrap();
    let meta = serde_json::json!({ "loss": t1.loss });
    let c1 = checkpoint_bytes(&t1.model, &meta).unwrap();
    checks.push(("checkpoint bytes", c1 == checkpoint_bytes(&t2.model, &meta).unwrap()));
    checks.push(("train log", t1.log == t2.log));
    let ckpt = tmp.path().join("m.blmodel");
    save_checkpoint(&ckpt, &t1.model, &meta).unwrap();
    let (loaded, loaded_meta) = load_checkpoint(&ckpt).unwrap();
    checks.push(("checkpoint round trip", loaded == t1.model && loaded_meta == meta));
    checks.push(("checkpoint re-save", checkpoint_bytes(&loaded, &meta).unwrap() == c1));

    let e1 = evaluate(&t1.model, &d1.train, &d1.holdout, &cfg.eval).unwrap();
    let e2 = evaluate(&loaded, &d2.train, &d2.holdout, &cfg.eval).unwrap();
    checks.push((
        "eval report",
        serde_json::to_string(&e1).unwrap() == serde_json::to_string(&e2).unwrap(),
    ));

    let (photo, _) = bilisting::align::embed_records(&t1.model, &d1.holdout).unwrap();
    let photo = photo.map(|v| f64::from(v as f32));
    let emb = tmp.path().join("e.blemb");
    save_embeddings(&emb, &Embeddings::F32(photo.clone())).unwrap();
    checks.push(("f32 embeddings round trip", load_embeddings(&emb).unwrap() == Embeddings::F32(photo.clone())));

    for kind in [CodecChoice::Pq, CodecChoice::Opq, CodecChoice::Scalar, CodecChoice::Pca] {
        let settings = CodecSettings {
            kind,
            m: 8,
            k: 16,
            outer_iters: 3,
            kmeans_iters: 5,
            pca_dim: 16,
            ..CodecSettings::default()
        };
        let a = train_codec(&settings, &photo, 3).unwrap();
        let b = train_codec(&settings, &photo, 3).unwrap();
        let path = tmp.path().join(format!("{kind:?}.blcodec"));
        a.save(&path).unwrap();
        let loaded = Codec::load(&path).unwrap();
        let codes = a.encode(&photo).unwrap();
        let cpath = tmp.path().join(format!("{kind:?}.codes"));
        save_embeddings(&cpath, &Embeddings::U8(codes.clone())).unwrap();
        let ok = a.to_bytes().unwrap() == b.to_bytes().unwrap()
            && loaded == a
            && loaded.encode(&photo).unwrap() == codes
            && load_embeddings(&cpath).unwrap() == Embeddings::U8(codes);
        checks.push((
            match kind {
                CodecChoice::Pq => "pq codec",
                CodecChoice::Opq => "opq codec",
                CodecChoice::Scalar => "scalar codec",
                CodecChoice::Pca => "pca codec",
            },
            ok,
        ));
    }
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        9,
        "determinism and persistence",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} artifact checks bit-exact", checks.len())
        } else {
            format!("mismatch in {}", failed.join(", "))
        },
    );
}

#[test]
fn criterion_10_masking_and_order() {
    let photo = SetEncoderConfig {
        input_dim: 16,
        model_dim: 16,
        heads: 4,
        layers: 2,
        max_photos: 8,
        output_dim: 16,
        ..SetEncoderConfig::default()
    };
    let text = TextEncoderConfig {
        output_dim: 16,
        ..TextEncoderConfig::default()
    };
    let model = DualEncoder::init(photo.clone(), text.clone(), 10).unwrap();
    let ablation = DualEncoder::init(
        SetEncoderConfig {
            pooling: Pooling::Mean,
            positional: false,
            ..photo
        },
        text,
        10,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut padding_ok = true;
    let mut min_order = f64::INFINITY;
    let mut max_ablation = 0.0f64;
    for count in 2..=8 {
        let photos = gaussian(count, 16, &mut rng);
        let base = model.photo.encode(&photos, count).unwrap();
        let junk = gaussian(8 - count, 16, &mut rng).scale(100.0);
        let padded = Matrix::vstack(&[&photos, &junk]).unwrap();
        padding_ok &= model.photo.encode(&padded, count).unwrap() == base;
        let batch = make_batch_of(&[(&padded, count), (&photos, count)]);
        let both = model.photo.encode_batch(&batch).unwrap();
        padding_ok &= both.row(0) == base.as_slice() && both.row(1) == base.as_slice();

        let mut order: Vec<usize> = (0..count).collect();
        order.rotate_left(1);
        let permuted = photos.select_rows(&order);
        min_order = min_order.min(l2(&base, &model.photo.encode(&permuted, count).unwrap()));
        max_ablation = max_ablation.max(l2(
            &ablation.photo.encode(&photos, count).unwrap(),
            &ablation.photo.encode(&permuted, count).unwrap(),
        ));
    }
    verdict(
        10,
        "masking and order sensitivity",
        padding_ok && min_order > 1e-6 && max_ablation < 1e-6,
        format!(
            "padding bit-exact {padding_ok}, min permuted L2 {min_order:.3e}, max mean-pool permuted L2 {max_ablation:.3e}"
        ),
    );
}

fn make_batch_of(sets: &[(&Matrix, usize)]) -> PhotoBatch {
    PhotoBatch::new(8, 16, sets).unwrap()
}
