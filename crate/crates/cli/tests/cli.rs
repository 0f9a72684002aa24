use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use bilisting::codec::CodeBlock;
use bilisting::config::PipelineConfig;
use bilisting::io::{load_embeddings, save_embeddings, write_embeddings, Embeddings};
use bilisting::model::load_checkpoint;
use bilisting::pipeline::init_model;
use bilisting::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bilisting"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn bilisting")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(noise: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.generator.n_listings = 200;
    cfg.generator.photo_noise = noise;
    cfg.generator.text_noise = noise;
    cfg.schedule.batch_size = 16;
    cfg.schedule.stages[0].epochs = 6;
    cfg.schedule.stages[1].epochs = 3;
    cfg.eval.sweep_dims = vec![2, 8, 64];
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

/// One generated and trained run shared by the read-only tests.
struct Run {
    _dir: TempDir,
    root: PathBuf,
    train_stdout: String,
}

fn trained() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("run");
        let cfg = write_config(dir.path(), &small_config(0.05));
        ok(&["--config", s(&cfg), "--out", s(&root), "gen"]);
        let train_stdout = ok(&["--out", s(&root), "train", "--data", s(&root)]);
        Run {
            _dir: dir,
            root,
            train_stdout,
        }
    })
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_dataset_and_prints_stats() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config(0.1));
    let out = dir.path().join("data");
    let stdout = ok(&["--config", s(&cfg), "--out", s(&out), "gen"]);
    assert!(stdout.contains("kept"), "{stdout}");
    for f in ["train/listings.jsonl", "train/photos.blemb", "holdout/text.blemb", "filter_stats.json", "config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config(0.1));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", s(&cfg), "--out", s(&a), "--seed", "9", "gen"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "--seed", "9", "gen", "--quiet"]);
    assert_eq!(files(&a), files(&b));
    let c = dir.path().join("c");
    ok(&["--config", s(&cfg), "--out", s(&c), "--seed", "10", "gen"]);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn malformed_config_exits_2_with_position() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"schema_version\": 1,\n  \"seed\": oops\n}").unwrap();
    let out = run(&["--config", s(&path), "--out", s(dir.path()), "gen"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3 column"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::default().to_json().unwrap()).unwrap();
    v["eval"]["extra"] = serde_json::json!(true);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let out = run(&["--config", s(&path), "--out", s(dir.path()), "gen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn quiet_suppresses_progress() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config(0.1));
    let stdout = ok(&["--config", s(&cfg), "--out", s(dir.path()), "--quiet", "gen"]);
    assert!(stdout.is_empty());
}

#[test]
fn zero_epoch_training_returns_the_initialization() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(0.1);
    for stage in &mut cfg.schedule.stages {
        stage.epochs = 0;
    }
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    ok(&["--config", s(&path), "--out", s(&out), "gen"]);
    ok(&["--out", s(&out), "train", "--data", s(&out)]);
    let (model, _) = load_checkpoint(&out.join("model.blmodel")).unwrap();
    assert_eq!(model, init_model(&cfg).unwrap());
}

#[test]
fn train_reports_both_directions_and_leaves_no_temp_files() {
    let run = trained();
    let last = run.train_stdout.lines().last().unwrap();
    for needle in ["text->image MR", "image->text MR", "R@1", "R@5", "R@10"] {
        assert!(last.contains(needle), "{needle} missing from {last}");
    }
    for (name, _) in files(&run.root) {
        let name = name.to_string_lossy().into_owned();
        assert!(!name.contains(".tmp"), "leftover {name}");
    }
    let log = fs::read_to_string(run.root.join("train_log.jsonl")).unwrap();
    let steps: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!steps.is_empty());
    for (i, step) in steps.iter().enumerate() {
        assert_eq!(step["step"], serde_json::json!(i));
    }
}

#[test]
fn training_is_deterministic() {
    let run = trained();
    let dir = TempDir::new().unwrap();
    let again = dir.path().join("again");
    ok(&["--out", s(&again), "--quiet", "train", "--data", s(&run.root)]);
    for f in ["model.blmodel", "train_log.jsonl", "epochs.csv", "holdout_photo.blemb"] {
        assert_eq!(fs::read(run.root.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_writes_full_report() {
    let run = trained();
    let dir = TempDir::new().unwrap();
    let ckpt = run.root.join("model.blmodel");
    let stdout = ok(&["--out", s(dir.path()), "eval", "--checkpoint", s(&ckpt), "--data", s(&run.root)]);
    assert!(stdout.contains("probe urban_rural"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["retrieval"]["n_queries"], serde_json::json!(100));
    assert_eq!(report["sweep"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let again = TempDir::new().unwrap();
    ok(&["--out", s(again.path()), "eval", "--checkpoint", s(&ckpt), "--data", s(&run.root)]);
    assert_eq!(files(dir.path()), files(again.path()));
}

#[test]
fn eval_rejects_incompatible_dims() {
    let run = trained();
    let dir = TempDir::new().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.generator.d = 12;
    cfg.photo_encoder.input_dim = 12;
    let path = write_config(dir.path(), &cfg);
    let ckpt = run.root.join("model.blmodel");
    let out = run_cli_eval(&path, &ckpt, &run.root, dir.path());
    assert_eq!(out.status.code(), Some(5));
}

fn run_cli_eval(cfg: &Path, ckpt: &Path, data: &Path, out: &Path) -> Output {
    run(&["--config", s(cfg), "--out", s(out), "eval", "--checkpoint", s(ckpt), "--data", s(data)])
}

#[test]
fn report_summarizes_artifacts() {
    let r = trained();
    let dir = TempDir::new().unwrap();
    for f in ["filter_stats.json", "model.blmodel", "epochs.csv"] {
        fs::copy(r.root.join(f), dir.path().join(f)).unwrap();
    }
    let stdout = ok(&["--out", s(dir.path()), "report"]);
    assert!(stdout.contains("## Data") && stdout.contains("## Training"), "{stdout}");
    assert!(dir.path().join("report.md").is_file());
    let empty = TempDir::new().unwrap();
    assert_eq!(run(&["--out", s(empty.path()), "report"]).status.code(), Some(1));
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = f64::from(z as f32);
    }
    m
}

fn emb_file(dir: &Path, name: &str, m: &Matrix) -> PathBuf {
    let path = dir.join(name);
    save_embeddings(&path, &Embeddings::F32(m.clone())).unwrap();
    path
}

#[test]
fn degenerate_opq_matches_pq() {
    let dir = TempDir::new().unwrap();
    let x = emb_file(dir.path(), "x.blemb", &random(300, 16, 1));
    let pq = dir.path().join("pq");
    let opq = dir.path().join("opq");
    let common = ["--input", s(&x), "--m", "4", "--k", "16", "--kmeans-iters", "10"];
    let mut a = vec!["--out", s(&pq), "quantize", "--kind", "pq"];
    a.extend(common);
    ok(&a);
    let mut b = vec!["--out", s(&opq), "quantize", "--kind", "opq", "--outer-iters", "0"];
    b.extend(common);
    ok(&b);
    for f in ["compression_report.json", "codes.blemb"] {
        assert_eq!(fs::read(pq.join(f)).unwrap(), fs::read(opq.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn wide_opq_emits_256_bytes_per_vector() {
    let dir = TempDir::new().unwrap();
    let n = 260;
    let x = emb_file(dir.path(), "x.blemb", &random(n, 1024, 2));
    let out = dir.path().join("q");
    let stdout = ok(&[
        "--out", s(&out), "quantize", "--input", s(&x), "--kind", "opq", "--m", "256", "--k", "256",
        "--rotated-dim", "1280", "--outer-iters", "1", "--kmeans-iters", "2",
    ]);
    assert!(stdout.contains("p50") && stdout.contains("p99"), "{stdout}");
    let codes = load_embeddings(&out.join("codes.blemb")).unwrap().into_codes().unwrap();
    assert_eq!(codes.bytes_per_vector, 256);
    let mut header = Vec::new();
    write_embeddings(&mut header, &Embeddings::U8(CodeBlock::new(0, 256, Vec::new()).unwrap())).unwrap();
    let len = fs::metadata(out.join("codes.blemb")).unwrap().len() as usize;
    assert_eq!(len, header.len() + 256 * n);
}

#[test]
fn decode_then_reencode_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let x = emb_file(dir.path(), "x.blemb", &random(200, 16, 3));
    for kind in ["pq", "opq", "scalar", "pca"] {
        let first = dir.path().join(format!("{kind}-1"));
        let second = dir.path().join(format!("{kind}-2"));
        let decoded = dir.path().join(format!("{kind}-decoded.blemb"));
        ok(&[
            "--out", s(&first), "quantize", "--input", s(&x), "--kind", kind, "--m", "4", "--k", "16",
            "--pca-dim", "8", "--decoded", s(&decoded),
        ]);
        let codec = first.join("codec.blcodec");
        ok(&["--out", s(&second), "quantize", "--input", s(&decoded), "--codec", s(&codec)]);
        assert_eq!(
            fs::read(first.join("codes.blemb")).unwrap(),
            fs::read(second.join("codes.blemb")).unwrap(),
            "{kind}"
        );
    }
}

#[test]
fn quantize_shape_mismatch_exits_4() {
    let dir = TempDir::new().unwrap();
    let x = emb_file(dir.path(), "x.blemb", &random(100, 16, 4));
    let y = emb_file(dir.path(), "y.blemb", &random(100, 8, 5));
    let first = dir.path().join("a");
    ok(&["--out", s(&first), "quantize", "--input", s(&x), "--kind", "scalar"]);
    let out = run(&[
        "--out", s(dir.path()), "quantize", "--input", s(&y), "--codec", s(&first.join("codec.blcodec")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let out = run(&["--out", s(dir.path()), "quantize", "--input", s(&x), "--kind", "pq", "--m", "5"]);
    assert_eq!(out.status.code(), Some(4));
}

fn hits(stdout: &str) -> Vec<(u64, f64)> {
    stdout
        .lines()
        .map(|l| {
            let (id, score) = l.split_once('\t').unwrap();
            (id.parse().unwrap(), score.parse().unwrap())
        })
        .collect()
}

#[test]
fn search_finds_the_query_itself_first() {
    let run = trained();
    let photo = run.root.join("holdout_photo.blemb");
    let ids = run.root.join("holdout_ids.json");
    let all: Vec<u64> = serde_json::from_str(&fs::read_to_string(&ids).unwrap()).unwrap();
    for &id in all.iter().take(5) {
        let stdout = ok(&[
            "search", "--photo-emb", s(&photo), "--ids", s(&ids), "--query-id", &id.to_string(), "--k", "3",
        ]);
        let h = hits(&stdout);
        assert_eq!(h.len(), 3);
        assert_eq!(h[0].0, id);
        assert!((h[0].1 - 1.0).abs() < 1e-6);
    }
}

#[test]
fn search_clamps_k_to_the_corpus() {
    let dir = TempDir::new().unwrap();
    let x = emb_file(dir.path(), "x.blemb", &random(7, 4, 6));
    let stdout = ok(&["search", "--photo-emb", s(&x), "--query-vec", s(&x), "--k", "50"]);
    let h = hits(&stdout);
    assert_eq!(h.len(), 7);
    assert_eq!(h[0].0, 0);
    assert!(h.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn search_errors_exit_6() {
    let dir = TempDir::new().unwrap();
    let x = emb_file(dir.path(), "x.blemb", &random(7, 4, 6));
    let q = emb_file(dir.path(), "q.blemb", &random(1, 5, 7));
    let out = run(&["search", "--photo-emb", s(&x), "--query-id", "99"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown listing id 99"));
    let out = run(&["search", "--photo-emb", s(&x), "--query-vec", s(&q)]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn multimodal_top1_agrees_with_photo_on_noiseless_pairs() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(0.0);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("run");
    ok(&["--config", s(&path), "--out", s(&root), "gen"]);
    ok(&["--out", s(&root), "--quiet", "train", "--data", s(&root)]);
    let ckpt = root.join("model.blmodel");
    let ids: Vec<u64> = serde_json::from_str(&fs::read_to_string(root.join("holdout_ids.json")).unwrap()).unwrap();
    for &id in ids.iter().take(10) {
        let q = id.to_string();
        let base = ["search", "--checkpoint", s(&ckpt), "--data", s(&root), "--query-id", &q, "--k", "1"];
        let mut photo = base.to_vec();
        photo.extend(["--modality", "photo"]);
        let mut multi = base.to_vec();
        multi.extend(["--modality", "multimodal"]);
        assert_eq!(hits(&ok(&photo))[0].0, hits(&ok(&multi))[0].0, "query {id}");
    }
}
