use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bilisting::align::{embed_records, holdout_metrics, LossState};
use bilisting::codec::{compression_report, render_table, Codec};
use bilisting::config::{CodecChoice, PipelineConfig};
use bilisting::eval::{multimodal, sweep_csv, top_k, EvalReport, Modality};
use bilisting::io::{load_embeddings, save_embeddings, write_atomic, Embeddings};
use bilisting::model::{load_checkpoint, save_checkpoint, DualEncoder};
use bilisting::pipeline::{evaluate, prepare_data, train_model, train_codec};
use bilisting::synth::{load_dataset, save_dataset, FilterStats, ListingRecord};
use bilisting::{Error, Matrix, Result};

use crate::{Cli, Command, KindArg, QuantizeArgs, SearchArgs, SplitArg};

pub const CONFIG_FILE: &str = "config.json";
pub const FILTER_STATS_FILE: &str = "filter_stats.json";
pub const CHECKPOINT_FILE: &str = "model.blmodel";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const EVAL_FILE: &str = "eval_report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CODEC_FILE: &str = "codec.blcodec";
pub const CODES_FILE: &str = "codes.blemb";
pub const COMPRESSION_FILE: &str = "compression_report.json";
pub const REPORT_FILE: &str = "report.md";

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn say(&self, line: impl AsRef<str>) {
        if !self.cli.global.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.cli.global.out)?;
        Ok(self.cli.global.out.join(name))
    }

    /// `--config`, else the config saved beside `data`, else the default.
    fn config(&self, data: Option<&Path>) -> Result<PipelineConfig> {
        let path = match (&self.cli.global.config, data) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(d)) if d.join(CONFIG_FILE).is_file() => Some(d.join(CONFIG_FILE)),
            _ => None,
        };
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                PipelineConfig::from_json(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), strip(&e))))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.cli.global.seed {
            cfg = cfg.with_seed(seed);
        }
        Ok(cfg)
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Gen => gen(&ctx),
        Command::Train { data } => train(&ctx, data),
        Command::Quantize(args) => quantize(&ctx, args),
        Command::Eval { checkpoint, data } => eval(&ctx, checkpoint, data),
        Command::Search(args) => search(&ctx, args),
        Command::Report => report(&ctx),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn gen(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config(None)?;
    let data = prepare_data(&cfg)?;
    save_dataset(&ctx.out("train")?, &data.train)?;
    save_dataset(&ctx.out("holdout")?, &data.holdout)?;
    write_json(&ctx.out(FILTER_STATS_FILE)?, &data.stats)?;
    write_atomic(&ctx.out(CONFIG_FILE)?, format!("{}\n", cfg.to_json()?).as_bytes())?;
    ctx.say(format!(
        "generated {} train + {} holdout listings; {}",
        data.train.len(),
        data.holdout.len(),
        data.stats.summary()
    ));
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Vec<ListingRecord>> {
    load_dataset(&data.join(split))
}

fn train(ctx: &Ctx, data: &Path) -> Result<()> {
    let cfg = ctx.config(Some(data))?;
    let train_set = load_split(data, "train")?;
    let holdout = if data.join("holdout").is_dir() {
        load_split(data, "holdout")?
    } else {
        Vec::new()
    };
    let holdout_ref = (!holdout.is_empty()).then_some(holdout.as_slice());
    let outcome = train_model(&cfg, &train_set, holdout_ref)?;
    let meta = serde_json::json!({ "loss": outcome.loss, "seed": cfg.seed });
    save_checkpoint(&ctx.out(CHECKPOINT_FILE)?, &outcome.model, &meta)?;
    write_atomic(&ctx.out(TRAIN_LOG_FILE)?, outcome.log.steps_jsonl()?.as_bytes())?;
    write_atomic(&ctx.out(EPOCHS_FILE)?, outcome.log.epochs_csv().as_bytes())?;
    ctx.say(format!(
        "trained {} steps over {} epochs ({} parameters)",
        outcome.log.steps.len(),
        outcome.log.epochs.len(),
        outcome.model.num_parameters()
    ));
    if holdout.len() >= 2 {
        let (photo, text) = embed_records(&outcome.model, &holdout)?;
        save_embeddings(&ctx.out("holdout_photo.blemb")?, &Embeddings::F32(photo))?;
        save_embeddings(&ctx.out("holdout_text.blemb")?, &Embeddings::F32(text))?;
        let ids: Vec<u64> = holdout.iter().map(|r| r.id).collect();
        write_json(&ctx.out("holdout_ids.json")?, &ids)?;
        let m = holdout_metrics(&outcome.model, &holdout, &cfg.schedule.eval_ks)?;
        ctx.say(format!("final holdout {}", m.summary()));
    }
    Ok(())
}

fn quantize(ctx: &Ctx, args: &QuantizeArgs) -> Result<()> {
    let cfg = ctx.config(None)?;
    let x = load_embeddings(&args.input)?.into_f32()?;
    let codec = match &args.codec {
        Some(path) => Codec::load(path)?,
        None => {
            let mut s = cfg.codec.clone();
            if let Some(kind) = args.kind {
                s.kind = match kind {
                    KindArg::Pq => CodecChoice::Pq,
                    KindArg::Opq => CodecChoice::Opq,
                    KindArg::Scalar => CodecChoice::Scalar,
                    KindArg::Pca => CodecChoice::Pca,
                };
            }
            s.m = args.m.unwrap_or(s.m);
            s.k = args.k.unwrap_or(s.k);
            s.rotated_dim = args.rotated_dim.or(s.rotated_dim);
            s.outer_iters = args.outer_iters.unwrap_or(s.outer_iters);
            s.kmeans_iters = args.kmeans_iters.unwrap_or(s.kmeans_iters);
            s.pca_dim = args.pca_dim.unwrap_or(s.pca_dim);
            train_codec(&s, &x, cfg.seeds().codec)?
        }
    };
    if codec.input_dim() != x.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", codec.input_dim()),
            actual: format!("dim {}", x.cols()),
        });
    }
    let codes = codec.encode(&x)?;
    let x_hat = codec.decode(&codes)?;
    let report = compression_report(&x, &x_hat)?;
    if args.codec.is_none() {
        codec.save(&ctx.out(CODEC_FILE)?)?;
    }
    save_embeddings(&ctx.out(CODES_FILE)?, &Embeddings::U8(codes))?;
    write_json(&ctx.out(COMPRESSION_FILE)?, &report)?;
    if let Some(path) = &args.decoded {
        save_embeddings(path, &Embeddings::F32(x_hat))?;
    }
    let label = format!("{:?} ({} B/vec)", codec.kind(), codec.bytes_per_vector());
    ctx.say(format!("L2 reconstruction error over {} vectors", report.n));
    ctx.say(render_table(&[(label.as_str(), report.l2.as_slice())]).trim_end());
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: &Path, data: &Path) -> Result<()> {
    let cfg = ctx.config(Some(data))?;
    let (model, _) = load_checkpoint(checkpoint)?;
    check_dims(&model, &cfg)?;
    let train_set = load_split(data, "train")?;
    let holdout = load_split(data, "holdout")?;
    let report = evaluate(&model, &train_set, &holdout, &cfg.eval)?;
    write_json(&ctx.out(EVAL_FILE)?, &report)?;
    if !report.sweep.is_empty() {
        write_atomic(&ctx.out(SWEEP_FILE)?, sweep_csv(&report.sweep).as_bytes())?;
    }
    ctx.say(format!("holdout {}", report.retrieval.summary()));
    if let Some(p) = &report.probes {
        for (name, acc) in &p.accuracy {
            ctx.say(format!("probe {name} (k={}) accuracy {acc:.4}", p.k));
        }
    }
    for row in &report.sweep {
        ctx.say(format!("pca {:>3} {}", row.dim, row.metrics.summary()));
    }
    Ok(())
}

fn check_dims(model: &DualEncoder, cfg: &PipelineConfig) -> Result<()> {
    let p = &model.photo.config;
    if p.input_dim != cfg.generator.d || model.text.config.input_dim != cfg.generator.d_text {
        return Err(Error::ShapeMismatch {
            expected: format!("photo dim {}, text dim {}", cfg.generator.d, cfg.generator.d_text),
            actual: format!("photo dim {}, text dim {}", p.input_dim, model.text.config.input_dim),
        });
    }
    Ok(())
}

struct Corpus {
    ids: Vec<u64>,
    photo: Option<Matrix>,
    text: Option<Matrix>,
}

impl Corpus {
    fn side(&self, modality: Modality) -> Result<Matrix> {
        let missing = |what: &str| Error::Config(format!("search needs {what} embeddings"));
        match modality {
            Modality::Photo => self.photo.clone().ok_or_else(|| missing("photo")),
            Modality::Text => self.text.clone().ok_or_else(|| missing("text")),
            Modality::Multimodal => {
                let photo = self.photo.as_ref().ok_or_else(|| missing("photo"))?;
                let text = self.text.as_ref().ok_or_else(|| missing("text"))?;
                if photo.shape() != text.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}x{}", photo.rows(), photo.cols()),
                        actual: format!("{}x{}", text.rows(), text.cols()),
                    });
                }
                let rows: Vec<Vec<f64>> = photo
                    .row_iter()
                    .zip(text.row_iter())
                    .map(|(p, t)| multimodal(p, t))
                    .collect();
                Matrix::from_rows(&rows)
            }
        }
    }
}

fn load_corpus(ctx: &Ctx, args: &SearchArgs) -> Result<Corpus> {
    if let (Some(ckpt), Some(data)) = (&args.checkpoint, &args.data) {
        let cfg = ctx.config(Some(data))?;
        let (model, _) = load_checkpoint(ckpt)?;
        check_dims(&model, &cfg)?;
        let split = match args.split {
            SplitArg::Train => "train",
            SplitArg::Holdout => "holdout",
        };
        let records = load_split(data, split)?;
        let (photo, text) = embed_records(&model, &records)?;
        return Ok(Corpus {
            ids: records.iter().map(|r| r.id).collect(),
            photo: Some(photo),
            text: Some(text),
        });
    }
    let load = |p: &Option<PathBuf>| -> Result<Option<Matrix>> {
        p.as_ref().map(|p| load_embeddings(p)?.into_f32()).transpose()
    };
    let photo = load(&args.photo_emb)?;
    let text = load(&args.text_emb)?;
    let rows = match (&photo, &text) {
        (Some(m), _) | (None, Some(m)) => m.rows(),
        (None, None) => {
            return Err(Error::Config(
                "search needs --checkpoint with --data, or --photo-emb/--text-emb".into(),
            ))
        }
    };
    let ids: Vec<u64> = match &args.ids {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => (0..rows as u64).collect(),
    };
    Ok(Corpus { ids, photo, text })
}

fn search(ctx: &Ctx, args: &SearchArgs) -> Result<()> {
    let corpus = load_corpus(ctx, args)?;
    let matrix = corpus.side(args.modality)?;
    let query: Vec<f64> = match (args.query_id, &args.query_vec) {
        (Some(id), _) => {
            let row = corpus
                .ids
                .iter()
                .position(|&i| i == id)
                .ok_or(Error::UnknownId(id))?;
            matrix.row(row).to_vec()
        }
        (None, Some(path)) => {
            let q = load_embeddings(path)?.into_f32()?;
            if q.rows() == 0 {
                return Err(Error::Format("query file has no rows".into()));
            }
            q.row(0).to_vec()
        }
        (None, None) => return Err(Error::Config("search needs --query-id or --query-vec".into())),
    };
    let hits = top_k(&matrix, &corpus.ids, &query, args.k)?;
    let mut out = String::new();
    for h in &hits {
        let _ = writeln!(out, "{}\t{:.6}", h.id, h.score);
    }
    print!("{out}");
    if ctx.cli.global.out != Path::new(".") {
        write_json(&ctx.out("search.json")?, &hits)?;
    }
    Ok(())
}

fn read_if<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn report(ctx: &Ctx) -> Result<()> {
    let dir = &ctx.cli.global.out;
    let mut md = String::from("# Run report\n");
    let mut found = false;
    if let Some(stats) = read_if::<FilterStats>(&dir.join(FILTER_STATS_FILE))? {
        found = true;
        let _ = write!(md, "\n## Data\n\n{}\n", stats.summary());
    }
    if let Some((_, meta)) = dir
        .join(CHECKPOINT_FILE)
        .is_file()
        .then(|| load_checkpoint(&dir.join(CHECKPOINT_FILE)))
        .transpose()?
    {
        found = true;
        let _ = write!(md, "\n## Training\n\n");
        if let Ok(loss) = serde_json::from_value::<LossState>(meta["loss"].clone()) {
            let _ = writeln!(md, "loss {:?}, final scale {:.3}, bias {:.3}", loss.kind, loss.scale(), loss.bias);
        }
        if let Ok(csv) = fs::read_to_string(dir.join(EPOCHS_FILE)) {
            let mut lines = csv.lines();
            if let (Some(header), Some(last)) = (lines.next(), lines.last()) {
                let _ = write!(md, "\n```\n{header}\n{last}\n```\n");
            }
        }
    }
    if let Some(eval) = read_if::<EvalReport>(&dir.join(EVAL_FILE))? {
        found = true;
        let _ = write!(md, "\n## Evaluation\n\n{}\n", eval.retrieval.summary());
        if let Some(p) = &eval.probes {
            for (name, acc) in &p.accuracy {
                let _ = write!(md, "\n- probe {name} (k={}): {acc:.4}", p.k);
            }
            md.push('\n');
        }
        if !eval.sweep.is_empty() {
            let _ = write!(md, "\n```\n{}```\n", sweep_csv(&eval.sweep));
        }
    }
    if let Some(c) = read_if::<bilisting::codec::CompressionReport>(&dir.join(COMPRESSION_FILE))? {
        found = true;
        let _ = write!(
            md,
            "\n## Compression\n\n```\n{}```\n",
            render_table(&[("L2 error", c.l2.as_slice())])
        );
    }
    if !found {
        return Err(Error::Format(format!("no artifacts found in {}", dir.display())));
    }
    write_atomic(&dir.join(REPORT_FILE), md.as_bytes())?;
    ctx.say(md.trim_end());
    Ok(())
}
