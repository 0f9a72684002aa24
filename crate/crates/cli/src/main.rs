mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use bilisting::eval::Modality;
use bilisting::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bilisting", version, about = "Photo-set/text alignment and embedding compression")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Pipeline config (JSON). Defaults to the config stored next to the
    /// dataset, then to the built-in desk configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate, split and filter a synthetic dataset.
    Gen,
    /// Train the dual encoder on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit a codec on an embedding file and encode it.
    Quantize(QuantizeArgs),
    /// Retrieval metrics, attribute probes and the PCA sweep.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Exact cosine top-k search.
    Search(SearchArgs),
    /// Summarize the artifacts found in the output directory.
    Report,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Pq,
    Opq,
    Scalar,
    Pca,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rotated_dim: Option<usize>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Encode with an existing codec instead of training one.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Also write the reconstruction as an f32 embedding file.
    #[arg(long)]
    pub decoded: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Holdout,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "holdout")]
    pub split: SplitArg,
    #[arg(long, conflicts_with = "checkpoint")]
    pub photo_emb: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    pub text_emb: Option<PathBuf>,
    /// JSON array of listing ids for the rows of the embedding files.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[arg(long, conflicts_with = "query_vec")]
    pub query_id: Option<u64>,
    /// Embedding file whose first row is the query.
    #[arg(long)]
    pub query_vec: Option<PathBuf>,
    #[arg(long, default_value = "photo")]
    pub modality: Modality,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

impl Command {
    fn exit_code(&self) -> u8 {
        match self {
            Command::Gen | Command::Report => 1,
            Command::Train { .. } => 3,
            Command::Quantize(_) => 4,
            Command::Eval { .. } => 5,
            Command::Search(_) => 6,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = cli.command.exit_code();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(code),
            }
        }
    }
}
