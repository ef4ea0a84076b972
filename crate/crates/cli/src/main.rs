use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use unimatch::episodes::{Protocol, Split};
use unimatch::taskrel::{Kernel, VectorMode};
use unimatch_cli::commands::{self, CliError};

const EXIT_HELP: &str = "Exit codes: 0 success, 2 configuration error, 3 data error \
(missing files, unparseable input, sampling failures), 4 numerical abort (non-finite loss).";

#[derive(Parser)]
#[command(name = "unimatch", version, about = "Few-shot molecular property prediction with hierarchical matching", after_help = EXIT_HELP)]
struct Cli {
    /// Worker threads for meta-training [default: all cores]
    #[arg(long, global = true, env = "UNIMATCH_WORKERS")]
    workers: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, valid, test)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write a checkpoint plus an epoch log
    Train {
        /// Run configuration file [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Task registry root (train/, valid/, test/ of JSONL files)
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch log CSV [default: <out>.log.csv]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune on sampled support sets of every test task and score the queries (CSV on stdout)
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// [default: from checkpoint config]
        #[arg(long)]
        support_size: Option<usize>,
        /// [default: from checkpoint config]
        #[arg(long)]
        query_size: Option<usize>,
        /// Episodes per task [default: from checkpoint config]
        #[arg(long)]
        repeats: Option<usize>,
        /// balanced or unbalanced [default: from checkpoint config]
        #[arg(long)]
        protocol: Option<Protocol>,
        /// [default: training seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Skip fine-tuning and predict with the meta-learned head
        #[arg(long)]
        zero_shot: bool,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict positive-class probabilities for query SMILES (CSV on stdout)
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSONL of {"smiles": .., "label": 0|1}
        #[arg(long)]
        support: PathBuf,
        /// One SMILES per line
        #[arg(long)]
        query: PathBuf,
        /// [default: training seed]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the task relation matrix of one split
    Taskrel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// dot, cosine or euclidean [default: from checkpoint config]
        #[arg(long)]
        metric: Option<Kernel>,
        /// adapted-w-delta or mean-support-embedding [default: from checkpoint config]
        #[arg(long)]
        mode: Option<VectorMode>,
        /// Row-softmax the matrix [default: from checkpoint config]
        #[arg(long)]
        normalize: Option<bool>,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// [default: training seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Matrix CSV; metadata goes to <out>.meta.jsonl
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-layer molecule embeddings, optionally with PCA projections
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        /// One SMILES per line
        #[arg(long)]
        smiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write <stem>.pca.layer<l>.csv with k components per layer
        #[arg(long)]
        pca: Option<usize>,
    },
    /// Write a synthetic task registry
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train_tasks: usize,
        #[arg(long, default_value_t = 20)]
        test_tasks: usize,
        #[arg(long, default_value_t = 60)]
        molecules: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, data, out, seed, log } => commands::train(&commands::TrainArgs {
            config,
            data,
            out,
            seed,
            log,
            workers: cli.workers,
        }),
        Command::Eval { ckpt, data, support_size, query_size, repeats, protocol, seed, zero_shot, out } => {
            let csv = commands::eval(&commands::EvalArgs {
                ckpt,
                data,
                support_size,
                query_size,
                repeats,
                protocol,
                seed,
                zero_shot,
            })?;
            commands::emit(&csv, out.as_deref())
        }
        Command::Predict { ckpt, support, query, seed, out } => {
            let csv = commands::predict(&commands::PredictArgs { ckpt, support, query, seed })?;
            commands::emit(&csv, out.as_deref())
        }
        Command::Taskrel { ckpt, data, metric, mode, normalize, split, seed, out } => {
            commands::taskrel(&commands::TaskRelArgs { ckpt, data, metric, mode, normalize, split, out, seed })
        }
        Command::ExportEmbeddings { ckpt, smiles, out, pca } => {
            commands::export_embeddings(&commands::ExportArgs { ckpt, smiles, out, pca })
        }
        Command::Synth { out, train_tasks, test_tasks, molecules, seed } => commands::synth(&commands::SynthArgs {
            out,
            train: train_tasks,
            test: test_tasks,
            molecules,
            seed,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
