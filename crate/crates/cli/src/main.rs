use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand};

use phenom_cli::commands::{self, BenchmarkInputs, Common};
use phenom_cli::config::split_overrides;

const OVERRIDE_HELP: &str = "Any other `--key value` pair overrides that key of the command's config \
(dotted keys reach nested tables, e.g. `--render.image_size 64`). PHENOM_SEED supplies the seed \
when neither the config nor an override sets one.";

#[derive(Parser)]
#[command(name = "phenom", version, about = "Synthetic HCS data, MAE/CA-MAE/WSL training, embedding and benchmarks", after_help = OVERRIDE_HELP)]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Shared {
    /// TOML config for the command.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted relationships and features.
    #[command(after_help = OVERRIDE_HELP)]
    Synth {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train an MAE, CA-MAE or WSL model on a dataset directory.
    #[command(after_help = OVERRIDE_HELP)]
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Well-level embeddings from a checkpoint (mean over crop tiles).
    #[command(after_help = OVERRIDE_HELP)]
    Embed {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Apply a transformation pipeline (e.g. `--pipeline tvn`) to a table.
    #[command(after_help = OVERRIDE_HELP)]
    Transform {
        #[command(flatten)]
        shared: Shared,
        /// Table stem or the directory holding `embeddings.*`.
        #[arg(long)]
        table: PathBuf,
    },
    /// Relationship recall, retrieval and feature regression on a table.
    #[command(after_help = OVERRIDE_HELP)]
    Benchmark {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        table: PathBuf,
        /// Relationship database CSV; repeatable.
        #[arg(long = "db")]
        dbs: Vec<PathBuf>,
        /// `set_id,perturbation_id` CSV for sibling retrieval.
        #[arg(long)]
        siblings: Option<PathBuf>,
        /// Well-level feature CSV for the regression benchmark.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Merge benchmark reports; `--markdown` renders summary tables.
    #[command(after_help = OVERRIDE_HELP)]
    Report {
        #[command(flatten)]
        shared: Shared,
        /// Report JSON files or benchmark output directories.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        markdown: bool,
    },
}

/// Long flags clap knows for the subcommand named in `args`, and which of
/// them take no value.
fn known_flags(args: &[String]) -> (Vec<String>, Vec<String>) {
    let root = Cli::command();
    let mut known = vec!["help".to_string(), "version".to_string()];
    let mut flags = known.clone();
    let mut collect = |cmd: &clap::Command| {
        for a in cmd.get_arguments() {
            if let Some(l) = a.get_long() {
                known.push(l.to_string());
                if !a.get_action().takes_values() {
                    flags.push(l.to_string());
                }
            }
        }
    };
    collect(&root);
    if let Some(sub) = args.iter().find_map(|a| root.find_subcommand(a)) {
        collect(sub);
    }
    (known, flags)
}

fn run() -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let (known, flags) = known_flags(&argv[1..]);
    let (kept, overrides) = split_overrides(&argv[1..], &known, &flags)?;
    let cli = Cli::parse_from(std::iter::once(argv[0].clone()).chain(kept));
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let common = |s: &Shared| -> (Option<PathBuf>, PathBuf) { (s.config.clone(), s.out.clone()) };
    let (shared, action): (&Shared, Box<dyn Fn(&Common) -> Result<()>>) = match &cli.command {
        Command::Synth { shared } => (shared, Box::new(commands::synth)),
        Command::Train { shared, dataset, resume } => {
            (shared, Box::new(move |c| commands::train(c, dataset, resume.as_deref())))
        }
        Command::Embed { shared, checkpoint, dataset } => {
            (shared, Box::new(move |c| commands::embed(c, checkpoint, dataset)))
        }
        Command::Transform { shared, table } => (shared, Box::new(move |c| commands::transform(c, table))),
        Command::Benchmark { shared, table, dbs, siblings, features } => (
            shared,
            Box::new(move |c| {
                let inputs = BenchmarkInputs {
                    table,
                    dbs,
                    siblings: siblings.as_deref(),
                    features: features.as_deref(),
                };
                commands::benchmark(c, &inputs)
            }),
        ),
        Command::Report { shared, inputs, markdown } => {
            (shared, Box::new(move |c| commands::report(c, inputs, *markdown)))
        }
    };
    let (config, out) = common(shared);
    action(&Common {
        config: config.as_deref(),
        overrides: &overrides,
        out: &out,
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
