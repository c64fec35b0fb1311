//! `fidel`: dataset checks, episode inspection, training, evaluation and
//! the full results-table reproduction.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DataArgs, TrainArgs};

/// A configuration or usage problem (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "fidel",
    version,
    about = "Few-shot handwritten character recognition experiments"
)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML or JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 2,000 training episodes, 100 validation and 200 test tasks.
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest the dataset and report counts and anomalies.
    ValidateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Dump sampled episodes as JSON for inspection.
    SampleEpisodes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Episodes per granularity used by the method.
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on sampled character episodes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refuse checkpoints of a different backbone.
        #[arg(long)]
        backbone: Option<fidel::protonet::BackboneKind>,
        #[arg(long, default_value = "test")]
        split: fidel::Split,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        queries_per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Train and test every method/shot cell over all seeds and write the
    /// results table.
    Reproduce {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated subset of methods.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<fidel::Method>>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        test_tasks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic glyph corpus with a matching manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Use the 265-character alphabet layout instead of a small grid.
        #[arg(long)]
        amharic: bool,
        #[arg(long, default_value_t = 10)]
        rows: u32,
        #[arg(long, default_value_t = 5)]
        cols: u32,
        /// Rows assigned to train, val and test.
        #[arg(long, value_delimiter = ',', default_value = "6,2,2")]
        split_rows: Vec<u32>,
        #[arg(long, default_value_t = 5)]
        images_per_char: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use fidel::protonet::ProtoError;
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || e.is::<fidel::alphabet::AlphabetError>()
            || matches!(
                e.downcast_ref::<ProtoError>(),
                Some(ProtoError::DescriptorMismatch { .. })
            )
            || matches!(
                e.downcast_ref::<fidel::Error>(),
                Some(fidel::Error::Config(_))
            )
            || matches!(
                e.downcast_ref::<fidel::Error>(),
                Some(
                    fidel::Error::Alphabet(_)
                        | fidel::Error::Proto(ProtoError::DescriptorMismatch { .. })
                )
            )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();

    let result = match cli.command {
        Command::ValidateData { cfg, data, json } => commands::validate_data(&cfg, &data, json),
        Command::SampleEpisodes {
            cfg,
            data,
            train,
            n,
            out,
        } => commands::sample_episodes(&cfg, &data, &train, n, out.as_deref()),
        Command::Train {
            cfg,
            data,
            train,
            out,
        } => commands::train(&cfg, &data, &train, &out),
        Command::Eval {
            cfg,
            data,
            checkpoint,
            backbone,
            split,
            tasks,
            way,
            shot,
            queries_per_class,
            seed,
            json,
        } => commands::eval(
            &cfg,
            &data,
            &commands::EvalArgs {
                checkpoint,
                backbone,
                split,
                tasks,
                way,
                shot,
                queries_per_class,
                seed,
                json,
            },
        ),
        Command::Reproduce {
            cfg,
            data,
            train,
            methods,
            shots,
            seeds,
            test_tasks,
            out,
        } => commands::reproduce(&cfg, &data, &train, methods, shots, seeds, test_tasks, &out),
        Command::Synth {
            out,
            amharic,
            rows,
            cols,
            split_rows,
            images_per_char,
            seed,
        } => commands::synth(
            &out,
            amharic,
            rows,
            cols,
            &split_rows,
            images_per_char,
            seed,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
