//! `hreb`: train, evaluate, predict, inspect, verify and describe corpora.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 config or data error,
//! 3 checkpoint error, 4 divergence.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hreb::Error;

#[derive(Parser)]
#[command(name = "hreb", version, about = "Hierarchical reduced-bias EMA attention tagger with a BiLSTM-CRF head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config; writes checkpoints, metric log and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. --set lr=0 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Span-level precision, recall and F1 of a checkpoint on a CoNLL file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Gold decoding: strict or lenient (default: the checkpoint's setting).
        #[arg(long)]
        mode: Option<String>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Tag one whitespace-tokenized sentence per line; writes CoNLL.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump attention scores, weights and gates for one sentence.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sentence: String,
        /// Treat every character as a token instead of splitting on whitespace.
        #[arg(long)]
        chars: bool,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites and print a pass/fail table.
    Verify {
        /// all, grad, crf, ema or gate.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write failing cases' replay inputs here as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Scale analytic gradients (fault injection for testing the checker).
        #[arg(long, default_value_t = 1.0, hide = true)]
        fault_scale: f64,
    },
    /// Dataset properties table. Each corpus is PATH or NAME=TRAIN,TEST[,VALID];
    /// without VALID the test split doubles as validation.
    Stats {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write a seeded synthetic corpus (train.txt, valid.txt, test.txt).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sentences per split.
        #[arg(long, default_value_t = 64)]
        sentences: usize,
        #[arg(long, default_value_t = 3)]
        types: usize,
    },
    /// Train one model per switch combination and print the ablation table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// e.g. "attention=naive,hema;reduced_bias=off,dynamic" (default: that matrix).
        #[arg(long)]
        matrix: Option<String>,
        /// Write the full results as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Distinct exit status per failure class.
pub enum Failure {
    Verify,
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) | Error::Version { .. } => 3,
        Error::Divergence(_) | Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, overrides } => commands::train(&config, &out, &overrides),
        Command::Eval { ckpt, corpus, mode, json } => commands::eval(&ckpt, &corpus, mode.as_deref(), json),
        Command::Predict { ckpt, input, out } => commands::predict(&ckpt, &input, &out),
        Command::Inspect { ckpt, sentence, chars, out } => commands::inspect(&ckpt, &sentence, chars, out.as_deref()),
        Command::Verify { suite, seed, dump, fault_scale } => commands::verify(&suite, seed, fault_scale, dump.as_deref()),
        Command::Stats { corpus, json } => commands::stats(&corpus, json),
        Command::Synth { out, seed, sentences, types } => commands::synth(&out, seed, sentences, types),
        Command::Ablate { config, matrix, out } => commands::ablate(&config, matrix.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
