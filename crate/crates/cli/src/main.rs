//! `tracer`: convert agent run directories into standardized trace trees,
//! localize where failed runs went wrong, score predictions against gold
//! labels, and package replay hints — plus a deterministic synthetic-run
//! generator for offline corpora.

mod config;
mod http_client;
mod ops;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{FlagOverrides, Settings};
use crate::ops::SynthRequest;

#[derive(Parser)]
#[command(name = "tracer", version, about = "Trace indexing, failure localization, and scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Chat-completion endpoint URL (overrides config file and environment).
    #[arg(long, global = true)]
    model_url: Option<String>,

    /// Turn budget for model-driven diagnosis sessions.
    #[arg(long, global = true)]
    max_turns: Option<usize>,

    /// Use the built-in regression heuristic instead of a model endpoint.
    #[arg(long, global = true)]
    heuristic: bool,

    /// Extra parser descriptors to merge over the built-in registry.
    #[arg(long, global = true)]
    parsers: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory to read.
    run_dir: PathBuf,

    /// Output directory (defaults next to the run).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize one run directory and echo its filter verdict.
    Extract(RunArgs),

    /// Emit steps.json, stage_ranges.json, and tree.md for one run.
    Index(RunArgs),

    /// Label where a failed run went wrong and write trace_report.json.
    Diagnose(RunArgs),

    /// Score predictions under --pred against gold labels in the corpus.
    Evaluate {
        /// Corpus root whose run directories carry gold labels.
        corpus: PathBuf,

        /// Directory holding per-run predictions (pipeline output).
        #[arg(long)]
        pred: PathBuf,

        /// Output directory for report.json and report.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Generate a corpus of synthetic run directories.
    Synth {
        /// Directory to fill with run-<seed> subdirectories.
        #[arg(long)]
        out: PathBuf,

        /// Number of runs to generate.
        #[arg(long)]
        count: usize,

        /// Seed of the first run; later runs increment from it.
        #[arg(long, default_value_t = 1)]
        seed_base: u64,

        /// failing_cascade, clean_solved, timeout, truncated_generation,
        /// env_corrupt, or short_correct.
        #[arg(long, default_value = "failing_cascade")]
        archetype: String,

        /// patching, dependency_installation, or mixed (30% dependency).
        #[arg(long, default_value = "patching")]
        onset_stage: String,

        /// Failure-cascade length after the onset.
        #[arg(long, default_value_t = 2)]
        cascade_len: usize,

        /// Duplicated exploration steps planted per run.
        #[arg(long, default_value_t = 1)]
        noise: usize,

        /// Passing edit/test pairs before the onset (up to 4).
        #[arg(long, default_value_t = 1)]
        pre_onset_edits: usize,
    },

    /// Render replay_hint.txt and replay_budget.json for a diagnosed run.
    ReplayHint {
        /// Run directory to read.
        run_dir: PathBuf,

        /// Existing trace_report.json to reuse (otherwise diagnose afresh).
        #[arg(long)]
        report: Option<PathBuf>,

        /// Output directory (defaults next to the run).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Extract, filter, index, diagnose, score, and package a whole corpus.
    Pipeline {
        /// Corpus root containing one subdirectory per run.
        corpus: PathBuf,

        /// Output directory for per-run artifacts and corpus reports.
        #[arg(long)]
        out: PathBuf,

        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let jobs = match &cli.command {
        Command::Pipeline { jobs, .. } => *jobs,
        _ => None,
    };
    let settings = Settings::resolve(&FlagOverrides {
        model_url: cli.model_url.clone(),
        max_turns: cli.max_turns,
        jobs,
        heuristic: cli.heuristic.then_some(true),
    })?;
    let parsers = cli.parsers.as_deref();

    match &cli.command {
        Command::Extract(args) => ops::cmd_extract(&args.run_dir, args.out.as_deref(), parsers),
        Command::Index(args) => ops::cmd_index(&args.run_dir, args.out.as_deref(), parsers),
        Command::Diagnose(args) => {
            ops::cmd_diagnose(&args.run_dir, args.out.as_deref(), parsers, &settings)
        }
        Command::Evaluate { corpus, pred, out } => {
            ops::cmd_evaluate(corpus, pred, out.as_deref(), parsers, &settings)
        }
        Command::Synth {
            out,
            count,
            seed_base,
            archetype,
            onset_stage,
            cascade_len,
            noise,
            pre_onset_edits,
        } => ops::cmd_synth(&SynthRequest {
            out,
            count: *count,
            seed_base: *seed_base,
            archetype,
            onset_stage,
            cascade_len: *cascade_len,
            noise: *noise,
            pre_onset_edits: *pre_onset_edits,
        }),
        Command::ReplayHint { run_dir, report, out } => {
            ops::cmd_replay_hint(run_dir, report.as_deref(), out.as_deref(), parsers, &settings)
        }
        Command::Pipeline { corpus, out, .. } => {
            ops::cmd_pipeline(corpus, out, parsers, &settings)
        }
    }
}
