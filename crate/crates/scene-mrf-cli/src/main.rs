//! `scene-mrf`: command-line front end for the scene-grounding MRF library.
//!
//! Subcommands cover the full loop: synthetic dataset generation, training,
//! evaluation, relation-count sweeps, single-query inference, oracle
//! verification, and micro-benchmarks.  Every command is deterministic given
//! its seeds, and all file outputs are byte-reproducible.  Exit codes: 0 on
//! success, 1 for validation problems (bad flags, configs, or inputs), 2 for
//! runtime failures; errors are printed to stderr as `error: ...` lines.

mod bench;
mod config;
mod eval;
mod gen_data;
mod infer;
mod oracle_check;
mod sweep;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

/// Command failures, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// The user's inputs are wrong: flags, config files, file contents.
    Validation(String),
    /// The work itself failed: I/O, solver errors, failed verification.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Shorthand for wrapping library/IO errors at validation call sites.
pub fn validation(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Shorthand for wrapping library/IO errors at runtime call sites.
pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "scene-mrf",
    version,
    about = "Scene-graph grounding with pairwise MRFs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum InferMode {
    /// Per-node marginals by belief propagation (loopy on cyclic queries).
    Marginal,
    /// Joint MAP assignment by dual-ascent message passing.
    Map,
    /// MAP refined to an all-distinct assignment by annealed local moves.
    MapDistinct,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset.
    GenData {
        /// World/query config file (flat `key = value`).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path (one JSON record per line); a vocabulary
        /// sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; identical seeds and configs give identical bytes.
        #[arg(long)]
        seed: u64,
    },
    /// Train an energy model on a generated dataset.
    Train {
        /// Dataset produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Training config file (flat `key = value`).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; drives init, batch order, dropout, and tree sampling.
        #[arg(long)]
        seed: u64,
        /// Resume from this checkpoint (config and seed must match).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss log CSV path (default: checkpoint path with .loss.csv).
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; prints a CSV metrics report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop all edges from every query before inference.
        #[arg(long)]
        no_rels: bool,
        /// Make one node per item generic and score only that node.
        #[arg(long)]
        mask_node: bool,
        /// Keep only cyclic queries.
        #[arg(long)]
        loops_only: bool,
        /// Keep only tree queries.
        #[arg(long)]
        trees_only: bool,
    },
    /// Recall versus query size, plus seeded edge-removal curves.
    SweepRelations {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Seed for the per-item edge deletions.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ground a single query against a candidate file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query graph JSON (named categories and relations).
        #[arg(long)]
        query: PathBuf,
        /// Candidate set JSON (boxes + per-box features).
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, value_enum)]
        mode: InferMode,
        /// Candidates listed per node in the output.
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Write the result JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cross-check the result against exact enumeration when feasible.
        #[arg(long)]
        verify: bool,
        /// Seed for the annealed refinement in map-distinct mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the brute-force equivalence and identity suites.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of independent suite repetitions.
        #[arg(long, default_value_t = 1)]
        trials: u64,
        /// Deliberately perturb the checked quantities; the suite must then
        /// fail and the command exit nonzero.
        #[arg(long)]
        self_test: bool,
    },
    /// Time inference routines across problem sizes; prints a CSV.
    Bench {
        /// Comma-separated node counts.
        #[arg(long, default_value = "2,4,6")]
        n_list: String,
        /// Comma-separated candidate counts.
        #[arg(long, default_value = "8,16,24")]
        nb_list: String,
        /// Timed repetitions per cell.
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, out, seed } => gen_data::run(&config, &out, seed),
        Command::Train {
            data,
            config,
            out,
            seed,
            resume,
            loss_log,
        } => train::run(
            &data,
            &config,
            &out,
            seed,
            resume.as_deref(),
            loss_log.as_deref(),
        ),
        Command::Eval {
            data,
            checkpoint,
            out,
            no_rels,
            mask_node,
            loops_only,
            trees_only,
        } => eval::run(
            &data,
            &checkpoint,
            out.as_deref(),
            eval::EvalFlags {
                no_rels,
                mask_node,
                loops_only,
                trees_only,
            },
        ),
        Command::SweepRelations {
            data,
            checkpoint,
            out,
            seed,
        } => sweep::run(&data, &checkpoint, &out, seed),
        Command::Infer {
            checkpoint,
            query,
            candidates,
            mode,
            top_k,
            out,
            verify,
            seed,
        } => infer::run(
            &checkpoint,
            &query,
            &candidates,
            mode,
            top_k,
            out.as_deref(),
            verify,
            seed,
        ),
        Command::OracleCheck {
            seed,
            trials,
            self_test,
        } => oracle_check::run(seed, trials, self_test),
        Command::Bench {
            n_list,
            nb_list,
            reps,
            seed,
            out,
        } => bench::run(&n_list, &nb_list, reps, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
