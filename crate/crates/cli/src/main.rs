//! `aggtree` command-line tool: workload benchmarks with CSV output,
//! checker-backed stress runs, and one-shot queries over op scripts.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure.

use std::io::Read;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aggtree::VariantKind;
use aggtree_cli::script::{parse_query, parse_script, run_query_spec, run_script};
use aggtree_cli::{
    render_csv, run_bench, run_stress, Mix, QueryKind, StressCmdConfig, StressOutcome,
    WorkloadConfig,
};

#[derive(Parser)]
#[command(name = "aggtree", version, about = "Concurrent aggregate-query tree workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Tree variant: fastupdate | fastquery
    #[arg(long, default_value = "fastupdate")]
    variant: String,
    /// Worker thread count
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Key-space size (keys drawn from 0..KEYS)
    #[arg(long, default_value_t = 1 << 14)]
    keys: i64,
    /// Aggregate spec: count|keysum|valsum|sumsq|product|sumsize|stats
    #[arg(long, default_value = "count")]
    agg: String,
    /// RNG seed (falls back to $AGGTREE_SEED, then 42)
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.or_else(|| {
        std::env::var("AGGTREE_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(42)
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a mixed workload and emit per-op-kind CSV rows.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Total operation count across all threads
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        /// Operation mix percentages insert:delete:contains:query
        #[arg(long, default_value = "50:30:10:10")]
        mix: String,
        /// Query kind for the query share of the mix
        #[arg(long, default_value = "rank")]
        query: String,
        /// Disable effectual-path recording
        #[arg(long)]
        no_path_record: bool,
        /// Disable owner-tid lock lookups
        #[arg(long)]
        no_tid_lock: bool,
        /// Exponential backoff between lock retries
        #[arg(long)]
        backoff: bool,
        /// Zero the timing columns for byte-reproducible CSV
        #[arg(long)]
        no_timing: bool,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Run short random concurrent episodes and check each for
    /// linearizability; persists the first failing history.
    Stress {
        #[command(flatten)]
        common: CommonArgs,
        /// Operations per history
        #[arg(long, default_value_t = 6)]
        ops: u64,
        /// Number of histories
        #[arg(long, default_value_t = 200)]
        histories: u32,
        /// Where to persist a failing history
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Build a tree from an op script and run one query.
    Query {
        #[command(flatten)]
        common: CommonArgs,
        /// Op script file (defaults to stdin); one op per line:
        /// ins K V | del K | get K | q NAME ARGS
        #[arg(long)]
        script: Option<std::path::PathBuf>,
        /// The query to run, e.g. "rank 9" or "range 2 9"
        #[arg(long)]
        query: String,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap renders help/version on stdout with success
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    match cli.cmd {
        Cmd::Bench {
            common,
            ops,
            mix,
            query,
            no_path_record,
            no_tid_lock,
            backoff,
            no_timing,
            out,
        } => {
            let variant: VariantKind = match common.variant.parse() {
                Ok(v) => v,
                Err(e) => return usage_error(e),
            };
            let mix = match Mix::parse(&mix) {
                Ok(m) => m,
                Err(e) => return usage_error(e),
            };
            let query = match QueryKind::parse(&query) {
                Ok(q) => q,
                Err(e) => return usage_error(e),
            };
            let cfg = WorkloadConfig {
                variant,
                threads: common.threads,
                keys: common.keys,
                ops,
                mix,
                query,
                agg: common.agg,
                seed: resolve_seed(common.seed),
                path_record: !no_path_record,
                tid_in_lock: !no_tid_lock,
                backoff,
                no_timing,
            };
            let output = match run_bench(&cfg) {
                Ok(o) => o,
                Err(e) => return usage_error(e),
            };
            let csv = render_csv(&output.rows);
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, csv) {
                    return usage_error(format!("writing {}: {e}", path.display()));
                }
            } else {
                print!("{csv}");
            }
            if !output.audit.is_ok() {
                eprintln!("post-run audit failed:\n{}", output.audit);
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Cmd::Stress {
            common,
            ops,
            histories,
            out,
        } => {
            let variant: VariantKind = match common.variant.parse() {
                Ok(v) => v,
                Err(e) => return usage_error(e),
            };
            let cfg = StressCmdConfig {
                variant,
                threads: common.threads.min(8),
                keys: common.keys.min(64),
                ops,
                histories,
                seed: resolve_seed(common.seed),
            };
            match run_stress(&cfg) {
                Ok(StressOutcome::Clean { checked, undecided }) => {
                    println!("{checked} histories linearizable ({undecided} undecided on budget)");
                    ExitCode::SUCCESS
                }
                Ok(StressOutcome::Failed { index, history }) => {
                    let path =
                        out.unwrap_or_else(|| std::path::PathBuf::from("failing-history.jsonl"));
                    if let Err(e) = std::fs::write(&path, history.to_json_lines()) {
                        eprintln!("error: writing {}: {e}", path.display());
                    }
                    eprintln!(
                        "history {index} is not linearizable; saved to {}",
                        path.display()
                    );
                    ExitCode::from(2)
                }
                Err(e) => usage_error(e),
            }
        }
        Cmd::Query {
            common,
            script,
            query,
        } => {
            let variant: VariantKind = match common.variant.parse() {
                Ok(v) => v,
                Err(e) => return usage_error(e),
            };
            let text = match script {
                Some(path) => match std::fs::read_to_string(&path) {
                    Ok(t) => t,
                    Err(e) => return usage_error(format!("reading {}: {e}", path.display())),
                },
                None => {
                    let mut buf = String::new();
                    if let Err(e) = std::io::stdin().read_to_string(&mut buf) {
                        return usage_error(format!("reading stdin: {e}"));
                    }
                    buf
                }
            };
            let ops = match parse_script(&text) {
                Ok(ops) => ops,
                Err(e) => return usage_error(e),
            };
            let q = match parse_query(0, &query) {
                Ok(q) => q,
                Err(e) => return usage_error(format!("--query: {}", e.message)),
            };
            let spec = match aggtree::aggregate::by_name::<i64>(&common.agg) {
                Ok(s) => s,
                Err(e) => return usage_error(e),
            };
            let tree = match aggtree::Tree::new(variant, spec, 1) {
                Ok(t) => t,
                Err(e) => return usage_error(e),
            };
            let mut handle = tree.register().expect("fresh tree registration");
            run_script(&mut handle, &ops);
            match run_query_spec(&mut handle, &q) {
                Ok(answer) => {
                    println!("{answer}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("query error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
