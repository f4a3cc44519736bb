use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfc_cli::{
    bench, gen_tpch_lite, load_database, load_summary, parse_user_value, policy_add_summary, run,
    SessionConfig,
};
use dfc_core::engine::Mode;
use dfc_core::plan::StatementKind;

#[derive(Parser)]
#[command(
    name = "dfc",
    about = "Data flow control over CSV-backed relations: run SQL under provenance policies",
    version
)]
struct Cli {
    /// Directory holding schema.txt and one CSV per relation.
    #[arg(long, env = "DFC_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,

    /// Policy file (.dfc); repeatable.
    #[arg(long = "policy", global = true)]
    policy: Vec<PathBuf>,

    /// Enforcement mode: off | oracle | rewrite | capture.
    #[arg(long, global = true, default_value = "rewrite")]
    mode: String,

    /// Session current_user (integer or text).
    #[arg(long, global = true)]
    user: Option<String>,

    /// Abort execution past this many intermediate rows.
    #[arg(long, global = true, default_value_t = 10_000_000)]
    row_cap: u64,

    /// Show plans, injected operations, and emitted SQL on stderr.
    #[arg(long, global = true)]
    explain: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the data directory and print a per-relation summary.
    Load,
    /// Policy file operations.
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Run a SELECT under the chosen enforcement mode.
    Query { sql: String },
    /// Run an UPDATE under the chosen enforcement mode.
    Update { sql: String },
    /// Generate the deterministic benchmark dataset.
    GenTpchLite {
        /// Rows in lineitem; orders and customer scale with it.
        #[arg(long, default_value_t = 60_000)]
        scale: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory (defaults to --data-dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the shipped queries under all modes and report timings (JSONL).
    Bench {
        /// Timed repetitions per (query, mode) after one warmup.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Parse, normalize, and validate policy files against the schema.
    Add { files: Vec<PathBuf> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = match Mode::parse(&cli.mode) {
        Some(m) => m,
        None => {
            eprintln!("error: unknown mode `{}` (off|oracle|rewrite|capture)", cli.mode);
            return ExitCode::from(1);
        }
    };
    let cfg = SessionConfig {
        data_dir: cli.data_dir,
        policy_files: cli.policy,
        mode,
        current_user: cli.user.as_deref().map(parse_user_value),
        row_cap: cli.row_cap,
        explain: cli.explain,
    };

    match cli.command {
        Command::Load => match load_summary(&cfg) {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Policy {
            action: PolicyAction::Add { files },
        } => match policy_add_summary(&cfg, &files) {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Query { sql } => {
            let out = run(&cfg, &sql, StatementKind::Select);
            print!("{}", out.stdout);
            eprint!("{}", out.stderr);
            ExitCode::from(out.exit_code as u8)
        }
        Command::Update { sql } => {
            let out = run(&cfg, &sql, StatementKind::Update);
            print!("{}", out.stdout);
            eprint!("{}", out.stderr);
            ExitCode::from(out.exit_code as u8)
        }
        Command::GenTpchLite { scale, seed, out } => {
            let target = out.or_else(|| cfg.data_dir.clone());
            let target = match target {
                Some(t) => t,
                None => {
                    eprintln!("error: --out or --data-dir required");
                    return ExitCode::from(1);
                }
            };
            match gen_tpch_lite(scale, seed, &target) {
                Ok(s) => {
                    println!(
                        "generated lineitem={} orders={} customer={} (seed {seed}) in {}",
                        s.lineitem,
                        s.orders,
                        s.customer,
                        target.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Bench { reps } => {
            let db = match load_database(&cfg) {
                Ok(db) => db,
                Err(e) => {
                    eprintln!("error: {e} (run `dfc gen-tpch-lite` first)");
                    return ExitCode::from(1);
                }
            };
            match bench(&db, reps, cfg.row_cap) {
                Ok(report) => {
                    print!("{}", report.jsonl());
                    eprintln!("threshold K = {}", report.threshold);
                    for (name, _) in dfc_cli::BENCH_QUERIES {
                        let rewrite = report.overhead(name, Mode::Rewrite).unwrap_or(f64::NAN);
                        let capture = report.overhead(name, Mode::Capture).unwrap_or(f64::NAN);
                        let oracle = report.overhead(name, Mode::Oracle).unwrap_or(f64::NAN);
                        eprintln!(
                            "{name}: overhead rewrite={rewrite:.2}x capture={capture:.2}x oracle={oracle:.2}x"
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
