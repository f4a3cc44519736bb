//! Operator-facing driver: load CSV-backed relations, register policies, run
//! statements under a chosen enforcement mode, generate the TPC-H-shaped
//! benchmark dataset, and compare enforcement strategies.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use dfc_core::csvio::{dump_dir, load_dir, DataError};
use dfc_core::engine::{run_statement, Mode, RunReport};
use dfc_core::error::Error as CoreError;
use dfc_core::exec::ExecOptions;
use dfc_core::expr::Session;
use dfc_core::oracle::EnforcementOutcome;
use dfc_core::plan::{output_scope, StatementKind};
use dfc_core::policy::PolicySet;
use dfc_core::schema::{relation_from_rows, Database};
use dfc_core::sql::parse_sql;
use dfc_core::value::{ValType, Value};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Parse(#[from] dfc_core::sql::ParseError),
    #[error(transparent)]
    Plan(#[from] dfc_core::plan::PlanError),
    #[error(transparent)]
    Schema(#[from] dfc_core::schema::SchemaError),
    #[error(transparent)]
    Policy(#[from] dfc_core::policy::PolicyError),
    #[error("statement is a {got}; use `dfc {want}` instead")]
    WrongCommand { want: &'static str, got: &'static str },
    #[error("data directory required (set --data-dir or DFC_DATA_DIR)")]
    NoDataDir,
    #[error("benchmark correctness failure: {0}")]
    DigestMismatch(String),
    #[error("{0}")]
    Msg(String),
}

/// Everything one invocation needs.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub data_dir: Option<PathBuf>,
    pub policy_files: Vec<PathBuf>,
    pub mode: Mode,
    pub current_user: Option<Value>,
    pub row_cap: u64,
    pub explain: bool,
}

impl Default for SessionConfig {
    fn default() -> SessionConfig {
        SessionConfig {
            data_dir: None,
            policy_files: vec![],
            mode: Mode::Rewrite,
            current_user: None,
            row_cap: ExecOptions::default().row_cap,
            explain: false,
        }
    }
}

impl SessionConfig {
    pub fn exec_options(&self) -> ExecOptions {
        ExecOptions {
            row_cap: self.row_cap,
        }
    }

    pub fn session(&self) -> Session {
        Session {
            current_user: self.current_user.clone(),
        }
    }
}

/// `--user` values: integers when they look like one, text otherwise.
pub fn parse_user_value(s: &str) -> Value {
    match s.parse::<i64>() {
        Ok(i) => Value::Int(i),
        Err(_) => Value::text(s),
    }
}

pub fn load_database(cfg: &SessionConfig) -> Result<Database, CliError> {
    let dir = cfg.data_dir.as_ref().ok_or(CliError::NoDataDir)?;
    Ok(load_dir(dir)?)
}

/// Loads the database and registers every policy file. `off` mode ignores
/// policies entirely.
pub fn load_context(cfg: &SessionConfig) -> Result<(Database, PolicySet), CliError> {
    let db = load_database(cfg)?;
    let mut policies = PolicySet::new();
    if cfg.mode != Mode::Off {
        for file in &cfg.policy_files {
            let text = std::fs::read_to_string(file)
                .map_err(|e| CliError::Msg(format!("{}: {e}", file.display())))?;
            policies.register_text(&text, &db)?;
        }
    }
    Ok((db, policies))
}

/// A finished invocation: deterministic stdout, diagnostic stderr, and the
/// process exit code (0 completed, 3 query killed, 4 update fully skipped,
/// 1 error).
#[derive(Debug, Default)]
pub struct RunOutput {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
}

fn render_rows(header: &[String], rows: &[Vec<Value>]) -> String {
    let mut out = String::new();
    if !header.is_empty() {
        out.push_str(&header.join("\t"));
        out.push('\n');
    }
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.render()).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}

fn stats_line(report: &RunReport) -> String {
    let s = &report.stats;
    let mut line = format!(
        "stats: scanned={} joined={} output={} annotations={} wall={:?}",
        s.rows_scanned, s.rows_joined, s.rows_output, s.annotations_created, s.wall_time
    );
    if report.fell_back {
        line.push_str(" (rewrite unsupported; oracle fallback)");
    }
    if s.div_by_zero {
        line.push_str(" (warning: division by zero produced nulls)");
    }
    line
}

/// Runs one statement text end to end.
pub fn run(cfg: &SessionConfig, statement: &str, expect: StatementKind) -> RunOutput {
    match run_inner(cfg, statement, expect) {
        Ok(out) => out,
        Err(e) => RunOutput {
            stdout: String::new(),
            stderr: format!("error: {e}\n"),
            exit_code: 1,
        },
    }
}

fn run_inner(
    cfg: &SessionConfig,
    statement: &str,
    expect: StatementKind,
) -> Result<RunOutput, CliError> {
    let (db, policies) = load_context(cfg)?;
    let stmt = parse_sql(statement)?.with_session(cfg.session());
    match (stmt.kind(), expect) {
        (StatementKind::Select, StatementKind::Select)
        | (StatementKind::Update, StatementKind::Update) => {}
        (StatementKind::Update, StatementKind::Select) => {
            return Err(CliError::WrongCommand {
                want: "update",
                got: "update statement",
            })
        }
        (StatementKind::Select, StatementKind::Update) => {
            return Err(CliError::WrongCommand {
                want: "query",
                got: "select statement",
            })
        }
    }

    let report = run_statement(&stmt, &policies, &db, cfg.mode, cfg.exec_options())?;
    let mut out = RunOutput::default();

    if cfg.explain {
        let _ = writeln!(out.stderr, "-- plan ({} mode)", cfg.mode.name());
        let _ = write!(out.stderr, "{}", stmt.plan);
        if let Some(r) = &report.rewrite {
            let _ = writeln!(out.stderr, "-- rewritten plan");
            let _ = write!(out.stderr, "{}", r.plan);
            let _ = writeln!(out.stderr, "-- injected");
            let _ = writeln!(out.stderr, "{}", r.injected.render());
            let _ = writeln!(out.stderr, "-- emitted sql");
            let _ = writeln!(out.stderr, "{}", r.emitted_sql);
        }
    }

    match &report.outcome {
        EnforcementOutcome::Completed { rows, dropped } => {
            let header: Vec<String> = {
                let mut plan = stmt.plan.clone();
                dfc_core::plan::validate(&mut plan, &db)?;
                output_scope(&plan, &db)
                    .map(|s| s.bindings.into_iter().map(|b| b.name).collect())
                    .unwrap_or_default()
            };
            out.stdout.push_str(&render_rows(&header, rows));
            if !dropped.is_empty() {
                let _ = writeln!(out.stdout, "-- {} row(s) dropped by policy", dropped.len());
                out.stdout.push_str(&report.outcome.report());
                out.stdout.push('\n');
            }
            out.exit_code = 0;
        }
        EnforcementOutcome::QueryKilled { .. } => {
            out.stdout.push_str(&report.outcome.report());
            out.stdout.push('\n');
            out.exit_code = 3;
        }
        EnforcementOutcome::UpdateApplied { updated, skipped } => {
            let _ = writeln!(
                out.stdout,
                "updated {updated} row(s), skipped {} row(s)",
                skipped.len()
            );
            if !skipped.is_empty() {
                out.stdout.push_str(&report.outcome.report());
                out.stdout.push('\n');
            }
            out.exit_code = if *updated == 0 && !skipped.is_empty() {
                4
            } else {
                0
            };
        }
    }
    let _ = writeln!(out.stderr, "{}", stats_line(&report));
    Ok(out)
}

/// Loads and summarizes the data directory.
pub fn load_summary(cfg: &SessionConfig) -> Result<String, CliError> {
    let db = load_database(cfg)?;
    let mut out = String::new();
    for (name, rel) in db.iter() {
        let _ = writeln!(
            out,
            "loaded {name}: {} rows, {} columns",
            rel.rows.len(),
            rel.schema.columns.len()
        );
    }
    Ok(out)
}

/// Parses, normalizes, and validates policy files against the data
/// directory's schema; prints one summary line per policy.
pub fn policy_add_summary(cfg: &SessionConfig, files: &[PathBuf]) -> Result<String, CliError> {
    let db = load_database(cfg)?;
    let mut policies = PolicySet::new();
    let mut out = String::new();
    for file in files {
        let text = std::fs::read_to_string(file)
            .map_err(|e| CliError::Msg(format!("{}: {e}", file.display())))?;
        let n = policies.register_text(&text, &db)?;
        let _ = writeln!(out, "{}: {} policy(ies)", file.display(), n);
    }
    for p in policies.iter() {
        let _ = writeln!(out, "{p}");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// TPC-H-lite data generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TpchSummary {
    pub lineitem: u64,
    pub orders: u64,
    pub customer: u64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn date_string(day_offset: u32) -> String {
    // Deterministic pseudo-calendar: twelve 30-day months per year.
    let year = 1992 + day_offset / 360;
    let month = (day_offset % 360) / 30 + 1;
    let day = (day_offset % 30) + 1;
    format!("{year:04}-{month:02}-{day:02}")
}

/// Generates deterministic `lineitem`, `orders`, and `customer` relations at
/// the given scale (rows in lineitem; orders are a quarter of that, customers
/// a tenth of orders) and dumps them as a loadable data directory.
pub fn gen_tpch_lite(scale: u64, seed: u64, out: &Path) -> Result<TpchSummary, CliError> {
    let db = tpch_lite_database(scale, seed);
    dump_dir(&db, out)?;
    Ok(TpchSummary {
        lineitem: db.relation("lineitem").map(|r| r.rows.len() as u64).unwrap_or(0),
        orders: db.relation("orders").map(|r| r.rows.len() as u64).unwrap_or(0),
        customer: db.relation("customer").map(|r| r.rows.len() as u64).unwrap_or(0),
    })
}

/// Builds the benchmark database in memory.
pub fn tpch_lite_database(scale: u64, seed: u64) -> Database {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n_line = scale.max(1);
    let n_orders = (scale / 4).max(1);
    let n_cust = (n_orders / 10).max(1);
    let n_parts = (scale / 30).max(1);
    let n_supp = (scale / 300).max(1);

    let segments = ["AUTOMOBILE", "BUILDING", "FURNITURE", "MACHINERY", "HOUSEHOLD"];
    let priorities = ["1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"];
    let ship_modes = ["REG AIR", "AIR", "RAIL", "SHIP", "TRUCK", "MAIL", "FOB"];
    let flags = ["R", "A", "N"];
    let statuses = ["O", "F"];
    let order_statuses = ["O", "F", "P"];

    let mut customer = Vec::with_capacity(n_cust as usize);
    for k in 1..=n_cust {
        customer.push(vec![
            Value::Int(k as i64),
            Value::text(format!("Customer#{k:09}")),
            Value::text(*pick(&mut r, &segments)),
            Value::Int(r.gen_range(0..25)),
        ]);
    }

    let mut orders = Vec::with_capacity(n_orders as usize);
    for k in 1..=n_orders {
        orders.push(vec![
            Value::Int(k as i64),
            Value::Int(r.gen_range(1..=n_cust as i64)),
            Value::text(*pick(&mut r, &order_statuses)),
            Value::Decimal(round2(r.gen_range(1000.0..400000.0))),
            Value::text(*pick(&mut r, &priorities)),
        ]);
    }

    let mut lineitem = Vec::with_capacity(n_line as usize);
    for _ in 0..n_line {
        let partkey = r.gen_range(1..=n_parts as i64);
        let quantity = r.gen_range(1..=50) as f64;
        let price = round2(quantity * (900.0 + (partkey * 7 % 1200) as f64));
        lineitem.push(vec![
            Value::Int(r.gen_range(1..=n_orders as i64)),
            Value::Int(partkey),
            Value::Int(r.gen_range(1..=n_supp as i64)),
            Value::Decimal(quantity),
            Value::Decimal(price),
            Value::Decimal(round2(r.gen_range(0..=10) as f64 / 100.0)),
            Value::Decimal(round2(r.gen_range(0..=8) as f64 / 100.0)),
            Value::text(*pick(&mut r, &flags)),
            Value::text(*pick(&mut r, &statuses)),
            Value::text(date_string(r.gen_range(0..2520))),
            Value::text(*pick(&mut r, &ship_modes)),
        ]);
    }

    let mut db = Database::new();
    db.add_relation(
        relation_from_rows(
            "lineitem",
            vec![
                ("l_orderkey", ValType::Int, false),
                ("l_partkey", ValType::Int, false),
                ("l_suppkey", ValType::Int, false),
                ("l_quantity", ValType::Decimal, false),
                ("l_extendedprice", ValType::Decimal, false),
                ("l_discount", ValType::Decimal, false),
                ("l_tax", ValType::Decimal, false),
                ("l_returnflag", ValType::Text, false),
                ("l_linestatus", ValType::Text, false),
                ("l_shipdate", ValType::Text, false),
                ("l_shipmode", ValType::Text, false),
            ],
            lineitem,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "orders",
            vec![
                ("o_orderkey", ValType::Int, false),
                ("o_custkey", ValType::Int, false),
                ("o_orderstatus", ValType::Text, false),
                ("o_totalprice", ValType::Decimal, false),
                ("o_orderpriority", ValType::Text, false),
            ],
            orders,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "customer",
            vec![
                ("c_custkey", ValType::Int, false),
                ("c_name", ValType::Text, false),
                ("c_mktsegment", ValType::Text, false),
                ("c_nationkey", ValType::Int, false),
            ],
            customer,
        )
        .unwrap(),
    )
    .unwrap();
    db
}

fn pick<'a, T>(r: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[r.gen_range(0..xs.len())]
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

/// Monotonic aggregation queries scanning `lineitem`: every join is
/// key-preserving (orders by o_orderkey, customer by c_custkey), so each
/// group row corresponds to exactly one lineitem contributor.
pub const BENCH_QUERIES: &[(&str, &str)] = &[
    (
        "q1_pricing_summary",
        "SELECT l_returnflag, l_linestatus, sum(l_quantity) AS sum_qty, sum(l_extendedprice) AS sum_base, count(*) AS count_order FROM lineitem WHERE l_shipdate <= '1996-06-15' GROUP BY l_returnflag, l_linestatus",
    ),
    (
        "q2_priority_counts",
        "SELECT o_orderpriority, count(*) AS order_count FROM lineitem JOIN orders ON lineitem.l_orderkey = orders.o_orderkey WHERE l_discount > 0.02 GROUP BY o_orderpriority",
    ),
    (
        "q3_part_quantities",
        "SELECT l_partkey, sum(l_quantity) AS qty, count(*) AS cnt FROM lineitem WHERE l_discount < 0.05 GROUP BY l_partkey",
    ),
    (
        "q4_segment_revenue",
        "SELECT c_mktsegment, o_orderpriority, sum(l_extendedprice) AS revenue, count(*) AS cnt FROM lineitem JOIN orders ON lineitem.l_orderkey = orders.o_orderkey JOIN customer ON orders.o_custkey = customer.c_custkey WHERE l_tax < 0.07 GROUP BY c_mktsegment, o_orderpriority",
    ),
];

/// Contributor threshold rescaled from 1500-at-6M-rows, floor 2, so group
/// selectivity is preserved across scales.
pub fn bench_threshold(lineitem_rows: u64) -> i64 {
    ((1500.0 * lineitem_rows as f64 / 6_000_000.0).round() as i64).max(2)
}

pub fn bench_policy_text(k: i64) -> String {
    format!("POLICY OVER lineitem CONSTRAINT count(*) >= {k} ON FAIL KILL ROW")
}

#[derive(Debug, Clone)]
pub struct BenchEntry {
    pub query: String,
    pub mode: Mode,
    pub reps: usize,
    pub median_ms: f64,
    pub rows_scanned: u64,
    pub rows_output: u64,
    pub annotations_created: u64,
    pub survivors: usize,
    pub digest: String,
}

impl BenchEntry {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "query": self.query,
            "mode": self.mode.name(),
            "reps": self.reps,
            "median_ms": self.median_ms,
            "rows_scanned": self.rows_scanned,
            "rows_output": self.rows_output,
            "annotations_created": self.annotations_created,
            "survivors": self.survivors,
            "digest": self.digest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub threshold: i64,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_json().to_string());
            out.push('\n');
        }
        out
    }

    pub fn entry(&self, query: &str, mode: Mode) -> Option<&BenchEntry> {
        self.entries
            .iter()
            .find(|e| e.query == query && e.mode == mode)
    }

    /// time(mode) / time(off) per query.
    pub fn overhead(&self, query: &str, mode: Mode) -> Option<f64> {
        let m = self.entry(query, mode)?.median_ms;
        let off = self.entry(query, Mode::Off)?.median_ms;
        Some(m / off.max(f64::MIN_POSITIVE))
    }
}

/// Stable digest of an enforcement outcome: kind, killing policy (if any),
/// and the surviving row multiset. Rewrite mode cannot report per-row
/// violation diagnostics, so those stay out of the digest by design.
pub fn digest_outcome(outcome: &EnforcementOutcome) -> String {
    let mut h = Sha256::new();
    match outcome {
        EnforcementOutcome::Completed { rows, .. } => {
            h.update(b"completed");
            let mut rendered: Vec<String> = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|v| v.render())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect();
            rendered.sort();
            for line in rendered {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        EnforcementOutcome::QueryKilled { violation } => {
            h.update(b"killed:");
            h.update(violation.policy.as_bytes());
        }
        EnforcementOutcome::UpdateApplied { updated, .. } => {
            h.update(b"updated:");
            h.update(updated.to_string().as_bytes());
        }
    }
    let out = h.finalize();
    out.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

const BENCH_MODES: [Mode; 4] = [Mode::Off, Mode::Rewrite, Mode::Capture, Mode::Oracle];

/// Runs every shipped query under all four modes, `reps` timed repetitions
/// each (plus one warmup), checks outcome digests agree across modes, and
/// reports medians. Correctness before performance: a digest mismatch is a
/// hard error.
pub fn bench(db: &Database, reps: usize, row_cap: u64) -> Result<BenchReport, CliError> {
    let lineitem_rows = db.relation("lineitem")?.rows.len() as u64;
    let k = bench_threshold(lineitem_rows);
    let mut policies = PolicySet::new();
    policies.register_text(&bench_policy_text(k), db)?;
    let opts = ExecOptions { row_cap };
    let reps = reps.max(1);

    struct Cell {
        times: Vec<f64>,
        last: Option<RunReport>,
    }
    let mut cells: Vec<Vec<Cell>> = BENCH_QUERIES
        .iter()
        .map(|_| {
            BENCH_MODES
                .iter()
                .map(|_| Cell {
                    times: Vec::new(),
                    last: None,
                })
                .collect()
        })
        .collect();

    // Warmup rep 0, then timed reps; modes interleave within a rep so drift
    // hits all modes alike.
    for rep in 0..=reps {
        for (qi, (_, sql)) in BENCH_QUERIES.iter().enumerate() {
            let stmt = parse_sql(sql)?;
            for (mi, mode) in BENCH_MODES.iter().enumerate() {
                let started = Instant::now();
                let report = run_statement(&stmt, &policies, db, *mode, opts)?;
                let elapsed = started.elapsed().as_secs_f64() * 1e3;
                if rep > 0 {
                    cells[qi][mi].times.push(elapsed);
                }
                cells[qi][mi].last = Some(report);
            }
        }
    }

    let mut entries = Vec::new();
    for (qi, (name, _)) in BENCH_QUERIES.iter().enumerate() {
        let mut digests = Vec::new();
        for (mi, mode) in BENCH_MODES.iter().enumerate() {
            let cell = &mut cells[qi][mi];
            let report = cell.last.take().expect("ran at least once");
            let digest = digest_outcome(&report.outcome);
            let survivors = match &report.outcome {
                EnforcementOutcome::Completed { rows, .. } => rows.len(),
                _ => 0,
            };
            let mut times = cell.times.clone();
            times.sort_by(|a, b| a.total_cmp(b));
            let median_ms = times[times.len() / 2];
            digests.push((mode.name(), digest.clone()));
            entries.push(BenchEntry {
                query: name.to_string(),
                mode: *mode,
                reps,
                median_ms,
                rows_scanned: report.stats.rows_scanned,
                rows_output: report.stats.rows_output,
                annotations_created: report.stats.annotations_created,
                survivors,
                digest,
            });
        }
        let first = &digests[0].1;
        if let Some((mode, other)) = digests.iter().find(|(m, d)| d != first && *m != "off") {
            // `off` runs without the policy, so it legitimately differs;
            // enforced modes must agree among themselves.
            let enforced: Vec<&(&str, String)> =
                digests.iter().filter(|(m, _)| *m != "off").collect();
            let head = &enforced[0].1;
            if enforced.iter().any(|(_, d)| d != head) {
                return Err(CliError::DigestMismatch(format!(
                    "query {name}: mode {mode} digest {other} differs"
                )));
            }
        }
    }
    Ok(BenchReport {
        threshold: k,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_rescales_with_floor() {
        assert_eq!(bench_threshold(6_000_000), 1500);
        assert_eq!(bench_threshold(60_000), 15);
        assert_eq!(bench_threshold(10), 2);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = tpch_lite_database(500, 7);
        let b = tpch_lite_database(500, 7);
        for name in ["lineitem", "orders", "customer"] {
            assert_eq!(
                a.relation(name).unwrap().rows,
                b.relation(name).unwrap().rows
            );
        }
        let c = tpch_lite_database(500, 8);
        assert_ne!(
            a.relation("lineitem").unwrap().rows,
            c.relation("lineitem").unwrap().rows
        );
    }

    #[test]
    fn degenerate_scale_runs_all_queries() {
        let db = tpch_lite_database(1, 1);
        assert_eq!(db.relation("lineitem").unwrap().rows.len(), 1);
        assert_eq!(db.relation("orders").unwrap().rows.len(), 1);
        assert_eq!(db.relation("customer").unwrap().rows.len(), 1);
        let report = bench(&db, 1, ExecOptions::default().row_cap).unwrap();
        assert_eq!(report.entries.len(), BENCH_QUERIES.len() * 4);
    }

    #[test]
    fn user_value_parsing() {
        assert_eq!(parse_user_value("7"), Value::Int(7));
        assert_eq!(parse_user_value("alice"), Value::text("alice"));
    }
}
