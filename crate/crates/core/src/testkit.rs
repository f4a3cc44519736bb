//! Deterministic random-case generation and cross-engine comparison,
//! shared by the property tests, the equivalence suite, and the acceptance
//! harness.
//!
//! Four case families mirror the shipped policy examples: disaggregation
//! (count distinct of a protected attribute, kill query), k-anonymity
//! (minimum distinct contributors for public users, kill row, catalog
//! dimension), single-attribute FSM transitions over updates, and
//! sanitization (no unsanitized contributor reaches the output).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::engine::{run_statement, Mode, RunReport};
use crate::exec::ExecOptions;
use crate::expr::Session;
use crate::oracle::EnforcementOutcome;
use crate::policy::PolicySet;
use crate::schema::{relation_from_rows, Database, Relation};
use crate::sql::parse_sql;
use crate::value::{ValType, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Disaggregation,
    KAnonymity,
    Fsm,
    Sanitization,
}

pub const FAMILIES: [Family; 4] = [
    Family::Disaggregation,
    Family::KAnonymity,
    Family::Fsm,
    Family::Sanitization,
];

#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub family: Family,
    pub db: Database,
    pub statement: String,
    pub policies: Vec<String>,
    pub session: Session,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gen_rows(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

fn pick<'a, T>(r: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[r.gen_range(0..xs.len())]
}

pub fn generate_case(family: Family, seed: u64) -> GeneratedCase {
    let mut r = rng(seed);
    match family {
        Family::Disaggregation => gen_disaggregation(&mut r),
        Family::KAnonymity => gen_kanonymity(&mut r),
        Family::Fsm => gen_fsm(&mut r),
        Family::Sanitization => gen_sanitization(&mut r),
    }
}

fn gen_disaggregation(r: &mut ChaCha8Rng) -> GeneratedCase {
    let n = gen_rows(r, 1, 120);
    let schools = ["north", "south", "east"];
    let ethnicities = ["A", "B", "C"];
    let mut rows = Vec::new();
    for i in 0..n {
        let ethnicity = if r.gen_bool(0.1) {
            Value::Null
        } else {
            Value::text(*pick(r, &ethnicities))
        };
        rows.push(vec![
            Value::Int(i as i64 + 1),
            Value::text(*pick(r, &schools)),
            ethnicity,
            Value::Decimal((r.gen_range(40..100)) as f64),
            Value::Int(if r.gen_bool(0.7) { 2024 } else { 2023 }),
        ]);
    }
    let m = gen_rows(r, 1, 80);
    let mut s2 = Vec::new();
    for _ in 0..m {
        s2.push(vec![
            Value::Int(r.gen_range(1..=n as i64)),
            Value::Int(r.gen_range(1..=2)),
        ]);
    }
    let mut db = Database::new();
    db.add_relation(
        relation_from_rows(
            "students",
            vec![
                ("sid", ValType::Int, false),
                ("school", ValType::Text, false),
                ("ethnicity", ValType::Text, true),
                ("score", ValType::Decimal, false),
                ("year", ValType::Int, false),
            ],
            rows,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "s2",
            vec![("sid", ValType::Int, false), ("year", ValType::Int, false)],
            s2,
        )
        .unwrap(),
    )
    .unwrap();

    let queries = [
        "SELECT school, avg(score) AS a FROM students GROUP BY school".to_string(),
        "SELECT school, count(*) AS n FROM students JOIN s2 ON students.sid = s2.sid WHERE students.year = 2024 GROUP BY school".to_string(),
        format!(
            "SELECT ethnicity, score FROM students WHERE score > {}.0",
            r.gen_range(40..95)
        ),
        "SELECT DISTINCT school FROM students".to_string(),
        "SELECT school, ethnicity FROM students JOIN s2 ON students.sid = s2.sid".to_string(),
        "SELECT count(distinct school) AS schools FROM students".to_string(),
    ];
    let statement = pick(r, &queries).clone();
    let on_fail = if r.gen_bool(0.6) { "KILL QUERY" } else { "KILL ROW" };
    let policy = format!(
        "POLICY OVER students\nAGG count(distinct ethnicity) as cnt\nCONSTRAINT cnt = 1\nON FAIL {on_fail}"
    );
    GeneratedCase {
        family: Family::Disaggregation,
        db,
        statement,
        policies: vec![policy],
        session: Session::default(),
    }
}

fn gen_kanonymity(r: &mut ChaCha8Rng) -> GeneratedCase {
    let groups = gen_rows(r, 1, 12) as i64;
    let n = gen_rows(r, 1, 150);
    let mut constituents = Vec::new();
    for i in 0..n {
        constituents.push(vec![
            Value::Int(i as i64 + 1),
            Value::Int(r.gen_range(1..=groups)),
        ]);
    }
    let mut t = Vec::new();
    for g in 1..=groups {
        if r.gen_bool(0.8) {
            t.push(vec![Value::Int(g), Value::Decimal(r.gen_range(0..1000) as f64 / 10.0)]);
        }
    }
    let n_users = gen_rows(r, 1, 10) as i64;
    let mut users = Vec::new();
    for id in 1..=n_users {
        let role = if r.gen_bool(0.5) { "Public" } else { "Analyst" };
        users.push(vec![Value::Int(id), Value::text(role)]);
    }
    let mut db = Database::new();
    db.add_relation(
        relation_from_rows(
            "constituents",
            vec![("id", ValType::Int, false), ("gid", ValType::Int, false)],
            constituents,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "t",
            vec![("gid", ValType::Int, false), ("secret", ValType::Decimal, false)],
            t,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "users",
            vec![("id", ValType::Int, false), ("role", ValType::Text, false)],
            users,
        )
        .unwrap(),
    )
    .unwrap();

    let queries = [
        "SELECT constituents.gid, count(distinct constituents.id) AS k FROM t JOIN constituents ON t.gid = constituents.gid GROUP BY constituents.gid".to_string(),
        "SELECT gid, count(distinct id) AS k FROM constituents GROUP BY gid".to_string(),
        format!(
            "SELECT id FROM constituents WHERE gid = {}",
            r.gen_range(1..=groups)
        ),
        "SELECT DISTINCT gid FROM constituents".to_string(),
    ];
    let statement = pick(r, &queries).clone();
    // The published listing verbatim, singular `user.role` included.
    let policy = "POLICY OVER constituents\nDIMENSION users\nCONSTRAINT users.id = current_user and \n  not (user.role = 'Public' and count(distinct id) < 3)\nON FAIL KILL ROW".to_string();
    let session = if r.gen_bool(0.85) {
        Session::with_user(Value::Int(r.gen_range(1..=n_users + 2)))
    } else {
        Session::with_user(Value::Int(n_users + 50)) // unknown user
    };
    GeneratedCase {
        family: Family::KAnonymity,
        db,
        statement,
        policies: vec![policy],
        session,
    }
}

pub const FSM_SINGLE_POLICY: &str = "\
POLICY UPDATE users as newu
DIMENSION users as oldu
AGG bool_and(oldu.status = 'Created') as allc
CONSTRAINT newu.status = 'Verified' and allc
ON FAIL KILL ROW";

/// Two implication-shaped policies covering Created -> Verified -> Active.
pub const FSM_TWO_POLICIES: [&str; 2] = [
    "POLICY UPDATE users as newu\nDIMENSION users as oldu\nCONSTRAINT not (newu.status = 'Verified') or bool_and(oldu.status = 'Created')\nON FAIL KILL ROW",
    "POLICY UPDATE users as newu\nDIMENSION users as oldu\nCONSTRAINT not (newu.status = 'Active') or bool_and(oldu.status = 'Verified')\nON FAIL KILL ROW",
];

pub const FSM_STATUSES: [&str; 3] = ["Created", "Verified", "Active"];

pub fn fsm_users_db(r: &mut ChaCha8Rng, n: usize) -> Database {
    let mut users = Vec::new();
    for i in 0..n {
        users.push(vec![
            Value::Int(i as i64 + 1),
            Value::text(*pick(r, &FSM_STATUSES)),
            Value::text(format!("u{i}@example.com")),
        ]);
    }
    let mut db = Database::new();
    db.add_relation(
        relation_from_rows(
            "users",
            vec![
                ("id", ValType::Int, false),
                ("status", ValType::Text, false),
                ("email", ValType::Text, false),
            ],
            users,
        )
        .unwrap(),
    )
    .unwrap();
    db
}

pub fn fsm_update_statement(r: &mut ChaCha8Rng, n_users: usize) -> String {
    let target = pick(r, &["Verified", "Active"]).to_string();
    let set = if r.gen_bool(0.2) {
        format!("status = '{target}', email = 'changed@example.com'")
    } else {
        format!("status = '{target}'")
    };
    let wh = match r.gen_range(0..4) {
        0 => String::new(),
        1 => format!(" WHERE id = {}", r.gen_range(1..=n_users as i64 + 1)),
        2 => format!(" WHERE id < {}", r.gen_range(1..=n_users as i64 + 1)),
        _ => format!(" WHERE status = '{}'", pick(r, &FSM_STATUSES)),
    };
    format!("UPDATE users SET {set}{wh}")
}

fn gen_fsm(r: &mut ChaCha8Rng) -> GeneratedCase {
    let n = gen_rows(r, 1, 60);
    let db = fsm_users_db(r, n);
    let statement = fsm_update_statement(r, n);
    let policies = match r.gen_range(0..3) {
        0 => vec![FSM_SINGLE_POLICY.to_string()],
        1 => FSM_TWO_POLICIES.iter().map(|s| s.to_string()).collect(),
        _ => vec![FSM_SINGLE_POLICY.replace("KILL ROW", "KILL QUERY")],
    };
    GeneratedCase {
        family: Family::Fsm,
        db,
        statement,
        policies,
        session: Session::default(),
    }
}

fn gen_sanitization(r: &mut ChaCha8Rng) -> GeneratedCase {
    let n = gen_rows(r, 1, 80);
    let nullable = r.gen_bool(0.4);
    let mut products = Vec::new();
    for i in 0..n {
        let sanitized = if nullable && r.gen_bool(0.15) {
            Value::Null
        } else {
            Value::Bool(r.gen_bool(0.7))
        };
        products.push(vec![
            Value::Int(i as i64 + 1),
            Value::text(format!("desc-{}", r.gen_range(0..30))),
            sanitized,
        ]);
    }
    let m = gen_rows(r, 1, 100);
    let mut reviews = Vec::new();
    for j in 0..m {
        reviews.push(vec![
            Value::Int(j as i64 + 1),
            Value::Int(r.gen_range(1..=n as i64)),
            Value::text(format!("review-{}", r.gen_range(0..40))),
            Value::Bool(r.gen_bool(0.8)),
        ]);
    }
    let mut db = Database::new();
    db.add_relation(
        relation_from_rows(
            "products",
            vec![
                ("pid", ValType::Int, false),
                ("description", ValType::Text, false),
                ("sanitized", ValType::Bool, nullable),
            ],
            products,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "reviews",
            vec![
                ("rid", ValType::Int, false),
                ("pid", ValType::Int, false),
                ("body", ValType::Text, false),
                ("sanitized", ValType::Bool, false),
            ],
            reviews,
        )
        .unwrap(),
    )
    .unwrap();

    let queries = [
        "SELECT description FROM products".to_string(),
        "SELECT products.description, reviews.body FROM products JOIN reviews ON products.pid = reviews.pid".to_string(),
        "SELECT DISTINCT description FROM products".to_string(),
        "SELECT products.pid, count(*) AS n FROM products JOIN reviews ON products.pid = reviews.pid GROUP BY products.pid".to_string(),
    ];
    let statement = pick(r, &queries).clone();
    let mut policies = vec![
        "POLICY OVER products \nCONSTRAINT bool_and(products.sanitized) \nON FAIL KILL ROW".to_string(),
    ];
    if r.gen_bool(0.5) {
        policies.push(
            "POLICY OVER reviews \nCONSTRAINT bool_and(reviews.sanitized) \nON FAIL KILL ROW"
                .to_string(),
        );
    }
    GeneratedCase {
        family: Family::Sanitization,
        db,
        statement,
        policies,
        session: Session::default(),
    }
}

// ---------------------------------------------------------------------------
// Cross-engine comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct CaseReport {
    pub fell_back: bool,
    pub killed: bool,
    pub survivors: usize,
}

fn sorted_rows(rows: &[Vec<Value>]) -> Vec<Vec<Value>> {
    let mut v = rows.to_vec();
    v.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            let ord = x.total_cmp(y);
            if !ord.is_eq() {
                return ord;
            }
        }
        a.len().cmp(&b.len())
    });
    v
}

fn outcome_signature(report: &RunReport, db: &Database, target: Option<&str>) -> (String, Vec<Vec<Value>>) {
    match &report.outcome {
        EnforcementOutcome::Completed { rows, .. } => {
            ("completed".to_string(), sorted_rows(rows))
        }
        EnforcementOutcome::QueryKilled { violation } => {
            (format!("killed:{}", violation.policy), vec![])
        }
        EnforcementOutcome::UpdateApplied { updated, .. } => {
            let state = match (&report.new_db, target) {
                (Some(newdb), Some(rel)) => newdb
                    .relation(rel)
                    .map(|r| r.rows.iter().map(|(_, v)| v.clone()).collect())
                    .unwrap_or_default(),
                (None, Some(rel)) => db
                    .relation(rel)
                    .map(|r| r.rows.iter().map(|(_, v)| v.clone()).collect())
                    .unwrap_or_default(),
                _ => vec![],
            };
            (format!("updated:{updated}"), state)
        }
    }
}

/// Runs one generated case under oracle, rewrite, and capture modes and
/// demands identical outcomes. Returns a summary or a diagnostic string.
pub fn assert_equivalent(case: &GeneratedCase) -> Result<CaseReport, String> {
    let mut policies = PolicySet::new();
    for p in &case.policies {
        policies
            .register_text(p, &case.db)
            .map_err(|e| format!("[{:?}] policy error: {e}\n{p}", case.family))?;
    }
    let stmt = parse_sql(&case.statement)
        .map_err(|e| format!("[{:?}] parse error: {e}\n{}", case.family, case.statement))?
        .with_session(case.session.clone());
    let target = match &stmt.plan {
        crate::plan::LogicalPlan::Update { relation, .. } => Some(relation.clone()),
        _ => None,
    };
    let opts = ExecOptions::default();

    let run = |mode: Mode| -> Result<RunReport, String> {
        run_statement(&stmt, &policies, &case.db, mode, opts).map_err(|e| {
            format!(
                "[{:?}] {} failed: {e}\nstatement: {}",
                case.family,
                mode.name(),
                case.statement
            )
        })
    };

    let oracle = run(Mode::Oracle)?;
    let rewrite = run(Mode::Rewrite)?;
    let capture = run(Mode::Capture)?;

    let sig_o = outcome_signature(&oracle, &case.db, target.as_deref());
    let sig_r = outcome_signature(&rewrite, &case.db, target.as_deref());
    let sig_c = outcome_signature(&capture, &case.db, target.as_deref());

    if sig_o != sig_r {
        return Err(format!(
            "[{:?}] oracle/rewrite divergence\nstatement: {}\npolicies: {:?}\nsession: {:?}\noracle:  {:?}\nrewrite: {:?}\nrewritten sql: {}",
            case.family,
            case.statement,
            case.policies,
            case.session,
            sig_o,
            sig_r,
            rewrite
                .rewrite
                .as_ref()
                .map(|r| r.emitted_sql.clone())
                .unwrap_or_else(|| "(fell back)".into()),
        ));
    }
    if sig_o != sig_c {
        return Err(format!(
            "[{:?}] oracle/capture divergence\nstatement: {}\noracle:  {:?}\ncapture: {:?}",
            case.family, case.statement, sig_o, sig_c
        ));
    }
    // Rewrite mode never materializes an annotation; capture always does
    // (provided the plan produced any tuple at all).
    if !rewrite.fell_back && rewrite.stats.annotations_created != 0 {
        return Err(format!(
            "[{:?}] rewrite created {} annotations",
            case.family, rewrite.stats.annotations_created
        ));
    }

    // Emit-mode: the rewritten SQL text re-parses to a plan that is again
    // oracle-equivalent.
    if let Some(r) = &rewrite.rewrite {
        let reparsed = parse_sql(&r.emitted_sql)
            .map_err(|e| {
                format!(
                    "[{:?}] emitted SQL does not re-parse: {e}\n{}",
                    case.family, r.emitted_sql
                )
            })?
            .with_session(case.session.clone());
        let replayed = run_statement(&reparsed, &PolicySet::new(), &case.db, Mode::Off, opts)
            .map(|rep| outcome_signature(&rep, &case.db, target.as_deref()))
            .or_else(|e| match e {
                crate::error::Error::Exec(crate::exec::ExecError::PolicyKilled {
                    policy, ..
                }) => Ok((format!("killed:{policy}"), vec![])),
                other => Err(format!(
                    "[{:?}] emitted SQL failed to execute: {other}\n{}",
                    case.family, r.emitted_sql
                )),
            })?;
        if replayed != sig_o {
            return Err(format!(
                "[{:?}] emitted SQL diverges from oracle\nstatement: {}\nemitted: {}\noracle: {:?}\nemitted result: {:?}",
                case.family, case.statement, r.emitted_sql, sig_o, replayed
            ));
        }
    }
    Ok(CaseReport {
        fell_back: rewrite.fell_back,
        killed: matches!(oracle.outcome, EnforcementOutcome::QueryKilled { .. }),
        survivors: match &oracle.outcome {
            EnforcementOutcome::Completed { rows, .. } => rows.len(),
            _ => 0,
        },
    })
}

// ---------------------------------------------------------------------------
// Policy-language conformance corpus
// ---------------------------------------------------------------------------

/// Golden corpus for the policy language, shared by the unit-level
/// conformance test and the acceptance suite.
pub mod corpus {
    use crate::policy::{normalize_policy, parse_policy, validate_policy, Policy, PolicyError};
    use crate::schema::{relation_from_rows, Database};
    use crate::value::ValType;

    pub fn fixture_db() -> Database {
        let mut db = Database::new();
        let rels: Vec<(&str, Vec<(&str, ValType, bool)>)> = vec![
            (
                "students",
                vec![
                    ("sid", ValType::Int, false),
                    ("school", ValType::Text, false),
                    ("ethnicity", ValType::Text, true),
                    ("score", ValType::Decimal, false),
                ],
            ),
            (
                "constituents",
                vec![("id", ValType::Int, false), ("gid", ValType::Int, false)],
            ),
            (
                "users",
                vec![
                    ("id", ValType::Int, false),
                    ("role", ValType::Text, false),
                    ("status", ValType::Text, false),
                ],
            ),
            (
                "t",
                vec![
                    ("x", ValType::Int, false),
                    ("y", ValType::Decimal, false),
                    ("sanitized", ValType::Bool, false),
                ],
            ),
            (
                "s",
                vec![("x", ValType::Int, false), ("flag", ValType::Bool, true)],
            ),
        ];
        for (name, cols) in rels {
            db.add_relation(relation_from_rows(name, cols, vec![]).unwrap())
                .unwrap();
        }
        db
    }

    /// (name, policy text, expected normalized summary)
    pub const VALID: &[(&str, &str, &str)] = &[
        (
            "disaggregation listing",
            "POLICY OVER students\nAGG count(distinct ethnicity) as cnt\nCONSTRAINT cnt = 1\nON FAIL KILL QUERY",
            "policy p: over students; agg count(distinct ethnicity) as cnt; constraint cnt = 1; on fail kill query",
        ),
        (
            "k-anonymity listing (verbatim, singular user.role)",
            "POLICY OVER constituents\nDIMENSION users\nCONSTRAINT users.id = current_user and \n  not (user.role = 'Public' and count(distinct id) < 3)\nON FAIL KILL ROW",
            "policy p: over constituents; dimension users [catalog]; agg count(distinct id) as __agg0; constraint users.id = current_user and not (user.role = 'Public' and __agg0 < 3); on fail kill row",
        ),
        (
            "business-process listing",
            "POLICY UPDATE users as newu\nDIMENSION users as oldu\nAGG bool_and(oldu.status = 'Created') as allc\nCONSTRAINT newu.status = 'Verified' and allc\nON FAIL KILL ROW",
            "policy p: update users as newu; dimension users as oldu [provenance]; agg bool_and(oldu.status = 'Created') as allc; constraint newu.status = 'Verified' and allc; on fail kill row",
        ),
        (
            "sanitization listing",
            "POLICY OVER t \nCONSTRAINT bool_and(sanitized) \nON FAIL KILL ROW",
            "policy p: over t; agg bool_and(sanitized) as __agg0; constraint __agg0; on fail kill row",
        ),
        (
            "named policy",
            "NAME guard POLICY OVER t CONSTRAINT count(*) >= 2 ON FAIL KILL ROW",
            "policy guard: over t; agg count(*) as __agg0; constraint __agg0 >= 2; on fail kill row",
        ),
        (
            "multi-relation over",
            "POLICY OVER t, s\nAGG count(distinct t.x) as tx, bool_or(s.flag) as anyflag\nCONSTRAINT tx = 1 and anyflag\nON FAIL KILL ROW",
            "policy p: over t, s; agg count(distinct t.x) as tx; agg bool_or(s.flag) as anyflag; constraint tx = 1 and anyflag; on fail kill row",
        ),
        (
            "declared aggs plus hoisted constraint agg",
            "POLICY OVER t\nAGG sum(x) as total\nCONSTRAINT total > 10 and min(y) = 0.0\nON FAIL KILL QUERY",
            "policy p: over t; agg sum(x) as total; agg min(y) as __agg0; constraint total > 10 and __agg0 = 0.0; on fail kill query",
        ),
        (
            "duplicate constraint aggregates share one entry",
            "POLICY OVER t\nCONSTRAINT sum(x) > 10 and sum(x) < 100\nON FAIL KILL ROW",
            "policy p: over t; agg sum(x) as __agg0; constraint __agg0 > 10 and __agg0 < 100; on fail kill row",
        ),
        (
            "comments and blank lines",
            "-- enforced for every report\nPOLICY OVER students -- target\n\nCONSTRAINT count(distinct ethnicity) = 1\nON FAIL KILL QUERY",
            "policy p: over students; agg count(distinct ethnicity) as __agg0; constraint __agg0 = 1; on fail kill query",
        ),
        (
            "update without explicit alias",
            "POLICY UPDATE users\nDIMENSION users as oldu\nCONSTRAINT bool_and(oldu.status = 'Created')\nON FAIL KILL ROW",
            "policy p: update users as users; dimension users as oldu [provenance]; agg bool_and(oldu.status = 'Created') as __agg0; constraint __agg0; on fail kill row",
        ),
        (
            "catalog and provenance dimensions together",
            "POLICY UPDATE users as newu\nDIMENSION users as oldu, students\nAGG bool_and(oldu.status = 'Created') as allc\nCONSTRAINT allc and students.school = 'north'\nON FAIL KILL ROW",
            "policy p: update users as newu; dimension users as oldu [provenance]; dimension students [catalog]; agg bool_and(oldu.status = 'Created') as allc; constraint allc and students.school = 'north'; on fail kill row",
        ),
        (
            "current_user in constraint",
            "POLICY OVER t\nDIMENSION users\nCONSTRAINT users.id = current_user and bool_and(sanitized)\nON FAIL KILL ROW",
            "policy p: over t; dimension users [catalog]; agg bool_and(sanitized) as __agg0; constraint users.id = current_user and __agg0; on fail kill row",
        ),
        (
            "case expression in constraint",
            "POLICY OVER t\nAGG max(y) as m\nCONSTRAINT case when m is null then false else m < 100.0 end\nON FAIL KILL ROW",
            "policy p: over t; agg max(y) as m; constraint case when m is null then false else m < 100.0 end; on fail kill row",
        ),
        (
            "implication-shaped transition",
            "POLICY UPDATE users as newu\nDIMENSION users as oldu\nCONSTRAINT not (newu.status = 'Active') or bool_and(oldu.status = 'Verified')\nON FAIL KILL ROW",
            "policy p: update users as newu; dimension users as oldu [provenance]; agg bool_and(oldu.status = 'Verified') as __agg0; constraint not newu.status = 'Active' or __agg0; on fail kill row",
        ),
    ];

    /// (name, policy text, expected error fragment)
    pub const INVALID: &[(&str, &str, &str)] = &[
        (
            "non-boolean constraint",
            "POLICY OVER t CONSTRAINT 1 ON FAIL KILL ROW",
            "constraint must be boolean",
        ),
        (
            "missing constraint clause",
            "POLICY OVER t ON FAIL KILL ROW",
            "expected `constraint`",
        ),
        (
            "missing on fail",
            "POLICY OVER t CONSTRAINT bool_and(sanitized)",
            "expected `on`",
        ),
        (
            "bad kill target",
            "POLICY OVER t CONSTRAINT bool_and(sanitized) ON FAIL KILL TABLE",
            "expected QUERY or ROW",
        ),
        (
            "unknown relation",
            "POLICY OVER ghosts CONSTRAINT count(*) = 1 ON FAIL KILL ROW",
            "unknown relation",
        ),
        (
            "unknown column",
            "POLICY OVER t CONSTRAINT bool_and(exorcised) ON FAIL KILL ROW",
            "unknown column",
        ),
        (
            "nested aggregates",
            "POLICY OVER t CONSTRAINT sum(count(x)) > 1 ON FAIL KILL ROW",
            "nested aggregate",
        ),
        (
            "update policy without prior-image dimension",
            "POLICY UPDATE users as newu CONSTRAINT newu.status = 'Verified' ON FAIL KILL ROW",
            "exactly one DIMENSION",
        ),
        (
            "subquery dimension",
            "POLICY OVER t DIMENSION (SELECT x FROM s) AS d CONSTRAINT count(*) = 1 ON FAIL KILL ROW",
            "subquery dimension",
        ),
        (
            "count(*) over two target relations",
            "POLICY OVER t, s CONSTRAINT count(*) > 1 ON FAIL KILL ROW",
            "count(*) is ambiguous",
        ),
        (
            "aggregate mixing two target relations",
            "POLICY OVER t, s CONSTRAINT sum(t.x + s.x) > 1 ON FAIL KILL ROW",
            "mixes columns",
        ),
        (
            "trailing garbage",
            "POLICY OVER t CONSTRAINT bool_and(sanitized) ON FAIL KILL ROW AND MORE",
            "unexpected input",
        ),
        (
            "unterminated string",
            "POLICY OVER t CONSTRAINT bool_and(sanitized) and school = 'north ON FAIL KILL ROW",
            "unterminated string",
        ),
        (
            "sum of a boolean column",
            "POLICY OVER t CONSTRAINT sum(sanitized) > 0 ON FAIL KILL ROW",
            "requires a numeric argument",
        ),
        (
            "bool_and of a numeric column",
            "POLICY OVER t CONSTRAINT bool_and(x) ON FAIL KILL ROW",
            "requires a boolean argument",
        ),
        (
            "duplicate aggregate alias",
            "POLICY OVER t AGG sum(x) as a, min(y) as a CONSTRAINT a > 1 ON FAIL KILL ROW",
            "duplicate aggregate alias",
        ),
    ];

    pub fn prepare(text: &str) -> Result<Policy, PolicyError> {
        let parsed = parse_policy(text)?;
        let mut normalized = normalize_policy(&parsed)?;
        if normalized.name.is_empty() {
            normalized.name = "p".into();
        }
        validate_policy(&mut normalized, &fixture_db())?;
        Ok(normalized)
    }

    /// Runs the whole corpus; returns (valid, invalid) counts or the first
    /// diagnostic.
    pub fn check() -> Result<(usize, usize), String> {
        for (name, text, expected) in VALID {
            let policy = prepare(text).map_err(|e| format!("{name}: {e}"))?;
            if &policy.to_string() != expected {
                return Err(format!(
                    "{name}: summary mismatch\n got: {policy}\nwant: {expected}"
                ));
            }
            // Normalization is idempotent over the corpus.
            let again = normalize_policy(&policy).map_err(|e| format!("{name}: {e}"))?;
            if again.aggs != policy.aggs || again.constraint != policy.constraint {
                return Err(format!("{name}: normalize is not idempotent"));
            }
        }
        for (name, text, fragment) in INVALID {
            match prepare(text) {
                Ok(p) => return Err(format!("{name}: unexpectedly valid: {p}")),
                Err(e) => {
                    let msg = e.to_string().to_lowercase();
                    if !msg.contains(&fragment.to_lowercase()) {
                        return Err(format!(
                            "{name}: error `{e}` does not mention `{fragment}`"
                        ));
                    }
                }
            }
        }
        Ok((VALID.len(), INVALID.len()))
    }
}

// ---------------------------------------------------------------------------
// Plan-shape invariance instances
// ---------------------------------------------------------------------------

/// A pair of plans equivalent under aggregate pushdown through a
/// key-preserving join: `gamma_k(A join B)` and `A join gamma_k(B)`. Both
/// must produce identical (values, polynomial) sets in standard form.
pub struct PushdownPair {
    pub db: Database,
    pub top: crate::plan::LogicalPlan,
    pub pushed: crate::plan::LogicalPlan,
    /// A disaggregation-style policy over `b` for decision comparison.
    pub policy: String,
}

pub fn pushdown_pair(seed: u64) -> PushdownPair {
    use crate::expr::{AggExpr, AggFunc, CmpOp, ColumnRef, ScalarExpr};
    use crate::plan::{LogicalPlan, ProjectItem};

    let mut r = rng(seed);
    let n_a = gen_rows(&mut r, 1, 40);
    let mut a_rows = Vec::new();
    for k in 1..=n_a {
        a_rows.push(vec![
            Value::Int(k as i64),
            Value::text(*pick(&mut r, &["x", "y", "z"])),
        ]);
    }
    let n_b = gen_rows(&mut r, 0, 120);
    let mut b_rows = Vec::new();
    for _ in 0..n_b {
        let tag = if r.gen_bool(0.1) {
            Value::Null
        } else {
            Value::text(*pick(&mut r, &["A", "B"]))
        };
        b_rows.push(vec![
            Value::Int(r.gen_range(1..=n_a as i64 + 2)),
            Value::Decimal(r.gen_range(0..500) as f64 / 10.0),
            tag,
        ]);
    }
    let mut db = Database::new();
    db.add_relation(
        relation_from_rows(
            "a",
            vec![("k", ValType::Int, false), ("grp", ValType::Text, false)],
            a_rows,
        )
        .unwrap(),
    )
    .unwrap();
    db.add_relation(
        relation_from_rows(
            "b",
            vec![
                ("k", ValType::Int, false),
                ("v", ValType::Decimal, false),
                ("tag", ValType::Text, true),
            ],
            b_rows,
        )
        .unwrap(),
    )
    .unwrap();

    let join_pred = ScalarExpr::cmp(
        CmpOp::Eq,
        ScalarExpr::column(Some("a"), "k"),
        ScalarExpr::column(Some("b"), "k"),
    );
    let aggs = || {
        vec![
            AggExpr::new(AggFunc::Sum, Some(ScalarExpr::column(Some("b"), "v")), "s"),
            AggExpr::new(AggFunc::Count, None, "c"),
        ]
    };
    // gamma_{a.k}(A join B), projected to (k, s, c).
    let top = LogicalPlan::scan("a")
        .join(LogicalPlan::scan("b"), join_pred)
        .aggregate(vec![ColumnRef::qualified("a", "k")], aggs())
        .project(vec![
            ProjectItem::new(ScalarExpr::column(Some("a"), "k"), "k"),
            ProjectItem::new(ScalarExpr::column(None, "s"), "s"),
            ProjectItem::new(ScalarExpr::column(None, "c"), "c"),
        ]);
    // A join gamma_{b.k}(B): a.k is unique, so per-row join equals the
    // grouped aggregate.
    let pushed = LogicalPlan::scan("a")
        .join(
            LogicalPlan::Alias {
                input: Box::new(LogicalPlan::scan("b").aggregate(
                    vec![ColumnRef::qualified("b", "k")],
                    vec![
                        AggExpr::new(AggFunc::Sum, Some(ScalarExpr::column(Some("b"), "v")), "s"),
                        AggExpr::new(AggFunc::Count, None, "c"),
                    ],
                )),
                alias: "g".to_string(),
            },
            ScalarExpr::cmp(
                CmpOp::Eq,
                ScalarExpr::column(Some("a"), "k"),
                ScalarExpr::column(Some("g"), "k"),
            ),
        )
        .project(vec![
            ProjectItem::new(ScalarExpr::column(Some("a"), "k"), "k"),
            ProjectItem::new(ScalarExpr::column(Some("g"), "s"), "s"),
            ProjectItem::new(ScalarExpr::column(Some("g"), "c"), "c"),
        ]);

    let policy = "POLICY OVER b\nAGG count(distinct tag) as cnt\nCONSTRAINT cnt = 1\nON FAIL KILL ROW".to_string();
    PushdownPair {
        db,
        top,
        pushed,
        policy,
    }
}

// ---------------------------------------------------------------------------
// Independent FSM simulator
// ---------------------------------------------------------------------------

/// Replays an update history over a plain map of user states, enforcing the
/// two-implication FSM (to Verified only from Created, to Active only from
/// Verified) without touching the policy engine. Used to cross-check update
/// enforcement.
pub struct FsmSimulator {
    /// (id, status, email) per user, in relation order.
    pub rows: Vec<(i64, String, String)>,
}

impl FsmSimulator {
    pub fn from_relation(rel: &Relation) -> FsmSimulator {
        let rows = rel
            .rows
            .iter()
            .map(|(_, v)| {
                let id = match &v[0] {
                    Value::Int(i) => *i,
                    _ => unreachable!(),
                };
                let status = match &v[1] {
                    Value::Text(s) => s.clone(),
                    _ => unreachable!(),
                };
                let email = match &v[2] {
                    Value::Text(s) => s.clone(),
                    _ => unreachable!(),
                };
                (id, status, email)
            })
            .collect();
        FsmSimulator { rows }
    }

    fn transition_allowed(old: &str, new: &str) -> bool {
        (new != "Verified" || old == "Created") && (new != "Active" || old == "Verified")
    }

    /// Applies `UPDATE users SET status='<target>' [, email=...] WHERE ...`
    /// mirrored as structured arguments.
    pub fn apply(
        &mut self,
        new_status: &str,
        new_email: Option<&str>,
        matches: impl Fn(i64, &str) -> bool,
    ) {
        for (id, status, email) in self.rows.iter_mut() {
            if !matches(*id, status) {
                continue;
            }
            if Self::transition_allowed(status, new_status) {
                *status = new_status.to_string();
                if let Some(e) = new_email {
                    *email = e.to_string();
                }
            }
        }
    }

    pub fn states(&self) -> Vec<(i64, String, String)> {
        self.rows.clone()
    }
}
