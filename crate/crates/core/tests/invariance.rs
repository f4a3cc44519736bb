//! Cross-cutting enforcement invariants: plan-shape independence, FSM
//! update histories, prompt-injection completeness, no-capture execution,
//! and structure preservation of rewritten plans.

use dfc_core::engine::{run_statement, Mode};
use dfc_core::exec::ExecOptions;
use dfc_core::expr::Session;
use dfc_core::oracle::{
    enforce_select, evaluate_policy_row, execute_with_provenance, EnforcementOutcome,
};
use dfc_core::plan::LogicalPlan;
use dfc_core::policy::PolicySet;
use dfc_core::rewrite::rewrite_select;
use dfc_core::sql::parse_sql;
use dfc_core::testkit::{
    self, fsm_update_statement, fsm_users_db, generate_case, pushdown_pair, Family, FsmSimulator,
    FSM_TWO_POLICIES,
};
use dfc_core::value::Value;

fn annotated_signature(
    plan: &LogicalPlan,
    db: &dfc_core::schema::Database,
) -> Vec<(Vec<Value>, String)> {
    let (rows, _) =
        execute_with_provenance(plan, db, &Session::default(), ExecOptions::default()).unwrap();
    let mut sig: Vec<(Vec<Value>, String)> = rows
        .iter()
        .map(|r| (r.values.clone(), r.prov.to_string()))
        .collect();
    sig.sort_by_key(|(v, p)| format!("{v:?}|{p}"));
    sig
}

#[test]
fn aggregate_pushdown_preserves_values_provenance_and_decisions() {
    for seed in 0..100u64 {
        let pair = pushdown_pair(seed);
        let top_sig = annotated_signature(&pair.top, &pair.db);
        let pushed_sig = annotated_signature(&pair.pushed, &pair.db);
        assert_eq!(top_sig, pushed_sig, "seed {seed}: shapes disagree");

        // Policy decisions are identical per annotated row.
        let mut policies = PolicySet::new();
        policies.register_text(&pair.policy, &pair.db).unwrap();
        let policy = policies.iter().next().unwrap();
        let session = Session::default();
        let (top_rows, _) =
            execute_with_provenance(&pair.top, &pair.db, &session, ExecOptions::default())
                .unwrap();
        let (pushed_rows, _) =
            execute_with_provenance(&pair.pushed, &pair.db, &session, ExecOptions::default())
                .unwrap();
        let decide = |rows: &[dfc_core::oracle::AnnotatedRow]| {
            let mut d: Vec<(String, bool)> = rows
                .iter()
                .map(|r| {
                    let pass = evaluate_policy_row(policy, r, &pair.db, &session)
                        .unwrap()
                        .is_none();
                    (format!("{:?}", r.values), pass)
                })
                .collect();
            d.sort();
            d
        };
        assert_eq!(
            decide(&top_rows),
            decide(&pushed_rows),
            "seed {seed}: policy decisions diverge"
        );
    }
}

#[test]
fn kill_row_output_is_an_ordered_subset_of_unenforced_output() {
    for seed in 0..40u64 {
        let case = generate_case(Family::Sanitization, seed);
        let stmt = parse_sql(&case.statement)
            .unwrap()
            .with_session(case.session.clone());
        let mut policies = PolicySet::new();
        for p in &case.policies {
            policies.register_text(p, &case.db).unwrap();
        }
        let off = run_statement(&stmt, &policies, &case.db, Mode::Off, ExecOptions::default())
            .unwrap();
        let enforced = run_statement(
            &stmt,
            &policies,
            &case.db,
            Mode::Oracle,
            ExecOptions::default(),
        )
        .unwrap();
        let all = match &off.outcome {
            EnforcementOutcome::Completed { rows, .. } => rows.clone(),
            _ => unreachable!(),
        };
        let kept = match &enforced.outcome {
            EnforcementOutcome::Completed { rows, .. } => rows.clone(),
            _ => unreachable!(),
        };
        // Subsequence check preserves relative order.
        let mut it = all.iter();
        for k in &kept {
            assert!(
                it.any(|r| r == k),
                "seed {seed}: enforced output is not an ordered subsequence"
            );
        }
    }
}

#[test]
fn fsm_histories_match_independent_simulator_in_both_modes() {
    for seed in 0..30u64 {
        let mut r = testkit::rng(seed);
        let n_users = 1 + (seed as usize % 25);
        let db0 = fsm_users_db(&mut r, n_users);

        let mut policies = PolicySet::new();
        for p in FSM_TWO_POLICIES {
            policies.register_text(p, &db0).unwrap();
        }

        for mode in [Mode::Oracle, Mode::Rewrite] {
            let mut r = testkit::rng(seed + 1000);
            let mut db = db0.clone();
            let mut sim = FsmSimulator::from_relation(db.relation("users").unwrap());
            for _ in 0..12 {
                let sql = fsm_update_statement(&mut r, n_users);
                let stmt = parse_sql(&sql).unwrap();
                let report =
                    run_statement(&stmt, &policies, &db, mode, ExecOptions::default()).unwrap();
                if let Some(newdb) = report.new_db {
                    db = newdb;
                }
                // Mirror the statement on the simulator.
                let (new_status, new_email, pred) = parse_update_for_sim(&sql);
                sim.apply(&new_status, new_email.as_deref(), |id, status| match &pred {
                    SimPred::All => true,
                    SimPred::IdEq(k) => id == *k,
                    SimPred::IdLt(k) => id < *k,
                    SimPred::StatusEq(s) => status == s,
                });
            }
            let final_rows: Vec<(i64, String, String)> = db
                .relation("users")
                .unwrap()
                .rows
                .iter()
                .map(|(_, v)| {
                    (
                        match &v[0] {
                            Value::Int(i) => *i,
                            _ => unreachable!(),
                        },
                        match &v[1] {
                            Value::Text(s) => s.clone(),
                            _ => unreachable!(),
                        },
                        match &v[2] {
                            Value::Text(s) => s.clone(),
                            _ => unreachable!(),
                        },
                    )
                })
                .collect();
            assert_eq!(
                final_rows,
                sim.states(),
                "seed {seed} mode {} diverges from FSM simulator",
                mode.name()
            );
        }
    }
}

enum SimPred {
    All,
    IdEq(i64),
    IdLt(i64),
    StatusEq(String),
}

/// Extracts (status, email, predicate) from the generator's update SQL.
/// Deliberately string-based so the simulator shares nothing with the
/// engine's parser.
fn parse_update_for_sim(sql: &str) -> (String, Option<String>, SimPred) {
    let status = sql
        .split("status = '")
        .nth(1)
        .and_then(|s| s.split('\'').next())
        .expect("generator always sets status")
        .to_string();
    let email = sql
        .split("email = '")
        .nth(1)
        .and_then(|s| s.split('\'').next())
        .map(|s| s.to_string());
    let pred = if let Some(rest) = sql.split(" WHERE ").nth(1) {
        if let Some(v) = rest.strip_prefix("id = ") {
            SimPred::IdEq(v.trim().parse().unwrap())
        } else if let Some(v) = rest.strip_prefix("id < ") {
            SimPred::IdLt(v.trim().parse().unwrap())
        } else if let Some(v) = rest.strip_prefix("status = '") {
            SimPred::StatusEq(v.trim_end_matches('\'').to_string())
        } else {
            panic!("unexpected predicate in {sql}");
        }
    } else {
        SimPred::All
    };
    (status, email, pred)
}

#[test]
fn sanitization_enforcement_is_complete_under_recomputation() {
    for seed in 0..40u64 {
        let case = generate_case(Family::Sanitization, seed);
        let stmt = parse_sql(&case.statement)
            .unwrap()
            .with_session(case.session.clone());
        let mut policies = PolicySet::new();
        for p in &case.policies {
            policies.register_text(p, &case.db).unwrap();
        }
        let enforced = run_statement(
            &stmt,
            &policies,
            &case.db,
            Mode::Rewrite,
            ExecOptions::default(),
        )
        .unwrap();
        let survivors = match &enforced.outcome {
            EnforcementOutcome::Completed { rows, .. } => rows.clone(),
            _ => unreachable!("sanitization policies are KILL ROW"),
        };

        // Recompute provenance of the unenforced query and index rows by
        // value; every surviving row's derivations must be fully sanitized
        // in at least the surviving multiplicity.
        let (annotated, _) = execute_with_provenance(
            &stmt.plan,
            &case.db,
            &case.session,
            ExecOptions::default(),
        )
        .unwrap();
        let policed: Vec<&str> = case
            .policies
            .iter()
            .map(|p| {
                if p.contains("OVER products") {
                    "products"
                } else {
                    "reviews"
                }
            })
            .collect();
        for row in &survivors {
            let matching: Vec<_> = annotated.iter().filter(|a| &a.values == row).collect();
            assert!(!matching.is_empty());
            let clean = matching.iter().any(|a| {
                policed.iter().all(|rel| {
                    a.prov.contributors(rel).iter().all(|tid| {
                        let rel = case.db.relation(&tid.relation).unwrap();
                        let idx = rel.schema.column_index("sanitized").unwrap();
                        rel.row_by_ordinal(tid.ordinal).unwrap()[idx] == Value::Bool(true)
                    })
                })
            });
            assert!(
                clean,
                "seed {seed}: surviving row {row:?} has an unsanitized contributor"
            );
        }
    }
}

#[test]
fn rewritten_plans_create_zero_annotations_and_preserve_structure() {
    for family in [Family::Disaggregation, Family::KAnonymity, Family::Sanitization] {
        for seed in 0..25u64 {
            let case = generate_case(family, seed);
            let stmt = parse_sql(&case.statement)
                .unwrap()
                .with_session(case.session.clone());
            let mut policies = PolicySet::new();
            for p in &case.policies {
                policies.register_text(p, &case.db).unwrap();
            }
            let applicable = policies.applicable_to(&stmt);
            let n_policies = applicable.len();
            let n_dims: usize = applicable
                .iter()
                .map(|p| p.catalog_dims().count())
                .collect::<Vec<_>>()
                .iter()
                .sum();
            let r = rewrite_select(&stmt.plan, &applicable, &case.session, &case.db).unwrap();

            // Budget: per policy one guard (plus one restore projection for
            // the whole rewrite) and one residual filter; per catalog
            // dimension a join and its scan.
            let budget = n_policies * 2 + n_dims * 2 + 1;
            assert!(
                r.injected.nodes_added <= budget,
                "{family:?} seed {seed}: added {} nodes > budget {budget}\n{}",
                r.injected.nodes_added,
                r.plan
            );

            // Join order of the user's plan is unchanged: original scan
            // sequence is a prefix-preserving subsequence of the rewritten
            // one (dimension scans are appended, never interleaved).
            let scans = |p: &LogicalPlan| {
                let mut v = Vec::new();
                fn walk(p: &LogicalPlan, v: &mut Vec<String>) {
                    if let LogicalPlan::Scan { relation, alias } = p {
                        v.push(format!("{relation}/{alias}"));
                    }
                    for c in p.children() {
                        walk(c, v);
                    }
                }
                walk(p, &mut v);
                v
            };
            let orig_scans = scans(&stmt.plan);
            let new_scans = scans(&r.plan);
            assert!(
                new_scans.starts_with(&orig_scans[..]),
                "{family:?} seed {seed}: user scan order changed: {orig_scans:?} -> {new_scans:?}"
            );

            // The rewritten plan runs annotation-free.
            match run_statement(&stmt, &policies, &case.db, Mode::Rewrite, ExecOptions::default())
            {
                Ok(report) => assert_eq!(report.stats.annotations_created, 0),
                Err(e) => panic!("{family:?} seed {seed}: {e}"),
            }
        }
    }
}

#[test]
fn empty_policy_set_enforcement_equals_plain_execution() {
    for family in [Family::Disaggregation, Family::KAnonymity] {
        for seed in 0..10u64 {
            let case = generate_case(family, seed);
            let stmt = parse_sql(&case.statement)
                .unwrap()
                .with_session(case.session.clone());
            if stmt.plan.is_update() {
                continue;
            }
            let empty = PolicySet::new();
            let (outcome, _) = enforce_select(
                &stmt.plan,
                &empty,
                &case.db,
                &case.session,
                ExecOptions::default(),
            )
            .unwrap();
            let off = run_statement(&stmt, &empty, &case.db, Mode::Off, ExecOptions::default())
                .unwrap();
            match (&outcome, &off.outcome) {
                (
                    EnforcementOutcome::Completed { rows: a, dropped },
                    EnforcementOutcome::Completed { rows: b, .. },
                ) => {
                    assert_eq!(a, b);
                    assert!(dropped.is_empty());
                }
                other => panic!("unexpected outcomes {other:?}"),
            }
        }
    }
}
