//! Golden corpus for the policy language: valid texts pinned to their
//! normalized shapes, invalid texts pinned to their errors, and the
//! normalize-twice property over everything that parses.

use dfc_core::policy::{normalize_policy, parse_policy};
use dfc_core::sql::ParseError;
use dfc_core::testkit::corpus;

#[test]
fn corpus_matches_goldens_and_documented_errors() {
    match corpus::check() {
        Ok((valid, invalid)) => {
            assert!(valid + invalid >= 20, "corpus too small");
        }
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn individual_golden_diagnostics() {
    // Re-run entry by entry so a failure names the offending text directly.
    for (name, text, expected) in corpus::VALID {
        let p = corpus::prepare(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(&p.to_string(), expected, "{name}");
    }
    for (name, text, fragment) in corpus::INVALID {
        let err = match corpus::prepare(text) {
            Err(e) => e.to_string(),
            Ok(p) => panic!("{name}: unexpectedly valid: {p}"),
        };
        assert!(
            err.to_lowercase().contains(&fragment.to_lowercase()),
            "{name}: error `{err}` does not mention `{fragment}`"
        );
    }
}

#[test]
fn normalization_is_idempotent_over_the_corpus() {
    for (name, text, _) in corpus::VALID {
        let parsed = parse_policy(text).unwrap();
        let once = normalize_policy(&parsed).unwrap();
        let twice = normalize_policy(&once).unwrap();
        assert_eq!(once.aggs, twice.aggs, "{name}");
        assert_eq!(once.constraint, twice.constraint, "{name}");
    }
}

#[test]
fn parse_errors_carry_positions() {
    let err = parse_policy("POLICY OVER t\nCONSTRAINT ???\nON FAIL KILL ROW").unwrap_err();
    match err {
        ParseError::Syntax { line, .. } => assert_eq!(line, 2),
        other => panic!("expected syntax error, got {other:?}"),
    }
}

#[test]
fn normalization_preserves_oracle_outcomes() {
    use dfc_core::exec::ExecOptions;
    use dfc_core::expr::Session;
    use dfc_core::oracle::enforce_select;
    use dfc_core::policy::PolicySet;
    use dfc_core::sql::parse_sql;
    use dfc_core::testkit::{generate_case, Family};

    // The sanitization family writes its policy with the aggregate inline in
    // the constraint; registering it runs normalize. Compare against a
    // hand-normalized equivalent written with an explicit AGG clause.
    for seed in 0..10u64 {
        let case = generate_case(Family::Sanitization, seed);
        let inline = &case.policies[0];
        let explicit = "POLICY OVER products\nAGG bool_and(products.sanitized) as ok\nCONSTRAINT ok\nON FAIL KILL ROW";
        let stmt = parse_sql(&case.statement).unwrap();
        if stmt.plan.is_update() {
            continue;
        }
        let mut a = PolicySet::new();
        a.register_text(inline, &case.db).unwrap();
        let mut b = PolicySet::new();
        b.register_text(explicit, &case.db).unwrap();
        let (oa, _) = enforce_select(
            &stmt.plan,
            &a,
            &case.db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        let (ob, _) = enforce_select(
            &stmt.plan,
            &b,
            &case.db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(oa.surviving_rows(), ob.surviving_rows(), "seed {seed}");
    }
}
