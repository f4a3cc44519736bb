//! Statement driver: runs one parsed statement under a chosen enforcement
//! mode and returns a uniform report.

use crate::error::Error;
use crate::exec::{execute, execute_update, ExecError, ExecOptions, ExecStats};
use crate::oracle::{
    enforce_select, enforce_update, AnnotatedRow, EnforcementOutcome, Violation,
};
use crate::plan::{validate, QueryStatement, StatementKind};
use crate::policy::PolicySet;
use crate::provenance::Polynomial;
use crate::rewrite::{capture_baseline, rewrite_select, rewrite_update, RewriteError, RewriteResult};
use crate::schema::Database;

/// Enforcement strategy for a statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Ignore policies entirely (control runs).
    Off,
    /// Ground truth: provenance annotation plus conceptual evaluation.
    Oracle,
    /// Compile policies into the plan; no provenance is ever materialized.
    Rewrite,
    /// Annotate, materialize the annotated view, then filter: the naive
    /// baseline the rewrite exists to beat.
    Capture,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Some(Mode::Off),
            "oracle" => Some(Mode::Oracle),
            "rewrite" => Some(Mode::Rewrite),
            "capture" => Some(Mode::Capture),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Off => "off",
            Mode::Oracle => "oracle",
            Mode::Rewrite => "rewrite",
            Mode::Capture => "capture",
        }
    }
}

/// Outcome of one driven statement.
#[derive(Debug)]
pub struct RunReport {
    pub outcome: EnforcementOutcome,
    pub stats: ExecStats,
    /// Present when the rewrite path produced a plan (mode = Rewrite).
    pub rewrite: Option<RewriteResult>,
    /// The rewriter declined and the oracle ran instead.
    pub fell_back: bool,
    /// Database after an applied update; `None` when unchanged.
    pub new_db: Option<Database>,
}

fn kill_to_outcome(policy: String, row: Vec<crate::value::Value>) -> EnforcementOutcome {
    EnforcementOutcome::QueryKilled {
        violation: Violation {
            policy,
            row: AnnotatedRow {
                values: row,
                prov: Polynomial::zero(),
            },
            agg_values: vec![],
            dimension_witnesses: 0,
        },
    }
}

/// Runs one statement under `mode`. Policies are consulted for every mode
/// except `Off`.
pub fn run_statement(
    stmt: &QueryStatement,
    policies: &PolicySet,
    db: &Database,
    mode: Mode,
    opts: ExecOptions,
) -> Result<RunReport, Error> {
    match (stmt.kind(), mode) {
        (StatementKind::Select, Mode::Off) => {
            let mut plan = stmt.plan.clone();
            validate(&mut plan, db)?;
            let (rows, stats) = execute(&plan, db, &stmt.session, opts)?;
            Ok(RunReport {
                outcome: EnforcementOutcome::Completed {
                    rows,
                    dropped: vec![],
                },
                stats,
                rewrite: None,
                fell_back: false,
                new_db: None,
            })
        }
        (StatementKind::Select, Mode::Oracle) => {
            let (outcome, stats) = enforce_select(&stmt.plan, policies, db, &stmt.session, opts)?;
            Ok(RunReport {
                outcome,
                stats,
                rewrite: None,
                fell_back: false,
                new_db: None,
            })
        }
        (StatementKind::Select, Mode::Capture) => {
            let (outcome, stats) =
                capture_baseline(&stmt.plan, policies, db, &stmt.session, opts)?;
            Ok(RunReport {
                outcome,
                stats,
                rewrite: None,
                fell_back: false,
                new_db: None,
            })
        }
        (StatementKind::Select, Mode::Rewrite) => {
            let applicable = policies.applicable_to(stmt);
            crate::oracle::check_session(&applicable, &stmt.session)?;
            match rewrite_select(&stmt.plan, &applicable, &stmt.session, db) {
                Ok(r) => {
                    let (outcome, stats) = match execute(&r.plan, db, &stmt.session, opts) {
                        Ok((rows, stats)) => (
                            EnforcementOutcome::Completed {
                                rows,
                                dropped: vec![],
                            },
                            stats,
                        ),
                        Err(ExecError::PolicyKilled { policy, row }) => {
                            (kill_to_outcome(policy, row), ExecStats::default())
                        }
                        Err(e) => return Err(e.into()),
                    };
                    Ok(RunReport {
                        outcome,
                        stats,
                        rewrite: Some(r),
                        fell_back: false,
                        new_db: None,
                    })
                }
                Err(RewriteError::Unsupported { .. }) => {
                    let (outcome, stats) =
                        enforce_select(&stmt.plan, policies, db, &stmt.session, opts)?;
                    Ok(RunReport {
                        outcome,
                        stats,
                        rewrite: None,
                        fell_back: true,
                        new_db: None,
                    })
                }
                Err(RewriteError::Plan(e)) => Err(e.into()),
                Err(RewriteError::Render(e)) => Err(e.into()),
                Err(RewriteError::Policy(e)) => Err(e.into()),
            }
        }
        (StatementKind::Update, Mode::Off) => {
            let mut plan = stmt.plan.clone();
            validate(&mut plan, db)?;
            let (new_db, updated, stats) = execute_update(&plan, db, &stmt.session, opts)?;
            Ok(RunReport {
                outcome: EnforcementOutcome::UpdateApplied {
                    updated,
                    skipped: vec![],
                },
                stats,
                rewrite: None,
                fell_back: false,
                new_db: Some(new_db),
            })
        }
        // Capture and oracle coincide for updates: the candidate set is the
        // materialization.
        (StatementKind::Update, Mode::Oracle) | (StatementKind::Update, Mode::Capture) => {
            let (outcome, new_db, stats) =
                enforce_update(&stmt.plan, policies, db, &stmt.session, opts)?;
            let changed = matches!(outcome, EnforcementOutcome::UpdateApplied { .. });
            Ok(RunReport {
                outcome,
                stats,
                rewrite: None,
                fell_back: false,
                new_db: changed.then_some(new_db),
            })
        }
        (StatementKind::Update, Mode::Rewrite) => {
            let applicable = policies.applicable_to(stmt);
            crate::oracle::check_session(&applicable, &stmt.session)?;
            match rewrite_update(&stmt.plan, &applicable, db) {
                Ok(r) => match execute_update(&r.plan, db, &stmt.session, opts) {
                    Ok((new_db, updated, stats)) => Ok(RunReport {
                        outcome: EnforcementOutcome::UpdateApplied {
                            updated,
                            skipped: vec![],
                        },
                        stats,
                        rewrite: Some(r),
                        fell_back: false,
                        new_db: Some(new_db),
                    }),
                    Err(ExecError::PolicyKilled { policy, row }) => Ok(RunReport {
                        outcome: kill_to_outcome(policy, row),
                        stats: ExecStats::default(),
                        rewrite: Some(r),
                        fell_back: false,
                        new_db: None,
                    }),
                    Err(e) => Err(e.into()),
                },
                Err(RewriteError::Unsupported { .. }) => {
                    let (outcome, new_db, stats) =
                        enforce_update(&stmt.plan, policies, db, &stmt.session, opts)?;
                    let changed = matches!(outcome, EnforcementOutcome::UpdateApplied { .. });
                    Ok(RunReport {
                        outcome,
                        stats,
                        rewrite: None,
                        fell_back: true,
                        new_db: changed.then_some(new_db),
                    })
                }
                Err(RewriteError::Plan(e)) => Err(e.into()),
                Err(RewriteError::Render(e)) => Err(e.into()),
                Err(RewriteError::Policy(e)) => Err(e.into()),
            }
        }
    }
}
