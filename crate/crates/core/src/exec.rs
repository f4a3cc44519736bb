//! Annotation-free plan evaluation.
//!
//! Runs validated plans (original or rewritten) with deterministic output
//! order: scan order for pipelined operators, first-seen order for hash
//! groups and deduplication. Hash joins handle equi-predicates; anything else
//! falls back to a nested loop. `kill('policy')` evaluated anywhere aborts
//! the statement with [`ExecError::PolicyKilled`].

use std::time::{Duration, Instant};

use indexmap::{IndexMap, IndexSet};
use thiserror::Error;

use crate::expr::{eval, AggAcc, CmpOp, EvalCtx, EvalError, ScalarExpr, Session};
use crate::plan::LogicalPlan;
use crate::schema::Database;
use crate::value::Value;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExecError {
    #[error("query killed by policy `{policy}`")]
    PolicyKilled { policy: String, row: Vec<Value> },
    #[error("resource cap exceeded: more than {cap} intermediate rows")]
    ResourceCap { cap: u64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("plain executor cannot run UPDATE plans; use execute_update")]
    UpdatePlan,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    /// Maximum total rows any operator may produce.
    pub row_cap: u64,
}

impl Default for ExecOptions {
    fn default() -> ExecOptions {
        ExecOptions { row_cap: 10_000_000 }
    }
}

/// Execution counters. `annotations_created` stays 0 in this executor; only
/// the provenance-annotating engine increments it.
#[derive(Debug, Clone, Default)]
pub struct ExecStats {
    pub rows_scanned: u64,
    pub rows_joined: u64,
    pub rows_output: u64,
    pub annotations_created: u64,
    pub wall_time: Duration,
    pub div_by_zero: bool,
}

pub(crate) struct Executor<'a> {
    db: &'a Database,
    ctx: EvalCtx<'a>,
    opts: ExecOptions,
    pub stats: ExecStats,
    produced: u64,
}

impl<'a> Executor<'a> {
    pub fn new(db: &'a Database, session: &'a Session, opts: ExecOptions) -> Executor<'a> {
        Executor {
            db,
            ctx: EvalCtx::new(session),
            opts,
            stats: ExecStats::default(),
            produced: 0,
        }
    }

    fn charge(&mut self, n: usize) -> Result<(), ExecError> {
        self.produced += n as u64;
        if self.produced > self.opts.row_cap {
            return Err(ExecError::ResourceCap {
                cap: self.opts.row_cap,
            });
        }
        Ok(())
    }

    pub fn finish(mut self, started: Instant, rows_output: u64) -> ExecStats {
        self.stats.rows_output = rows_output;
        self.stats.wall_time = started.elapsed();
        self.stats.div_by_zero = self.ctx.div_by_zero.get();
        self.stats
    }

    pub fn run(&mut self, plan: &LogicalPlan) -> Result<Vec<Vec<Value>>, ExecError> {
        match plan {
            LogicalPlan::Scan { relation, .. } => {
                let rel = self
                    .db
                    .relation(relation)
                    .expect("validated plan scans known relations");
                let rows: Vec<Vec<Value>> =
                    rel.rows.iter().map(|(_, vals)| vals.clone()).collect();
                self.stats.rows_scanned += rows.len() as u64;
                self.charge(rows.len())?;
                Ok(rows)
            }
            LogicalPlan::Alias { input, .. } => self.run(input),
            LogicalPlan::Filter { input, predicate } => {
                let rows = self.run(input)?;
                let mut out = Vec::new();
                for row in rows {
                    match eval(predicate, &row, &self.ctx) {
                        Ok(v) => {
                            if v == Value::Bool(true) {
                                out.push(row);
                            }
                        }
                        Err(EvalError::PolicyKill { policy }) => {
                            return Err(ExecError::PolicyKilled { policy, row })
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                Ok(out)
            }
            LogicalPlan::Project { input, items, .. } => {
                let rows = self.run(input)?;
                let mut out = Vec::with_capacity(rows.len());
                for row in rows {
                    out.push(self.project_row(items, &row)?);
                }
                Ok(out)
            }
            LogicalPlan::Join {
                left,
                right,
                predicate,
                semi_payload,
            } => {
                let lrows = self.run(left)?;
                let rrows = self.run(right)?;
                let joined = self.join_rows(lrows, rrows, predicate, *semi_payload)?;
                self.stats.rows_joined += joined.len() as u64;
                self.charge(joined.len())?;
                Ok(joined)
            }
            LogicalPlan::Aggregate {
                input,
                group_by,
                aggs,
            } => {
                let rows = self.run(input)?;
                let key_slots: Vec<usize> = group_by
                    .iter()
                    .map(|g| g.slot.expect("validated group key"))
                    .collect();
                let mut groups: IndexMap<Vec<Value>, Vec<AggAcc>> = IndexMap::new();
                for row in &rows {
                    let key: Vec<Value> = key_slots.iter().map(|&s| row[s].clone()).collect();
                    let accs = groups.entry(key).or_insert_with(|| {
                        aggs.iter()
                            .map(|a| AggAcc::new(a.func, a.arg.is_none()))
                            .collect()
                    });
                    for (acc, agg) in accs.iter_mut().zip(aggs) {
                        let v = match &agg.arg {
                            None => Value::Bool(true),
                            Some(arg) => eval(arg, row, &self.ctx)?,
                        };
                        acc.update(v)?;
                    }
                }
                // A global aggregate yields its single row even over empty
                // input.
                if groups.is_empty() && key_slots.is_empty() {
                    groups.insert(
                        vec![],
                        aggs.iter()
                            .map(|a| AggAcc::new(a.func, a.arg.is_none()))
                            .collect(),
                    );
                }
                let mut out = Vec::with_capacity(groups.len());
                for (key, accs) in groups {
                    let mut row = key;
                    for acc in accs {
                        row.push(acc.finish());
                    }
                    out.push(row);
                }
                self.charge(out.len())?;
                Ok(out)
            }
            LogicalPlan::Distinct { input } => {
                let rows = self.run(input)?;
                let mut seen: IndexSet<Vec<Value>> = IndexSet::new();
                for row in rows {
                    seen.insert(row);
                }
                Ok(seen.into_iter().collect())
            }
            LogicalPlan::Update { .. } => Err(ExecError::UpdatePlan),
        }
    }

    fn project_row(
        &self,
        items: &[crate::plan::ProjectItem],
        row: &[Value],
    ) -> Result<Vec<Value>, ExecError> {
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            match eval(&item.expr, row, &self.ctx) {
                Ok(v) => out.push(v),
                Err(EvalError::PolicyKill { policy }) => {
                    // The guard projection lists the user-visible columns
                    // first, so the computed prefix is the offending row.
                    return Err(ExecError::PolicyKilled { policy, row: out });
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    fn join_rows(
        &mut self,
        lrows: Vec<Vec<Value>>,
        rrows: Vec<Vec<Value>>,
        predicate: &ScalarExpr,
        semi_payload: bool,
    ) -> Result<Vec<Vec<Value>>, ExecError> {
        let left_width = lrows.first().map(|r| r.len());
        let (equi, residual) = split_equi(predicate, left_width);
        let mut out = Vec::new();
        if let (Some(keys), Some(lw)) = (equi, left_width) {
            // Hash join: build on the right side, probe left rows in order.
            let mut table: IndexMap<Vec<Value>, Vec<usize>> = IndexMap::new();
            'build: for (i, r) in rrows.iter().enumerate() {
                let mut key = Vec::with_capacity(keys.len());
                for (_, rs) in &keys {
                    let v = &r[*rs - lw];
                    if v.is_null() {
                        continue 'build; // null keys never match
                    }
                    key.push(v.clone());
                }
                table.entry(key).or_default().push(i);
            }
            'probe: for l in &lrows {
                let mut key = Vec::with_capacity(keys.len());
                for (ls, _) in &keys {
                    let v = &l[*ls];
                    if v.is_null() {
                        continue 'probe;
                    }
                    key.push(v.clone());
                }
                if let Some(idxs) = table.get(&key) {
                    for &i in idxs {
                        let mut combined = l.clone();
                        combined.extend(rrows[i].iter().cloned());
                        let keep = match &residual {
                            None => true,
                            Some(res) => eval(res, &combined, &self.ctx)? == Value::Bool(true),
                        };
                        if keep {
                            out.push(combined);
                            if semi_payload {
                                continue 'probe;
                            }
                        }
                    }
                }
            }
        } else {
            'outer: for l in &lrows {
                for r in &rrows {
                    let mut combined = l.clone();
                    combined.extend(r.iter().cloned());
                    if eval(predicate, &combined, &self.ctx)? == Value::Bool(true) {
                        out.push(combined);
                        if semi_payload {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Splits a join predicate into hashable equi-key pairs (left slot, right
/// slot in combined coordinates) plus the residual conjunction. Returns no
/// keys when the predicate has none, or when the left width is unknown
/// (empty left input never joins anyway).
pub(crate) fn split_equi(
    predicate: &ScalarExpr,
    left_width: Option<usize>,
) -> (Option<Vec<(usize, usize)>>, Option<ScalarExpr>) {
    let lw = match left_width {
        Some(w) => w,
        None => return (None, Some(predicate.clone())),
    };
    let mut keys = Vec::new();
    let mut residual = Vec::new();
    for c in predicate.conjuncts() {
        if let ScalarExpr::Compare {
            op: CmpOp::Eq,
            left,
            right,
        } = c
        {
            if let (ScalarExpr::Column(a), ScalarExpr::Column(b)) = (left.as_ref(), right.as_ref())
            {
                if let (Some(sa), Some(sb)) = (a.slot, b.slot) {
                    if sa < lw && sb >= lw {
                        keys.push((sa, sb));
                        continue;
                    }
                    if sb < lw && sa >= lw {
                        keys.push((sb, sa));
                        continue;
                    }
                }
            }
        }
        residual.push(c.clone());
    }
    if keys.is_empty() {
        (None, Some(predicate.clone()))
    } else if residual.is_empty() {
        (Some(keys), None)
    } else {
        (Some(keys), Some(ScalarExpr::conjoin(residual)))
    }
}

/// Executes a validated select plan.
pub fn execute(
    plan: &LogicalPlan,
    db: &Database,
    session: &Session,
    opts: ExecOptions,
) -> Result<(Vec<Vec<Value>>, ExecStats), ExecError> {
    let started = Instant::now();
    let mut ex = Executor::new(db, session, opts);
    let rows = ex.run(plan)?;
    let n = rows.len() as u64;
    Ok((rows, ex.finish(started, n)))
}

/// Executes a validated update plan against a copy of the target relation,
/// returning the updated database and the number of rows assigned.
/// `kill('p')` raised while evaluating the (possibly rewritten) predicate
/// aborts the whole statement before any assignment is applied.
pub fn execute_update(
    plan: &LogicalPlan,
    db: &Database,
    session: &Session,
    opts: ExecOptions,
) -> Result<(Database, u64, ExecStats), ExecError> {
    let started = Instant::now();
    let (relation, assignments, predicate) = match plan {
        LogicalPlan::Update {
            relation,
            assignments,
            predicate,
            ..
        } => (relation, assignments, predicate),
        _ => return Err(ExecError::UpdatePlan),
    };
    let mut ex = Executor::new(db, session, opts);
    let rel = db
        .relation(relation)
        .expect("validated update targets a known relation");
    ex.stats.rows_scanned += rel.rows.len() as u64;

    // Two phases: evaluate everything first (so a kill leaves the database
    // untouched), then apply.
    let mut new_images: Vec<(usize, Vec<Value>)> = Vec::new();
    for (idx, (_, old)) in rel.rows.iter().enumerate() {
        let matched = match predicate {
            None => true,
            Some(p) => match eval(p, old, &ex.ctx) {
                Ok(v) => v == Value::Bool(true),
                Err(EvalError::PolicyKill { policy }) => {
                    return Err(ExecError::PolicyKilled {
                        policy,
                        row: old.clone(),
                    })
                }
                Err(e) => return Err(e.into()),
            },
        };
        if !matched {
            continue;
        }
        let mut image = old.clone();
        for (col, expr) in assignments {
            let i = rel
                .schema
                .column_index(col)
                .expect("validated assignment column");
            image[i] = eval(expr, old, &ex.ctx)?;
        }
        new_images.push((idx, image));
    }

    let mut out = db.clone();
    let target = out.relation_mut(relation).expect("relation exists");
    let updated = new_images.len() as u64;
    for (idx, image) in new_images {
        target.rows[idx].1 = image;
    }
    let stats = ex.finish(started, 0);
    Ok((out, updated, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::validate;
    use crate::schema::{relation_from_rows, Database};
    use crate::sql::parse_sql;
    use crate::value::ValType;

    fn db() -> Database {
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "t",
                vec![("k", ValType::Int, false), ("v", ValType::Int, false)],
                vec![
                    vec![Value::Int(1), Value::Int(10)],
                    vec![Value::Int(2), Value::Int(20)],
                    vec![Value::Int(1), Value::Int(30)],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "u",
                vec![("k", ValType::Int, false), ("w", ValType::Text, false)],
                vec![
                    vec![Value::Int(1), Value::text("a")],
                    vec![Value::Int(1), Value::text("b")],
                    vec![Value::Int(3), Value::text("c")],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    fn run(sql: &str, db: &Database) -> Vec<Vec<Value>> {
        let mut stmt = parse_sql(sql).unwrap();
        validate(&mut stmt.plan, db).unwrap();
        let (rows, stats) =
            execute(&stmt.plan, db, &Session::default(), ExecOptions::default()).unwrap();
        assert_eq!(stats.annotations_created, 0);
        rows
    }

    #[test]
    fn hash_join_preserves_left_then_build_order() {
        let db = db();
        let rows = run(
            "SELECT t.v, u.w FROM t JOIN u ON t.k = u.k",
            &db,
        );
        let flat: Vec<(i64, String)> = rows
            .iter()
            .map(|r| match (&r[0], &r[1]) {
                (Value::Int(v), Value::Text(w)) => (*v, w.to_string()),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            flat,
            vec![
                (10, "a".into()),
                (10, "b".into()),
                (30, "a".into()),
                (30, "b".into())
            ]
        );
    }

    #[test]
    fn aggregate_groups_in_first_seen_order() {
        let db = db();
        let rows = run("SELECT k, sum(v) AS s, count(*) AS n FROM t GROUP BY k", &db);
        assert_eq!(
            rows,
            vec![
                vec![Value::Int(1), Value::Int(40), Value::Int(2)],
                vec![Value::Int(2), Value::Int(20), Value::Int(1)],
            ]
        );
    }

    #[test]
    fn global_aggregate_over_empty_input_yields_one_row() {
        let db = db();
        let rows = run("SELECT count(*) AS n FROM t WHERE k > 99", &db);
        assert_eq!(rows, vec![vec![Value::Int(0)]]);
    }

    #[test]
    fn distinct_keeps_first_occurrence_order() {
        let db = db();
        let rows = run("SELECT DISTINCT k FROM t", &db);
        assert_eq!(rows, vec![vec![Value::Int(1)], vec![Value::Int(2)]]);
    }

    #[test]
    fn kill_in_projection_aborts_with_row_prefix() {
        let db = db();
        let mut stmt = parse_sql(
            "SELECT k, case when v > 15 then kill('guard') end AS g FROM t",
        )
        .unwrap();
        validate(&mut stmt.plan, &db).unwrap();
        let err = execute(&stmt.plan, &db, &Session::default(), ExecOptions::default())
            .unwrap_err();
        match err {
            ExecError::PolicyKilled { policy, row } => {
                assert_eq!(policy, "guard");
                assert_eq!(row, vec![Value::Int(2)]);
            }
            other => panic!("expected kill, got {other:?}"),
        }
    }

    #[test]
    fn row_cap_enforced() {
        let db = db();
        let mut stmt = parse_sql("SELECT t.k FROM t CROSS JOIN u").unwrap();
        validate(&mut stmt.plan, &db).unwrap();
        let err = execute(
            &stmt.plan,
            &db,
            &Session::default(),
            ExecOptions { row_cap: 8 },
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::ResourceCap { cap: 8 }));
    }

    #[test]
    fn update_applies_assignments_to_matching_rows() {
        let db = db();
        let mut stmt = parse_sql("UPDATE t SET v = v + 1 WHERE k = 1").unwrap();
        validate(&mut stmt.plan, &db).unwrap();
        let (out, updated, _) =
            execute_update(&stmt.plan, &db, &Session::default(), ExecOptions::default()).unwrap();
        assert_eq!(updated, 2);
        let rel = out.relation("t").unwrap();
        let vs: Vec<i64> = rel
            .rows
            .iter()
            .map(|(_, r)| match r[1] {
                Value::Int(i) => i,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(vs, vec![11, 20, 31]);
        // Original database untouched.
        assert!(matches!(db.relation("t").unwrap().rows[0].1[1], Value::Int(10)));
    }
}
