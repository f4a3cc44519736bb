//! Ground-truth enforcement: annotate every tuple with its provenance
//! polynomial, then evaluate policies over the annotations.
//!
//! This engine is the slow, obviously-correct path. Rewrite-based enforcement
//! is judged against it: same surviving rows, same kill decisions, same
//! update effects.

use indexmap::{IndexMap, IndexSet};
use std::time::Instant;

use crate::error::Error;
use crate::exec::{split_equi, ExecError, ExecOptions, ExecStats};
use crate::expr::{eval, AggAcc, EvalCtx, Session};
use crate::plan::{validate, LogicalPlan, QueryStatement};
use crate::policy::{AggSource, OnFail, Policy, PolicySet, PolicyTarget};
use crate::provenance::Polynomial;
use crate::schema::{Database, TupleId};
use crate::value::Value;

/// An output row annotated with its standard-form provenance polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRow {
    pub values: Vec<Value>,
    pub prov: Polynomial,
}

/// One failed policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub policy: String,
    pub row: AnnotatedRow,
    pub agg_values: Vec<(String, Value)>,
    /// Catalog-dimension bindings examined before giving up (or succeeding).
    pub dimension_witnesses: usize,
}

impl Violation {
    pub fn render(&self, action: &str) -> String {
        let row = self
            .row
            .values
            .iter()
            .map(|v| v.render())
            .collect::<Vec<_>>()
            .join(",");
        let aggs = self
            .agg_values
            .iter()
            .map(|(a, v)| format!("{a}={}", v.render()))
            .collect::<Vec<_>>()
            .join(",");
        format!("policy={} action={action} row=({row}) aggs={aggs}", self.policy)
    }
}

/// Result of enforcing one statement.
#[derive(Debug, Clone, PartialEq)]
pub enum EnforcementOutcome {
    Completed {
        rows: Vec<Vec<Value>>,
        dropped: Vec<Violation>,
    },
    QueryKilled {
        violation: Violation,
    },
    UpdateApplied {
        updated: u64,
        skipped: Vec<Violation>,
    },
}

impl EnforcementOutcome {
    /// Line-oriented violation report consumed by the CLI and golden tests.
    pub fn report(&self) -> String {
        let mut lines = Vec::new();
        match self {
            EnforcementOutcome::Completed { dropped, .. } => {
                for v in dropped {
                    lines.push(v.render("kill_row"));
                }
            }
            EnforcementOutcome::QueryKilled { violation } => {
                lines.push(violation.render("kill_query"));
            }
            EnforcementOutcome::UpdateApplied { skipped, .. } => {
                for v in skipped {
                    lines.push(v.render("skip_update"));
                }
            }
        }
        lines.join("\n")
    }

    pub fn surviving_rows(&self) -> &[Vec<Value>] {
        match self {
            EnforcementOutcome::Completed { rows, .. } => rows,
            _ => &[],
        }
    }
}

// ---------------------------------------------------------------------------
// Annotated execution
// ---------------------------------------------------------------------------

struct ProvExecutor<'a> {
    db: &'a Database,
    ctx: EvalCtx<'a>,
    opts: ExecOptions,
    stats: ExecStats,
    produced: u64,
}

impl<'a> ProvExecutor<'a> {
    fn charge(&mut self, n: usize) -> Result<(), ExecError> {
        self.produced += n as u64;
        if self.produced > self.opts.row_cap {
            return Err(ExecError::ResourceCap {
                cap: self.opts.row_cap,
            });
        }
        Ok(())
    }

    fn annotate(&mut self, n: usize) {
        self.stats.annotations_created += n as u64;
    }

    fn run(&mut self, plan: &LogicalPlan) -> Result<Vec<AnnotatedRow>, ExecError> {
        match plan {
            LogicalPlan::Scan { relation, .. } => {
                let rel = self
                    .db
                    .relation(relation)
                    .expect("validated plan scans known relations");
                let rows: Vec<AnnotatedRow> = rel
                    .rows
                    .iter()
                    .map(|(tid, vals)| AnnotatedRow {
                        values: vals.clone(),
                        prov: Polynomial::from_tuple(tid.clone()),
                    })
                    .collect();
                self.stats.rows_scanned += rows.len() as u64;
                self.annotate(rows.len());
                self.charge(rows.len())?;
                Ok(rows)
            }
            LogicalPlan::Alias { input, .. } => self.run(input),
            LogicalPlan::Filter { input, predicate } => {
                let rows = self.run(input)?;
                let mut out = Vec::new();
                for row in rows {
                    if eval(predicate, &row.values, &self.ctx)? == Value::Bool(true) {
                        out.push(row);
                    }
                }
                Ok(out)
            }
            LogicalPlan::Project { input, items, .. } => {
                let rows = self.run(input)?;
                let mut out = Vec::with_capacity(rows.len());
                for row in rows {
                    let mut values = Vec::with_capacity(items.len());
                    for item in items {
                        values.push(eval(&item.expr, &row.values, &self.ctx)?);
                    }
                    out.push(AnnotatedRow {
                        values,
                        prov: row.prov,
                    });
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
                let out = self.join(lrows, rrows, predicate, *semi_payload)?;
                self.stats.rows_joined += out.len() as u64;
                self.annotate(out.len());
                self.charge(out.len())?;
                Ok(out)
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
                let mut groups: IndexMap<Vec<Value>, (Vec<AggAcc>, Polynomial)> = IndexMap::new();
                for row in &rows {
                    let key: Vec<Value> =
                        key_slots.iter().map(|&s| row.values[s].clone()).collect();
                    let entry = groups.entry(key).or_insert_with(|| {
                        (
                            aggs.iter()
                                .map(|a| AggAcc::new(a.func, a.arg.is_none()))
                                .collect(),
                            Polynomial::zero(),
                        )
                    });
                    for (acc, agg) in entry.0.iter_mut().zip(aggs) {
                        let v = match &agg.arg {
                            None => Value::Bool(true),
                            Some(arg) => eval(arg, &row.values, &self.ctx)?,
                        };
                        acc.update(v)?;
                    }
                    entry.1.merge(&row.prov);
                }
                if groups.is_empty() && key_slots.is_empty() {
                    groups.insert(
                        vec![],
                        (
                            aggs.iter()
                                .map(|a| AggAcc::new(a.func, a.arg.is_none()))
                                .collect(),
                            Polynomial::zero(),
                        ),
                    );
                }
                let mut out = Vec::with_capacity(groups.len());
                for (key, (accs, prov)) in groups {
                    let mut values = key;
                    for acc in accs {
                        values.push(acc.finish());
                    }
                    out.push(AnnotatedRow { values, prov });
                }
                self.annotate(out.len());
                self.charge(out.len())?;
                Ok(out)
            }
            LogicalPlan::Distinct { input } => {
                let rows = self.run(input)?;
                let mut seen: IndexMap<Vec<Value>, Polynomial> = IndexMap::new();
                for row in rows {
                    match seen.get_mut(&row.values) {
                        Some(p) => p.merge(&row.prov),
                        None => {
                            seen.insert(row.values, row.prov);
                        }
                    }
                }
                let out: Vec<AnnotatedRow> = seen
                    .into_iter()
                    .map(|(values, prov)| AnnotatedRow { values, prov })
                    .collect();
                self.annotate(out.len());
                Ok(out)
            }
            LogicalPlan::Update { .. } => Err(ExecError::UpdatePlan),
        }
    }

    fn join(
        &mut self,
        lrows: Vec<AnnotatedRow>,
        rrows: Vec<AnnotatedRow>,
        predicate: &crate::expr::ScalarExpr,
        semi_payload: bool,
    ) -> Result<Vec<AnnotatedRow>, ExecError> {
        let left_width = lrows.first().map(|r| r.values.len());
        let (equi, residual) = split_equi(predicate, left_width);
        let mut out = Vec::new();
        let combine = |l: &AnnotatedRow, r: &AnnotatedRow| -> AnnotatedRow {
            let mut values = l.values.clone();
            values.extend(r.values.iter().cloned());
            AnnotatedRow {
                values,
                prov: l.prov.mul(&r.prov),
            }
        };
        if let (Some(keys), Some(lw)) = (equi, left_width) {
            let mut table: IndexMap<Vec<Value>, Vec<usize>> = IndexMap::new();
            'build: for (i, r) in rrows.iter().enumerate() {
                let mut key = Vec::with_capacity(keys.len());
                for (_, rs) in &keys {
                    let v = &r.values[*rs - lw];
                    if v.is_null() {
                        continue 'build;
                    }
                    key.push(v.clone());
                }
                table.entry(key).or_default().push(i);
            }
            'probe: for l in &lrows {
                let mut key = Vec::with_capacity(keys.len());
                for (ls, _) in &keys {
                    let v = &l.values[*ls];
                    if v.is_null() {
                        continue 'probe;
                    }
                    key.push(v.clone());
                }
                if let Some(idxs) = table.get(&key) {
                    for &i in idxs {
                        let candidate = combine(l, &rrows[i]);
                        let keep = match &residual {
                            None => true,
                            Some(res) => {
                                eval(res, &candidate.values, &self.ctx)? == Value::Bool(true)
                            }
                        };
                        if keep {
                            out.push(candidate);
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
                    let candidate = combine(l, r);
                    if eval(predicate, &candidate.values, &self.ctx)? == Value::Bool(true) {
                        out.push(candidate);
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

/// Executes a select plan, annotating every output row with its provenance
/// polynomial. The plan is validated internally against `db`.
pub fn execute_with_provenance(
    plan: &LogicalPlan,
    db: &Database,
    session: &Session,
    opts: ExecOptions,
) -> Result<(Vec<AnnotatedRow>, ExecStats), Error> {
    let started = Instant::now();
    let mut vplan = plan.clone();
    validate(&mut vplan, db)?;
    let mut ex = ProvExecutor {
        db,
        ctx: EvalCtx::new(session),
        opts,
        stats: ExecStats::default(),
        produced: 0,
    };
    let rows = ex.run(&vplan).map_err(Error::Exec)?;
    ex.stats.rows_output = rows.len() as u64;
    ex.stats.wall_time = started.elapsed();
    ex.stats.div_by_zero = ex.ctx.div_by_zero.get();
    Ok((rows, ex.stats))
}

// ---------------------------------------------------------------------------
// Policy evaluation
// ---------------------------------------------------------------------------

/// Relation each binding of the aggregate scope draws values from.
fn agg_binding_relations(p: &Policy) -> Vec<String> {
    let cp = p.compiled.as_ref().expect("compiled policy");
    cp.agg_scope
        .bindings
        .iter()
        .map(|b| {
            let alias = b.alias.clone().unwrap_or_default();
            match &p.target {
                PolicyTarget::Over(rels) => {
                    if rels.contains(&alias) {
                        alias
                    } else {
                        p.dimensions
                            .iter()
                            .find(|d| d.alias == alias)
                            .map(|d| d.relation.clone())
                            .unwrap_or(alias)
                    }
                }
                PolicyTarget::Update { relation, .. } => relation.clone(),
            }
        })
        .collect()
}

/// Computes one aggregate over the contributor tuples of `relation`.
fn eval_agg_over_contributors(
    p: &Policy,
    agg_idx: usize,
    relation: &str,
    contributors: &IndexSet<TupleId>,
    db: &Database,
    session: &Session,
) -> Result<Value, Error> {
    let cp = p.compiled().map_err(Error::Policy)?;
    let agg = &p.aggs[agg_idx];
    let binding_rels = agg_binding_relations(p);
    let rel = db.relation(relation)?;
    let ctx = EvalCtx::new(session);
    let mut acc = AggAcc::new(agg.func, agg.arg.is_none());
    let width = cp.agg_scope.len();
    for tid in contributors {
        let tuple = rel
            .row_by_ordinal(tid.ordinal)
            .expect("contributor tuple exists in its relation");
        let mut env = vec![Value::Null; width];
        for (i, b) in cp.agg_scope.bindings.iter().enumerate() {
            if binding_rels[i] == relation {
                let col = rel
                    .schema
                    .column_index(&b.name)
                    .expect("binding names a schema column");
                env[i] = tuple[col].clone();
            }
        }
        let v = match &agg.arg {
            None => Value::Bool(true),
            Some(arg) => eval(arg, &env, &ctx).map_err(ExecError::Eval)?,
        };
        acc.update(v).map_err(ExecError::Eval)?;
    }
    Ok(acc.finish())
}

/// Evaluates the constraint with existential semantics over catalog
/// dimensions: the row passes iff some assignment of a tuple to every
/// catalog dimension makes the constraint true. Returns (passed, bindings
/// examined).
fn eval_constraint_existential(
    p: &Policy,
    agg_values: &[Value],
    newu_values: Option<&[Value]>,
    db: &Database,
    session: &Session,
) -> Result<(bool, usize), Error> {
    let cp = p.compiled().map_err(Error::Policy)?;
    let ctx = EvalCtx::new(session);
    let width = cp.constraint_scope.len();
    let mut base = vec![Value::Null; width];
    for (i, v) in agg_values.iter().enumerate() {
        base[i] = v.clone();
    }
    // Dimension column positions come after the aggregates in scope order;
    // the update's new image occupies the tail.
    let mut dim_ranges: Vec<(usize, usize, &str)> = Vec::new(); // (start, len, relation)
    let mut pos = agg_values.len();
    for &di in &cp.catalog_dims {
        let d = &p.dimensions[di];
        let n = db.schema(&d.relation)?.columns.len();
        dim_ranges.push((pos, n, d.relation.as_str()));
        pos += n;
    }
    if let Some(newu) = newu_values {
        for (i, v) in newu.iter().enumerate() {
            base[pos + i] = v.clone();
        }
    }

    let mut examined = 0usize;
    // Depth-first over the cross product of catalog dimensions.
    fn descend(
        depth: usize,
        dim_ranges: &[(usize, usize, &str)],
        env: &mut Vec<Value>,
        p: &Policy,
        db: &Database,
        ctx: &EvalCtx,
        examined: &mut usize,
    ) -> Result<bool, Error> {
        if depth == dim_ranges.len() {
            *examined += 1;
            let v = eval(&p.constraint, env, ctx).map_err(ExecError::Eval)?;
            return Ok(v == Value::Bool(true));
        }
        let (start, len, relation) = dim_ranges[depth];
        let rel = db.relation(relation)?;
        for (_, tuple) in &rel.rows {
            for i in 0..len {
                env[start + i] = tuple[i].clone();
            }
            if descend(depth + 1, dim_ranges, env, p, db, ctx, examined)? {
                return Ok(true);
            }
        }
        // No tuple at this depth: with an empty dimension the constraint
        // has no satisfying assignment.
        for i in 0..len {
            env[start + i] = Value::Null;
        }
        Ok(false)
    }

    let passed = descend(0, &dim_ranges, &mut base, p, db, &ctx, &mut examined)?;
    Ok((passed, examined))
}

/// Conceptual policy evaluation for one annotated output row of a select:
/// build the contributor sets, evaluate the policy aggregates over them, then
/// check the constraint (existentially over catalog dimensions). A null
/// constraint result fails.
pub fn evaluate_policy_row(
    p: &Policy,
    row: &AnnotatedRow,
    db: &Database,
    session: &Session,
) -> Result<Option<Violation>, Error> {
    let cp = p.compiled().map_err(Error::Policy)?;
    let mut agg_values = Vec::with_capacity(p.aggs.len());
    for (i, source) in cp.agg_sources.iter().enumerate() {
        let v = match source {
            AggSource::Relation(r) => {
                let contributors: IndexSet<TupleId> =
                    row.prov.contributors(r).into_iter().collect();
                eval_agg_over_contributors(p, i, r, &contributors, db, session)?
            }
            AggSource::UpdateCandidate => {
                return Err(Error::WrongStatementKind("select"));
            }
        };
        agg_values.push(v);
    }
    let (passed, examined) =
        eval_constraint_existential(p, &agg_values, None, db, session)?;
    if passed {
        Ok(None)
    } else {
        Ok(Some(Violation {
            policy: p.name.clone(),
            row: row.clone(),
            agg_values: p
                .aggs
                .iter()
                .map(|a| a.alias.clone())
                .zip(agg_values)
                .collect(),
            dimension_witnesses: examined,
        }))
    }
}

pub(crate) fn check_session(policies: &[&Policy], session: &Session) -> Result<(), Error> {
    if session.current_user.is_none()
        && policies.iter().any(|p| p.references_current_user())
    {
        return Err(Error::MissingCurrentUser);
    }
    Ok(())
}

/// The conceptual evaluation over a materialized list of annotated rows:
/// KillQuery policies first (they see the unfiltered output, first violation
/// in row order wins), then KillRow policies drop rows independently.
pub(crate) fn apply_policies_to_rows(
    rows: Vec<AnnotatedRow>,
    applicable: &[&Policy],
    db: &Database,
    session: &Session,
) -> Result<EnforcementOutcome, Error> {
    for row in &rows {
        for p in applicable.iter().filter(|p| p.on_fail == OnFail::KillQuery) {
            if let Some(v) = evaluate_policy_row(p, row, db, session)? {
                return Ok(EnforcementOutcome::QueryKilled { violation: v });
            }
        }
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for row in rows {
        let mut violation = None;
        for p in applicable.iter().filter(|p| p.on_fail == OnFail::KillRow) {
            if let Some(v) = evaluate_policy_row(p, &row, db, session)? {
                violation = Some(v);
                break;
            }
        }
        match violation {
            Some(v) => dropped.push(v),
            None => kept.push(row.values),
        }
    }
    Ok(EnforcementOutcome::Completed {
        rows: kept,
        dropped,
    })
}

/// Enforces all applicable OVER policies on a select: any KillQuery
/// violation aborts with the first violation in row order; otherwise rows
/// violating any KillRow policy are dropped.
pub fn enforce_select(
    plan: &LogicalPlan,
    policies: &PolicySet,
    db: &Database,
    session: &Session,
    opts: ExecOptions,
) -> Result<(EnforcementOutcome, ExecStats), Error> {
    let stmt = QueryStatement::new(plan.clone()).with_session(session.clone());
    if stmt.plan.is_update() {
        return Err(Error::WrongStatementKind("select"));
    }
    let applicable = policies.applicable_to(&stmt);
    check_session(&applicable, session)?;
    if stmt.plan.references_current_user() && session.current_user.is_none() {
        return Err(Error::MissingCurrentUser);
    }
    let (rows, stats) = execute_with_provenance(plan, db, session, opts)?;
    let outcome = apply_policies_to_rows(rows, &applicable, db, session)?;
    Ok((outcome, stats))
}

/// Enforces all applicable UPDATE policies: the updated tuples are modeled
/// as candidates (new image joined with the prior image as the provenance
/// dimension); failing candidates are skipped (KillRow) or abort the
/// statement (KillQuery). Returns the outcome and the resulting database.
pub fn enforce_update(
    plan: &LogicalPlan,
    policies: &PolicySet,
    db: &Database,
    session: &Session,
    _opts: ExecOptions,
) -> Result<(EnforcementOutcome, Database, ExecStats), Error> {
    let started = Instant::now();
    let mut vplan = plan.clone();
    validate(&mut vplan, db)?;
    let (relation, assignments, predicate) = match &vplan {
        LogicalPlan::Update {
            relation,
            assignments,
            predicate,
            ..
        } => (relation.clone(), assignments.clone(), predicate.clone()),
        _ => return Err(Error::WrongStatementKind("update")),
    };
    let stmt = QueryStatement::new(plan.clone()).with_session(session.clone());
    let applicable = policies.applicable_to(&stmt);
    check_session(&applicable, session)?;

    let mut stats = ExecStats::default();
    let ctx = EvalCtx::new(session);
    let rel = db.relation(&relation)?;
    stats.rows_scanned = rel.rows.len() as u64;

    // Candidate set: matching rows with assignments applied.
    struct Candidate {
        idx: usize,
        tid: TupleId,
        old: Vec<Value>,
        new: Vec<Value>,
    }
    let mut candidates = Vec::new();
    for (idx, (tid, old)) in rel.rows.iter().enumerate() {
        let matched = match &predicate {
            None => true,
            Some(p) => eval(p, old, &ctx).map_err(ExecError::Eval)? == Value::Bool(true),
        };
        if !matched {
            continue;
        }
        let mut new = old.clone();
        for (col, expr) in &assignments {
            let i = rel.schema.column_index(col).expect("validated column");
            new[i] = eval(expr, old, &ctx).map_err(ExecError::Eval)?;
        }
        candidates.push(Candidate {
            idx,
            tid: tid.clone(),
            old: old.clone(),
            new,
        });
    }
    stats.annotations_created += candidates.len() as u64;

    let evaluate = |p: &Policy, c: &Candidate| -> Result<Option<Violation>, Error> {
        let cp = p.compiled().map_err(Error::Policy)?;
        // Aggregate over the single candidate environment: the new image
        // under the target alias, the prior image under the provenance
        // dimension's alias.
        let mut env = Vec::with_capacity(cp.agg_scope.len());
        env.extend(c.new.iter().cloned());
        env.extend(c.old.iter().cloned());
        debug_assert_eq!(env.len(), cp.agg_scope.len());
        let mut agg_values = Vec::with_capacity(p.aggs.len());
        for agg in &p.aggs {
            let mut acc = AggAcc::new(agg.func, agg.arg.is_none());
            let v = match &agg.arg {
                None => Value::Bool(true),
                Some(arg) => eval(arg, &env, &ctx).map_err(ExecError::Eval)?,
            };
            acc.update(v).map_err(ExecError::Eval)?;
            agg_values.push(acc.finish());
        }
        let (passed, examined) =
            eval_constraint_existential(p, &agg_values, Some(&c.new), db, session)?;
        if passed {
            Ok(None)
        } else {
            Ok(Some(Violation {
                policy: p.name.clone(),
                row: AnnotatedRow {
                    values: c.new.clone(),
                    prov: Polynomial::from_tuple(c.tid.clone()),
                },
                agg_values: p
                    .aggs
                    .iter()
                    .map(|a| a.alias.clone())
                    .zip(agg_values)
                    .collect(),
                dimension_witnesses: examined,
            }))
        }
    };

    // KillQuery first, over all candidates in scan order.
    for c in &candidates {
        for p in applicable.iter().filter(|p| p.on_fail == OnFail::KillQuery) {
            if let Some(v) = evaluate(p, c)? {
                stats.wall_time = started.elapsed();
                return Ok((EnforcementOutcome::QueryKilled { violation: v }, db.clone(), stats));
            }
        }
    }

    let mut out = db.clone();
    let mut skipped = Vec::new();
    let mut updated = 0u64;
    {
        let target = out.relation_mut(&relation)?;
        'cand: for c in &candidates {
            for p in applicable.iter().filter(|p| p.on_fail == OnFail::KillRow) {
                if let Some(v) = evaluate(p, c)? {
                    skipped.push(v);
                    continue 'cand;
                }
            }
            target.rows[c.idx].1 = c.new.clone();
            updated += 1;
        }
    }
    stats.wall_time = started.elapsed();
    stats.div_by_zero = ctx.div_by_zero.get();
    Ok((
        EnforcementOutcome::UpdateApplied { updated, skipped },
        out,
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{AggExpr, AggFunc, ColumnRef, ScalarExpr};
    use crate::plan::ProjectItem;
    use crate::policy::parse_policy;
    use crate::schema::{relation_from_rows, Database};
    use crate::sql::parse_sql;
    use crate::value::ValType;

    /// Two relations shaped like the join-then-aggregate example: `a` with
    /// three tuples, `b` with two, where only a's first tuple joins.
    fn fig2_db() -> Database {
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "a",
                vec![("k", ValType::Int, false), ("x", ValType::Int, false)],
                vec![
                    vec![Value::Int(1), Value::Int(100)],
                    vec![Value::Int(2), Value::Int(200)],
                    vec![Value::Int(3), Value::Int(300)],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "b",
                vec![("k", ValType::Int, false), ("y", ValType::Int, false)],
                vec![
                    vec![Value::Int(1), Value::Int(7)],
                    vec![Value::Int(1), Value::Int(8)],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    #[test]
    fn join_aggregate_provenance_in_standard_form() {
        let db = fig2_db();
        let stmt =
            parse_sql("SELECT a.k, count(*) AS c FROM a JOIN b ON a.k = b.k GROUP BY a.k").unwrap();
        let (rows, stats) = execute_with_provenance(
            &stmt.plan,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].values, vec![Value::Int(1), Value::Int(2)]);
        assert_eq!(rows[0].prov.to_string(), "a1*b1 + a1*b2");
        assert!(stats.annotations_created > 0);
    }

    #[test]
    fn single_scan_annotates_each_row_with_its_own_tuple() {
        let db = fig2_db();
        let stmt = parse_sql("SELECT k FROM b").unwrap();
        let (rows, _) = execute_with_provenance(
            &stmt.plan,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        let provs: Vec<String> = rows.iter().map(|r| r.prov.to_string()).collect();
        assert_eq!(provs, vec!["b1", "b2"]);
    }

    #[test]
    fn aggregate_pushdown_yields_identical_standard_form() {
        let db = fig2_db();
        // gamma(a join b) vs a join gamma(b): same groups, same polynomials.
        let plan_top = parse_sql(
            "SELECT a.k, sum(b.y) AS s FROM a JOIN b ON a.k = b.k GROUP BY a.k",
        )
        .unwrap()
        .plan;

        let pushed = LogicalPlan::scan("a")
            .join(
                LogicalPlan::Alias {
                    input: Box::new(LogicalPlan::scan("b").aggregate(
                        vec![ColumnRef::qualified("b", "k")],
                        vec![AggExpr::new(
                            AggFunc::Sum,
                            Some(ScalarExpr::column(Some("b"), "y")),
                            "s",
                        )],
                    )),
                    alias: "g".to_string(),
                },
                ScalarExpr::cmp(
                    crate::expr::CmpOp::Eq,
                    ScalarExpr::column(Some("a"), "k"),
                    ScalarExpr::column(Some("g"), "k"),
                ),
            )
            .project(vec![
                ProjectItem::new(ScalarExpr::column(Some("a"), "k"), "k"),
                ProjectItem::new(ScalarExpr::column(Some("g"), "s"), "s"),
            ]);

        let session = Session::default();
        let (top, _) =
            execute_with_provenance(&plan_top, &db, &session, ExecOptions::default()).unwrap();
        let (push, _) =
            execute_with_provenance(&pushed, &db, &session, ExecOptions::default()).unwrap();
        let norm = |rows: &[AnnotatedRow]| {
            let mut v: Vec<(Vec<Value>, String)> = rows
                .iter()
                .map(|r| (r.values.clone(), r.prov.to_string()))
                .collect();
            v.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
            v
        };
        assert_eq!(norm(&top), norm(&push));
    }

    fn students_db() -> Database {
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "students",
                vec![
                    ("sid", ValType::Int, false),
                    ("school", ValType::Text, false),
                    ("ethnicity", ValType::Text, true),
                    ("score", ValType::Decimal, false),
                ],
                vec![
                    vec![Value::Int(1), Value::text("north"), Value::text("A"), Value::Decimal(80.0)],
                    vec![Value::Int(2), Value::text("north"), Value::text("A"), Value::Decimal(90.0)],
                    vec![Value::Int(3), Value::text("south"), Value::text("A"), Value::Decimal(70.0)],
                    vec![Value::Int(4), Value::text("south"), Value::text("B"), Value::Decimal(60.0)],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    fn registered(text: &str, db: &Database) -> PolicySet {
        let mut set = PolicySet::new();
        set.register(parse_policy(text).unwrap(), db).unwrap();
        set
    }

    #[test]
    fn disaggregation_pass_and_violation() {
        let db = students_db();
        let set = registered(
            "POLICY OVER students AGG count(distinct ethnicity) as cnt CONSTRAINT cnt = 1 ON FAIL KILL QUERY",
            &db,
        );
        let uniform = parse_sql("SELECT school, avg(score) AS a FROM students WHERE school = 'north' GROUP BY school").unwrap();
        let (outcome, _) = enforce_select(
            &uniform.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        assert!(matches!(outcome, EnforcementOutcome::Completed { ref rows, .. } if rows.len() == 1));

        let mixed = parse_sql(
            "SELECT school, avg(score) AS a FROM students GROUP BY school",
        )
        .unwrap();
        let (outcome, _) = enforce_select(
            &mixed.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        match outcome {
            EnforcementOutcome::QueryKilled { violation } => {
                assert_eq!(violation.policy, "policy1");
                assert_eq!(
                    violation.agg_values,
                    vec![("cnt".to_string(), Value::Int(2))]
                );
                // First violating row in output order: the south group.
                assert_eq!(violation.row.values[0], Value::text("south"));
            }
            other => panic!("expected kill, got {other:?}"),
        }
    }

    #[test]
    fn empty_policy_set_equals_plain_execution() {
        let db = students_db();
        let set = PolicySet::new();
        let stmt = parse_sql("SELECT school, ethnicity FROM students WHERE score >= 70.0").unwrap();
        let (outcome, _) = enforce_select(
            &stmt.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        let mut vplan = stmt.plan.clone();
        validate(&mut vplan, &db).unwrap();
        let (plain, _) = crate::exec::execute(
            &vplan,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        match outcome {
            EnforcementOutcome::Completed { rows, dropped } => {
                assert_eq!(rows, plain);
                assert!(dropped.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn violation_report_golden_form() {
        let db = students_db();
        let set = registered(
            "NAME disagg POLICY OVER students AGG count(distinct ethnicity) as cnt CONSTRAINT cnt = 1 ON FAIL KILL ROW",
            &db,
        );
        let stmt = parse_sql("SELECT school, count(*) AS n FROM students GROUP BY school").unwrap();
        let (outcome, _) = enforce_select(
            &stmt.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(
            outcome.report(),
            "policy=disagg action=kill_row row=('south',2) aggs=cnt=2"
        );
        assert_eq!(outcome.surviving_rows().len(), 1);
    }

    fn users_db(status: &str) -> Database {
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "users",
                vec![
                    ("id", ValType::Int, false),
                    ("status", ValType::Text, false),
                ],
                vec![
                    vec![Value::Int(4), Value::text(status)],
                    vec![Value::Int(5), Value::text("Active")],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    const FSM_POLICY: &str = "\
POLICY UPDATE users as newu
DIMENSION users as oldu
AGG bool_and(oldu.status = 'Created') as allc
CONSTRAINT newu.status = 'Verified' and allc
ON FAIL KILL ROW";

    #[test]
    fn update_transition_applied_when_policy_passes() {
        let db = users_db("Created");
        let set = registered(FSM_POLICY, &db);
        let stmt = parse_sql("UPDATE users SET status='Verified' WHERE id=4").unwrap();
        let (outcome, newdb, _) = enforce_update(
            &stmt.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        match outcome {
            EnforcementOutcome::UpdateApplied { updated, skipped } => {
                assert_eq!(updated, 1);
                assert!(skipped.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            newdb.relation("users").unwrap().rows[0].1[1],
            Value::text("Verified")
        );
    }

    #[test]
    fn update_transition_skipped_when_prior_state_wrong() {
        let db = users_db("Banned");
        let set = registered(FSM_POLICY, &db);
        let stmt = parse_sql("UPDATE users SET status='Verified' WHERE id=4").unwrap();
        let (outcome, newdb, _) = enforce_update(
            &stmt.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        match outcome {
            EnforcementOutcome::UpdateApplied { updated, skipped } => {
                assert_eq!(updated, 0);
                assert_eq!(skipped.len(), 1);
                assert_eq!(
                    skipped[0].agg_values,
                    vec![("allc".to_string(), Value::Bool(false))]
                );
            }
            other => panic!("unexpected {other:?}"),
        }
        // Skipped rows stay bit-identical.
        assert_eq!(
            newdb.relation("users").unwrap().rows[0].1[1],
            Value::text("Banned")
        );
    }

    #[test]
    fn update_matching_zero_rows() {
        let db = users_db("Created");
        let set = registered(FSM_POLICY, &db);
        let stmt = parse_sql("UPDATE users SET status='Verified' WHERE id=99").unwrap();
        let (outcome, _, _) = enforce_update(
            &stmt.plan,
            &set,
            &db,
            &Session::default(),
            ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(
            outcome,
            EnforcementOutcome::UpdateApplied {
                updated: 0,
                skipped: vec![]
            }
        );
    }
}
