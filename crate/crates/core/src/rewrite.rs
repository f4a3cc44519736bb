//! Capture-free enforcement: compile applicable policies into the query plan
//! itself, so ordinary execution enforces them without materializing any
//! provenance annotation.
//!
//! Per policy, in order: thread the target columns its aggregates need
//! through intermediate projections, inline the aggregates into the
//! aggregation operator above the target scan (or degenerate them to scalar
//! expressions when no aggregation sits above it - each output row then has
//! exactly one contributing target tuple), attach catalog dimensions as
//! semi-joins-with-payload keyed by the dimension-selection conjuncts of the
//! constraint, and finally guard: a filter for KILL ROW, an error-raising
//! projection (or filter, for scan-shaped queries) for KILL QUERY.
//!
//! Operators below the aggregation point are otherwise untouched, so a plan
//! executes with zero provenance annotations created.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::error::Error;
use crate::exec::{ExecOptions, ExecStats};
use crate::expr::{AggExpr, AggFunc, ColumnRef, ScalarExpr, Session};
use crate::oracle::{apply_policies_to_rows, execute_with_provenance, EnforcementOutcome};
use crate::plan::{output_scope, validate, LogicalPlan, PlanError, ProjectItem, QueryStatement};
use crate::policy::{OnFail, Policy, PolicyError, PolicySet, PolicyTarget};
use crate::schema::Database;
use crate::sql::{render_sql, RenderError};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("policy `{policy}` is not enforceable by rewrite: {reason}")]
    Unsupported { policy: String, reason: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// What the rewrite inserted, for `--explain` and the structure tests.
#[derive(Debug, Clone, Default)]
pub struct InjectedSummary {
    pub threaded_columns: Vec<String>,
    pub aggs_added: Vec<String>,
    pub scalarized_aggs: Vec<String>,
    pub dimension_joins: Vec<String>,
    pub guards: Vec<String>,
    pub nodes_added: usize,
}

impl InjectedSummary {
    pub fn render(&self) -> String {
        let mut out = Vec::new();
        for t in &self.threaded_columns {
            out.push(format!("thread   {t}"));
        }
        for a in &self.aggs_added {
            out.push(format!("inline   {a}"));
        }
        for s in &self.scalarized_aggs {
            out.push(format!("scalar   {s}"));
        }
        for d in &self.dimension_joins {
            out.push(format!("dimjoin  {d}"));
        }
        for g in &self.guards {
            out.push(format!("guard    {g}"));
        }
        out.push(format!("nodes added: {}", self.nodes_added));
        out.join("\n")
    }
}

#[derive(Debug, Clone)]
pub struct RewriteResult {
    pub plan: LogicalPlan,
    pub emitted_sql: String,
    pub injected: InjectedSummary,
}

fn unsupported(policy: &Policy, reason: impl Into<String>) -> RewriteError {
    RewriteError::Unsupported {
        policy: policy.name.clone(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// Plan surgery helpers
// ---------------------------------------------------------------------------

/// Alias of the unique scan of `rel`.
fn find_scan_alias(plan: &LogicalPlan, rel: &str) -> Option<String> {
    match plan {
        LogicalPlan::Scan { relation, alias } if relation == rel => Some(alias.clone()),
        _ => plan
            .children()
            .iter()
            .find_map(|c| find_scan_alias(c, rel)),
    }
}

fn subtree_scans(plan: &LogicalPlan, rel: &str) -> bool {
    plan.scan_count(rel) > 0
}

/// Whether an Aggregate or Distinct lies on the path from `plan`'s root to
/// the scan of `rel`.
fn plus_above_scan(plan: &LogicalPlan, rel: &str) -> bool {
    match plan {
        LogicalPlan::Aggregate { input, .. } | LogicalPlan::Distinct { input } => {
            subtree_scans(input, rel)
        }
        _ => plan
            .children()
            .iter()
            .any(|c| subtree_scans(c, rel) && plus_above_scan(c, rel)),
    }
}

/// Threads `needed` columns of the scan aliased `scan_alias` upward through
/// every Project between that scan and the current node, returning the
/// (qualifier, column -> exposure name) map valid at this node's output.
fn thread_columns(
    node: &mut LogicalPlan,
    rel: &str,
    needed: &[String],
    injected: &mut InjectedSummary,
) -> Result<Option<(String, BTreeMap<String, String>)>, RewriteError> {
    match node {
        LogicalPlan::Scan { relation, alias } if relation == rel => {
            let map = needed.iter().map(|c| (c.clone(), c.clone())).collect();
            Ok(Some((alias.clone(), map)))
        }
        LogicalPlan::Scan { .. } | LogicalPlan::Update { .. } => Ok(None),
        LogicalPlan::Alias { input, alias } => {
            Ok(thread_columns(input, rel, needed, injected)?
                .map(|(_, map)| (alias.clone(), map)))
        }
        LogicalPlan::Project { input, items, .. } => {
            let inner = thread_columns(input, rel, needed, injected)?;
            let (qual, map) = match inner {
                Some(x) => x,
                None => return Ok(None),
            };
            let mut out_map = BTreeMap::new();
            for col in needed {
                let exposure = map.get(col).expect("threaded below").clone();
                // Already projected as a bare column of this source?
                let existing = items.iter().find(|it| match &it.expr {
                    ScalarExpr::Column(c) => {
                        c.column == exposure
                            && (c.alias.is_none() || c.alias.as_deref() == Some(qual.as_str()))
                    }
                    _ => false,
                });
                let name = match existing {
                    Some(it) => it.name.clone(),
                    None => {
                        let mut name = exposure.clone();
                        let mut k = 0;
                        while items.iter().any(|it| it.name == name) {
                            name = format!("__t{k}_{exposure}");
                            k += 1;
                        }
                        items.push(ProjectItem::new(
                            ScalarExpr::Column(ColumnRef::new(Some(&qual), &exposure)),
                            &name,
                        ));
                        injected
                            .threaded_columns
                            .push(format!("{qual}.{exposure} as {name}"));
                        name
                    }
                };
                out_map.insert(col.clone(), name);
            }
            Ok(Some((qual, out_map)))
        }
        LogicalPlan::Filter { input, .. } | LogicalPlan::Distinct { input } => {
            thread_columns(input, rel, needed, injected)
        }
        LogicalPlan::Join { left, right, .. } => {
            if subtree_scans(left, rel) {
                thread_columns(left, rel, needed, injected)
            } else {
                thread_columns(right, rel, needed, injected)
            }
        }
        LogicalPlan::Aggregate { .. } => {
            // Crossing another aggregation would change contributor sets.
            Ok(None)
        }
    }
}

/// Appends `aggs` to the Aggregate node sitting above the scan of `rel`
/// (threading their argument columns below it first).
fn inline_into_aggregate(
    node: &mut LogicalPlan,
    rel: &str,
    prepared: &mut Option<PreparedAggs>,
    injected: &mut InjectedSummary,
) -> Result<bool, RewriteError> {
    if !subtree_scans(node, rel) {
        return Ok(false);
    }
    if let LogicalPlan::Aggregate { input, aggs, .. } = node {
        let mut p = prepared.take().expect("inlined once");
        let (qual, name_map) = match thread_columns(input, rel, &p.needed, injected)? {
            Some(x) => x,
            None => {
                *prepared = Some(p);
                return Ok(false);
            }
        };
        for agg in p.finish(&qual, &name_map) {
            injected
                .aggs_added
                .push(format!("{} as {}", agg.render(), agg.alias));
            aggs.push(agg);
        }
        return Ok(true);
    }
    for child in match node {
        LogicalPlan::Alias { input, .. }
        | LogicalPlan::Filter { input, .. }
        | LogicalPlan::Project { input, .. }
        | LogicalPlan::Distinct { input } => vec![input.as_mut()],
        LogicalPlan::Join { left, right, .. } => vec![left.as_mut(), right.as_mut()],
        _ => vec![],
    } {
        if inline_into_aggregate(child, rel, prepared, injected)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Policy aggregates re-targeted at the plan: argument references rewritten
/// from policy scope aliases to the plan's scan alias and threaded names.
struct PreparedAggs {
    needed: Vec<String>,
    aggs: Vec<(AggFunc, Option<ScalarExpr>, String)>,
}

impl PreparedAggs {
    fn finish(&mut self, qual: &str, name_map: &BTreeMap<String, String>) -> Vec<AggExpr> {
        self.aggs
            .drain(..)
            .map(|(func, arg, alias)| AggExpr {
                func,
                arg: arg.map(|e| requalify(e, qual, name_map)),
                alias,
            })
            .collect()
    }
}

/// Rewrites every column reference to `qual.<threaded name>`.
fn requalify(e: ScalarExpr, qual: &str, name_map: &BTreeMap<String, String>) -> ScalarExpr {
    e.rewrite(&mut |node| match node {
        ScalarExpr::Column(c) => {
            let name = name_map.get(&c.column).cloned().unwrap_or(c.column);
            ScalarExpr::Column(ColumnRef::new(Some(qual), &name))
        }
        other => other,
    })
}

/// Degenerate scalar form of an aggregate over a single contributing tuple.
fn scalarize_agg(func: AggFunc, arg: Option<&ScalarExpr>) -> ScalarExpr {
    match (func, arg) {
        (AggFunc::Count, None) => ScalarExpr::Literal(Value::Int(1)),
        (AggFunc::Count | AggFunc::CountDistinct, Some(a)) => ScalarExpr::Case {
            whens: vec![(
                ScalarExpr::IsNull {
                    expr: Box::new(a.clone()),
                    negated: false,
                },
                ScalarExpr::Literal(Value::Int(0)),
            )],
            otherwise: Some(Box::new(ScalarExpr::Literal(Value::Int(1)))),
        },
        (.., Some(a)) => a.clone(),
        (f, None) => unreachable!("{}(*) rejected at validation", f.name()),
    }
}

/// Category of a constraint-scope slot.
#[derive(Debug, Clone, Copy, PartialEq)]
enum SlotCat {
    Agg(usize),
    Dim(usize),
    Newu(usize),
}

fn slot_categories(p: &Policy, db: &Database) -> Result<Vec<SlotCat>, RewriteError> {
    let cp = p.compiled()?;
    let mut cats = Vec::with_capacity(cp.constraint_scope.len());
    for _ in 0..p.aggs.len() {
        cats.push(SlotCat::Agg(cats.len()));
    }
    for &di in &cp.catalog_dims {
        let d = &p.dimensions[di];
        let n = db
            .schema(&d.relation)
            .map_err(|e| RewriteError::Plan(e.into()))?
            .columns
            .len();
        for j in 0..n {
            let _ = j;
            cats.push(SlotCat::Dim(di));
        }
    }
    if let PolicyTarget::Update { relation, .. } = &p.target {
        let n = db
            .schema(relation)
            .map_err(|e| RewriteError::Plan(e.into()))?
            .columns
            .len();
        for j in 0..n {
            cats.push(SlotCat::Newu(j));
        }
    }
    debug_assert_eq!(cats.len(), cp.constraint_scope.len());
    Ok(cats)
}

/// The dimensions (by index) a conjunct's references touch, and whether it
/// touches anything that is not a dimension column / session constant.
fn conjunct_profile(c: &ScalarExpr, cats: &[SlotCat]) -> (Vec<usize>, bool) {
    let mut dims = Vec::new();
    let mut non_dim = false;
    for r in c.column_refs() {
        match r.slot.map(|s| cats[s]) {
            Some(SlotCat::Dim(d)) => {
                if !dims.contains(&d) {
                    dims.push(d);
                }
            }
            Some(_) => non_dim = true,
            None => non_dim = true,
        }
    }
    (dims, non_dim)
}

/// Substitutes constraint-scope references: aggregates become their plan
/// replacement, dimension columns re-qualify to the plan's dimension alias,
/// update new-image columns become their assignment expressions.
fn substitute_constraint(
    e: &ScalarExpr,
    cats: &[SlotCat],
    agg_repl: &[ScalarExpr],
    dim_alias: &BTreeMap<usize, String>,
    newu_repl: Option<&[ScalarExpr]>,
) -> ScalarExpr {
    e.clone().rewrite(&mut |node| match node {
        ScalarExpr::Column(c) => match c.slot.map(|s| cats[s]) {
            Some(SlotCat::Agg(i)) => agg_repl[i].clone(),
            Some(SlotCat::Dim(d)) => {
                let alias = dim_alias.get(&d).expect("dimension attached");
                ScalarExpr::Column(ColumnRef::new(Some(alias), &c.column))
            }
            Some(SlotCat::Newu(j)) => match newu_repl {
                Some(repl) => repl[j].clone(),
                None => ScalarExpr::Column(c),
            },
            None => ScalarExpr::Column(c),
        },
        other => other,
    })
}

fn project_all_items(plan: &LogicalPlan, db: &Database) -> Result<Vec<ProjectItem>, PlanError> {
    let scope = output_scope(plan, db)?;
    let mut items: Vec<ProjectItem> = Vec::new();
    for b in &scope.bindings {
        let mut name = b.name.clone();
        let mut k = 0;
        while items.iter().any(|it| it.name == name) {
            name = format!("__c{k}_{}", b.name);
            k += 1;
        }
        items.push(ProjectItem::new(
            ScalarExpr::Column(ColumnRef::new(b.alias.as_deref(), &b.name)),
            &name,
        ));
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Select rewrite
// ---------------------------------------------------------------------------

/// Rewrites a select plan so that plain execution enforces every policy in
/// `policies` (applicable, normalized, validated OVER policies).
pub fn rewrite_select(
    plan: &LogicalPlan,
    policies: &[&Policy],
    _session: &Session,
    db: &Database,
) -> Result<RewriteResult, RewriteError> {
    let mut work = plan.clone();
    validate(&mut work, db)?;
    let mut injected = InjectedSummary::default();
    if policies.is_empty() {
        let emitted_sql = render_sql(&work, db)?;
        return Ok(RewriteResult {
            plan: work,
            emitted_sql,
            injected,
        });
    }
    let original_nodes = work.node_count();

    // Peel the user projection; everything is inserted beneath it.
    let (user_items, mut body) = match work {
        LogicalPlan::Project { input, items, .. } => (items, *input),
        other => {
            let items = project_all_items(&other, db)?;
            (items, other)
        }
    };

    // Dimension joins and guard columns widen the scope under the user
    // projection, so its references must be fully qualified now, while the
    // resolution against the original scope is still at hand.
    let body_scope = output_scope(&body, db)?;
    let user_items: Vec<ProjectItem> = user_items
        .into_iter()
        .map(|item| ProjectItem {
            name: item.name,
            expr: item.expr.rewrite(&mut |node| match node {
                ScalarExpr::Column(mut c) => {
                    if let Some(slot) = c.slot {
                        if let Some(b) = body_scope.bindings.get(slot) {
                            c.alias = b.alias.clone();
                        }
                    }
                    c.slot = None;
                    ScalarExpr::Column(c)
                }
                other => other,
            }),
        })
        .collect();

    // DISTINCT dedup is a + source: rewrite it to group-by-all first so the
    // policy aggregates see the merged groups.
    if let LogicalPlan::Distinct { input } = body {
        let scope = output_scope(&input, db)?;
        let mut seen = Vec::new();
        let mut group_by = Vec::new();
        for b in &scope.bindings {
            if seen.contains(&b.name) {
                return Err(RewriteError::Unsupported {
                    policy: policies[0].name.clone(),
                    reason: format!(
                        "DISTINCT over duplicate column name `{}` cannot become GROUP BY",
                        b.name
                    ),
                });
            }
            seen.push(b.name.clone());
            group_by.push(ColumnRef::new(b.alias.as_deref(), &b.name));
        }
        body = LogicalPlan::Aggregate {
            input,
            group_by,
            aggs: vec![],
        };
    }

    // Names already taken at the guard level; policy agg aliases must not
    // collide with them.
    let mut taken_names: Vec<String> = output_scope(&body, db)?
        .bindings
        .iter()
        .map(|b| b.name.clone())
        .collect();

    // Phase 1: per policy, inline aggregates (or scalarize) and build the
    // guard condition ingredients.
    struct Planned<'p> {
        policy: &'p Policy,
        agg_repl: Vec<ScalarExpr>,
    }
    let mut planned: Vec<Planned> = Vec::new();

    for p in policies {
        let cp = p.compiled()?;
        let rels: Vec<String> = match &p.target {
            PolicyTarget::Over(rels) => rels.clone(),
            PolicyTarget::Update { .. } => {
                return Err(unsupported(p, "UPDATE policy applied to a select"))
            }
        };
        for r in &rels {
            match body.scan_count(r) {
                1 => {}
                0 => return Err(unsupported(p, format!("relation `{r}` is not scanned"))),
                _ => {
                    return Err(unsupported(
                        p,
                        format!("relation `{r}` is scanned more than once (self-join)"),
                    ))
                }
            }
        }
        if p.on_fail == OnFail::KillQuery && !cp.catalog_dims.is_empty() {
            return Err(unsupported(
                p,
                "KILL QUERY with catalog dimensions (a missing dimension match cannot raise)",
            ));
        }

        // Group aggregates by source relation and by whether an aggregation
        // operator sits above that relation's scan.
        let mut agg_repl: Vec<Option<ScalarExpr>> = vec![None; p.aggs.len()];
        for (i, agg) in p.aggs.iter().enumerate() {
            let source_rel = match &cp.agg_sources[i] {
                crate::policy::AggSource::Relation(r) => r.clone(),
                crate::policy::AggSource::UpdateCandidate => {
                    return Err(unsupported(p, "update aggregate in a select policy"))
                }
            };
            // The policy scope may reference the relation directly or via a
            // provenance-dimension alias; both resolve to the same scan.
            let needed: Vec<String> = agg
                .arg
                .as_ref()
                .map(|a| {
                    let mut cols: Vec<String> = Vec::new();
                    for c in a.column_refs() {
                        if !cols.contains(&c.column) {
                            cols.push(c.column.clone());
                        }
                    }
                    cols
                })
                .unwrap_or_default();

            if plus_above_scan(&body, &source_rel) {
                // Inline into the aggregation operator above the scan.
                let mut alias = agg.alias.clone();
                let mut k = 0;
                while taken_names.contains(&alias) {
                    alias = format!("__p{k}_{}", agg.alias);
                    k += 1;
                }
                taken_names.push(alias.clone());
                let mut prepared = Some(PreparedAggs {
                    needed: needed.clone(),
                    aggs: vec![(agg.func, agg.arg.clone(), alias.clone())],
                });
                let done = inline_into_aggregate(&mut body, &source_rel, &mut prepared, &mut injected)?;
                if !done {
                    return Err(unsupported(
                        p,
                        format!(
                            "no single aggregation operator above `{source_rel}` to inline into"
                        ),
                    ));
                }
                agg_repl[i] = Some(ScalarExpr::Column(ColumnRef::bare(&alias)));
            } else {
                // No aggregation above the scan: every output row has
                // exactly one contributing tuple of the target, so the
                // aggregate collapses to a per-row scalar.
                let scan_alias = find_scan_alias(&body, &source_rel)
                    .ok_or_else(|| unsupported(p, format!("no scan of `{source_rel}`")))?;
                let identity: BTreeMap<String, String> =
                    needed.iter().map(|c| (c.clone(), c.clone())).collect();
                let arg = agg
                    .arg
                    .as_ref()
                    .map(|a| requalify(a.clone(), &scan_alias, &identity));
                let scalar = scalarize_agg(agg.func, arg.as_ref());
                injected
                    .scalarized_aggs
                    .push(format!("{} -> {}", agg.render(), scalar));
                agg_repl[i] = Some(scalar);
            }
        }
        planned.push(Planned {
            policy: p,
            agg_repl: agg_repl.into_iter().map(|o| o.unwrap()).collect(),
        });
    }

    // Phase 2: stack guards. KILL QUERY guards go first so they observe the
    // unfiltered output; KILL ROW machinery stacks above them.
    let mut top = body;
    let mut kill_counter = 0usize;
    let mut dim_counter = 0usize;

    for pl in planned.iter().filter(|pl| pl.policy.on_fail == OnFail::KillQuery) {
        let p = pl.policy;
        let cats = slot_categories(p, db)?;
        let cond = substitute_constraint(&p.constraint, &cats, &pl.agg_repl, &BTreeMap::new(), None);
        if matches!(top, LogicalPlan::Aggregate { .. }) {
            // Fig-4-shaped guard: a projection computing
            // `case when not <constraint> then kill(...) end`.
            let mut items = project_all_items(&top, db)?;
            let kill_name = format!("__kill{kill_counter}");
            kill_counter += 1;
            items.push(ProjectItem::new(
                ScalarExpr::Case {
                    whens: vec![(
                        ScalarExpr::not(cond.clone()),
                        ScalarExpr::Kill {
                            policy: p.name.clone(),
                        },
                    )],
                    otherwise: None,
                },
                &kill_name,
            ));
            taken_names.push(kill_name);
            top = LogicalPlan::Project {
                input: Box::new(top),
                items,
                star: false,
            };
        } else {
            // Scan-shaped queries guard with an error-raising filter: a
            // passing row short-circuits, a failing one evaluates kill().
            top = top.filter(ScalarExpr::or(
                cond.clone(),
                ScalarExpr::Kill {
                    policy: p.name.clone(),
                },
            ));
        }
        injected
            .guards
            .push(format!("{}: kill query when not ({cond})", p.name));
    }

    for pl in planned.iter().filter(|pl| pl.policy.on_fail == OnFail::KillRow) {
        let p = pl.policy;
        let cp = p.compiled()?;
        let cats = slot_categories(p, db)?;

        // Classify conjuncts per catalog dimension.
        let conjuncts: Vec<ScalarExpr> =
            p.constraint.conjuncts().into_iter().cloned().collect();
        let mut dimsel: BTreeMap<usize, Vec<ScalarExpr>> = BTreeMap::new();
        let mut residual: Vec<ScalarExpr> = Vec::new();
        for c in conjuncts {
            let (dims, non_dim) = conjunct_profile(&c, &cats);
            match (dims.len(), non_dim) {
                (0, _) => residual.push(c),
                (1, false) => dimsel.entry(dims[0]).or_default().push(c),
                (1, true) => residual.push(c),
                _ => {
                    return Err(unsupported(
                        p,
                        "a constraint conjunct couples multiple catalog dimensions",
                    ))
                }
            }
        }

        // Residual conjuncts referencing a dimension whose selection is
        // empty move into that dimension's join predicate, preserving the
        // existential reading exactly.
        if cp.catalog_dims.len() == 1 {
            let d = cp.catalog_dims[0];
            if dimsel.get(&d).map(|v| v.is_empty()).unwrap_or(true) {
                let (with_dim, without): (Vec<_>, Vec<_>) =
                    residual.into_iter().partition(|c| {
                        let (dims, _) = conjunct_profile(c, &cats);
                        dims.contains(&d)
                    });
                if !with_dim.is_empty() {
                    dimsel.insert(d, with_dim);
                }
                residual = without;
            }
        } else if cp.catalog_dims.len() > 1 {
            for c in &residual {
                let (dims, _) = conjunct_profile(c, &cats);
                if !dims.is_empty() && dimsel.get(&dims[0]).map(|v| v.is_empty()).unwrap_or(true)
                {
                    return Err(unsupported(
                        p,
                        "multiple catalog dimensions without per-dimension selection conjuncts",
                    ));
                }
            }
        }

        // Attach catalog dimensions as semi-joins-with-payload.
        let mut dim_alias: BTreeMap<usize, String> = BTreeMap::new();
        for &di in &cp.catalog_dims {
            let d = &p.dimensions[di];
            let alias = format!("__d{dim_counter}");
            dim_counter += 1;
            dim_alias.insert(di, alias.clone());
            let sel = dimsel.remove(&di).unwrap_or_default();
            let mut pred = ScalarExpr::conjoin(
                sel.iter()
                    .map(|c| {
                        substitute_constraint(c, &cats, &pl.agg_repl, &dim_alias, None)
                    })
                    .collect(),
            );
            if sel.is_empty() {
                pred = ScalarExpr::Literal(Value::Bool(true));
            }
            injected
                .dimension_joins
                .push(format!("{}: {} as {alias} on {pred}", p.name, d.relation));
            top = LogicalPlan::Join {
                left: Box::new(top),
                right: Box::new(LogicalPlan::scan_as(&d.relation, &alias)),
                predicate: pred,
                semi_payload: true,
            };
        }

        // Residual filter (the whole constraint when there are no
        // dimensions). A null constraint is not true, so the filter drops
        // the row: conservative enforcement for free.
        let cond = substitute_constraint(
            &ScalarExpr::conjoin(residual),
            &cats,
            &pl.agg_repl,
            &dim_alias,
            None,
        );
        if cond != ScalarExpr::Literal(Value::Bool(true)) {
            injected
                .guards
                .push(format!("{}: keep rows where {cond}", p.name));
            top = top.filter(cond);
        } else {
            injected
                .guards
                .push(format!("{}: dimension join only", p.name));
        }
    }

    // Restore the user's output columns.
    let mut rewritten = LogicalPlan::Project {
        input: Box::new(top),
        items: user_items,
        star: false,
    };
    validate(&mut rewritten, db)?;
    injected.nodes_added = rewritten.node_count().saturating_sub(original_nodes);

    let emitted_sql = render_sql(&rewritten, db)?;
    Ok(RewriteResult {
        plan: rewritten,
        emitted_sql,
        injected,
    })
}

// ---------------------------------------------------------------------------
// Update rewrite
// ---------------------------------------------------------------------------

/// Strengthens an update's predicate so only policy-passing rows are
/// assigned (KILL ROW) or the statement aborts on the first violating
/// candidate (KILL QUERY). The old image is readable under the provenance
/// dimension's alias, the new image as the target alias via the assignment
/// expressions.
pub fn rewrite_update(
    plan: &LogicalPlan,
    policies: &[&Policy],
    db: &Database,
) -> Result<RewriteResult, RewriteError> {
    let mut work = plan.clone();
    validate(&mut work, db)?;
    let mut injected = InjectedSummary::default();
    let (relation, alias, assignments, predicate) = match &work {
        LogicalPlan::Update {
            relation,
            alias,
            assignments,
            predicate,
        } => (
            relation.clone(),
            alias.clone(),
            assignments.clone(),
            predicate.clone(),
        ),
        _ => {
            return Err(RewriteError::Plan(PlanError::Type(
                crate::expr::TypeError::Mismatch("rewrite_update needs an update plan".into()),
            )))
        }
    };
    if policies.is_empty() {
        let emitted_sql = render_sql(&work, db)?;
        return Ok(RewriteResult {
            plan: work,
            emitted_sql,
            injected,
        });
    }

    let schema = db
        .schema(&relation)
        .map_err(|e| RewriteError::Plan(e.into()))?
        .clone();

    // New-image expression per column: the assignment expression, or the
    // old column value when unassigned.
    let newu_repl: Vec<ScalarExpr> = schema
        .columns
        .iter()
        .map(|c| {
            assignments
                .iter()
                .find(|(col, _)| col == &c.name)
                .map(|(_, e)| e.clone())
                .unwrap_or_else(|| ScalarExpr::Column(ColumnRef::new(Some(&alias), &c.name)))
        })
        .collect();

    let mut extra: Vec<ScalarExpr> = Vec::new();
    let mut ordered: Vec<&&Policy> = policies
        .iter()
        .filter(|p| p.on_fail == OnFail::KillQuery)
        .collect();
    ordered.extend(policies.iter().filter(|p| p.on_fail == OnFail::KillRow));

    for p in ordered {
        let cp = p.compiled()?;
        if !cp.catalog_dims.is_empty() {
            return Err(unsupported(p, "catalog dimensions in an update policy"));
        }
        let cats = slot_categories(p, db)?;

        // Aggregates evaluate over the single candidate environment; their
        // replacement is the scalarized argument with newu./oldu. references
        // mapped onto the target row.
        let mut agg_repl = Vec::with_capacity(p.aggs.len());
        for agg in &p.aggs {
            let arg = agg.arg.as_ref().map(|a| {
                substitute_update_refs(a, p, &schema, &alias, &newu_repl)
            });
            let scalar = scalarize_agg(agg.func, arg.as_ref());
            injected
                .scalarized_aggs
                .push(format!("{} -> {}", agg.render(), scalar));
            agg_repl.push(scalar);
        }
        let cond = substitute_constraint(
            &p.constraint,
            &cats,
            &agg_repl,
            &BTreeMap::new(),
            Some(&newu_repl),
        );
        match p.on_fail {
            OnFail::KillQuery => {
                injected
                    .guards
                    .push(format!("{}: kill query when not ({cond})", p.name));
                extra.push(ScalarExpr::or(
                    cond,
                    ScalarExpr::Kill {
                        policy: p.name.clone(),
                    },
                ));
            }
            OnFail::KillRow => {
                injected
                    .guards
                    .push(format!("{}: assign only rows where {cond}", p.name));
                extra.push(cond);
            }
        }
    }

    let mut conjuncts = Vec::new();
    if let Some(p) = predicate {
        conjuncts.push(p);
    }
    conjuncts.extend(extra);
    let mut rewritten = LogicalPlan::Update {
        relation,
        alias,
        assignments,
        predicate: Some(ScalarExpr::conjoin(conjuncts)),
    };
    validate(&mut rewritten, db)?;
    let emitted_sql = render_sql(&rewritten, db)?;
    Ok(RewriteResult {
        plan: rewritten,
        emitted_sql,
        injected,
    })
}

/// Maps a policy aggregate argument written over `newu`/`oldu` aliases onto
/// the update target's row: old-image references become plain target column
/// references, new-image references become the assignment expressions.
fn substitute_update_refs(
    e: &ScalarExpr,
    p: &Policy,
    schema: &crate::schema::Schema,
    target_alias: &str,
    newu_repl: &[ScalarExpr],
) -> ScalarExpr {
    let cp = p.compiled.as_ref().expect("compiled");
    let new_alias_len = schema.columns.len();
    e.clone().rewrite(&mut |node| match node {
        ScalarExpr::Column(c) => {
            match c.slot {
                // Aggregate scope layout for updates: new image columns
                // first, then the prior image under the provenance alias.
                Some(s) if s < new_alias_len => newu_repl[s].clone(),
                Some(s) => {
                    let b = &cp.agg_scope.bindings[s];
                    ScalarExpr::Column(ColumnRef::new(Some(target_alias), &b.name))
                }
                None => ScalarExpr::Column(c),
            }
        }
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Capture baseline
// ---------------------------------------------------------------------------

/// The strategy the rewrite exists to avoid: annotate the whole execution
/// with provenance polynomials, materialize the annotated view, then filter
/// it with the conceptual policy evaluation. Same outcomes as the oracle;
/// shipped purely as the benchmark baseline.
pub fn capture_baseline(
    plan: &LogicalPlan,
    policies: &PolicySet,
    db: &Database,
    session: &Session,
    opts: ExecOptions,
) -> Result<(EnforcementOutcome, ExecStats), Error> {
    let stmt = QueryStatement::new(plan.clone()).with_session(session.clone());
    let applicable = policies.applicable_to(&stmt);
    crate::oracle::check_session(&applicable, session)?;
    let (rows, stats) = execute_with_provenance(plan, db, session, opts)?;
    // Materialize the annotated view before policy post-processing.
    let view: Vec<crate::oracle::AnnotatedRow> = rows.clone();
    drop(rows);
    let outcome = apply_policies_to_rows(view, &applicable, db, session)?;
    Ok((outcome, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::execute;
    use crate::policy::{normalize_policy, parse_policy, validate_policy};
    use crate::schema::{relation_from_rows, Database};
    use crate::sql::parse_sql;
    use crate::value::ValType;

    fn fig_db() -> Database {
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
                vec![
                    vec![Value::Int(1), Value::text("north"), Value::text("A"), Value::Decimal(80.0), Value::Int(2024)],
                    vec![Value::Int(2), Value::text("north"), Value::text("B"), Value::Decimal(90.0), Value::Int(2024)],
                    vec![Value::Int(3), Value::text("south"), Value::text("A"), Value::Decimal(70.0), Value::Int(2024)],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "s",
                vec![("sid", ValType::Int, false), ("year", ValType::Int, false)],
                vec![
                    vec![Value::Int(1), Value::Int(1)],
                    vec![Value::Int(2), Value::Int(1)],
                    vec![Value::Int(3), Value::Int(1)],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "users",
                vec![("id", ValType::Int, false), ("role", ValType::Text, false)],
                vec![
                    vec![Value::Int(7), Value::text("Public")],
                    vec![Value::Int(8), Value::text("Analyst")],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    fn policy(text: &str, db: &Database) -> Policy {
        let mut p = normalize_policy(&parse_policy(text).unwrap()).unwrap();
        if p.name.is_empty() {
            p.name = "p".into();
        }
        validate_policy(&mut p, db).unwrap();
        p
    }

    #[test]
    fn disaggregation_rewrite_inlines_agg_and_kill_guard() {
        let db = fig_db();
        let p = policy(
            "POLICY OVER students AGG count(distinct ethnicity) as cnt CONSTRAINT cnt = 1 ON FAIL KILL QUERY",
            &db,
        );
        let stmt = parse_sql(
            "SELECT school, avg(score) AS a FROM students JOIN s ON students.sid = s.sid GROUP BY school",
        )
        .unwrap();
        let session = Session::default();
        let r = rewrite_select(&stmt.plan, &[&p], &session, &db).unwrap();
        assert!(r.injected.aggs_added.iter().any(|a| a.contains("count(distinct") && a.contains("as cnt")), "{:?}", r.injected.aggs_added);
        assert!(r.injected.guards[0].contains("kill query"));
        assert!(r.emitted_sql.contains("kill('p')"), "{}", r.emitted_sql);
        // Executing the rewritten plan raises the policy error (mixed
        // ethnicities in the north group).
        let err = execute(&r.plan, &db, &session, ExecOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            crate::exec::ExecError::PolicyKilled { .. }
        ));
    }

    #[test]
    fn identity_rewrite_with_no_policies() {
        let db = fig_db();
        let mut stmt = parse_sql("SELECT school FROM students WHERE score > 75.0").unwrap();
        let session = Session::default();
        let r = rewrite_select(&stmt.plan, &[], &session, &db).unwrap();
        validate(&mut stmt.plan, &db).unwrap();
        assert_eq!(r.plan, stmt.plan);
        assert_eq!(r.injected.nodes_added, 0);
    }
}
