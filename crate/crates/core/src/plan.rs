//! Logical query plans and their validation.
//!
//! Plans execute as written: there is no optimizer. Validation resolves every
//! column reference to a slot in its node's input row and type-checks every
//! expression, so execution can never hit a type or name error.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::expr::{
    AggExpr, AggPolicy, Binding, ColumnRef, ScalarExpr, Scope, Session, TypeError,
};
use crate::schema::{Database, SchemaError};
use crate::value::{ValType, Value};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("duplicate alias `{0}` in FROM")]
    DuplicateAlias(String),
    #[error("duplicate output column `{0}`")]
    DuplicateOutput(String),
    #[error("more than one aggregation block on a plan path")]
    NestedAggregate,
    #[error("GROUP BY keys must be bare column references")]
    GroupByNotColumn,
    #[error("SELECT * is ambiguous here: column `{0}` appears more than once")]
    StarAmbiguous(String),
    #[error("predicate must be boolean, got {0}")]
    PredicateNotBool(ValType),
    #[error("unknown column `{0}` in UPDATE SET")]
    UnknownAssignColumn(String),
    #[error("cannot assign {got} to column `{column}` of type {want}")]
    AssignType {
        column: String,
        want: ValType,
        got: ValType,
    },
    #[error("cannot assign null to non-nullable column `{0}`")]
    AssignNull(String),
    #[error("statement requires a session current_user")]
    MissingCurrentUser,
}

/// One output column of a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectItem {
    pub expr: ScalarExpr,
    pub name: String,
}

impl ProjectItem {
    pub fn new(expr: ScalarExpr, name: &str) -> ProjectItem {
        ProjectItem {
            expr,
            name: name.to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogicalPlan {
    Scan {
        relation: String,
        alias: String,
    },
    /// Derived-table alias: rebinds the input's outputs under one alias.
    Alias {
        input: Box<LogicalPlan>,
        alias: String,
    },
    Filter {
        input: Box<LogicalPlan>,
        predicate: ScalarExpr,
    },
    Project {
        input: Box<LogicalPlan>,
        items: Vec<ProjectItem>,
        /// `SELECT *`; validation expands it into explicit items.
        star: bool,
    },
    Join {
        left: Box<LogicalPlan>,
        right: Box<LogicalPlan>,
        predicate: ScalarExpr,
        /// Semi-join-with-payload: each left row survives at most once,
        /// extended with the first matching right row.
        semi_payload: bool,
    },
    Aggregate {
        input: Box<LogicalPlan>,
        group_by: Vec<ColumnRef>,
        aggs: Vec<AggExpr>,
    },
    Distinct {
        input: Box<LogicalPlan>,
    },
    Update {
        relation: String,
        alias: String,
        assignments: Vec<(String, ScalarExpr)>,
        predicate: Option<ScalarExpr>,
    },
}

impl LogicalPlan {
    pub fn scan(relation: &str) -> LogicalPlan {
        LogicalPlan::Scan {
            relation: relation.to_lowercase(),
            alias: relation.to_lowercase(),
        }
    }

    pub fn scan_as(relation: &str, alias: &str) -> LogicalPlan {
        LogicalPlan::Scan {
            relation: relation.to_lowercase(),
            alias: alias.to_lowercase(),
        }
    }

    pub fn filter(self, predicate: ScalarExpr) -> LogicalPlan {
        LogicalPlan::Filter {
            input: Box::new(self),
            predicate,
        }
    }

    pub fn project(self, items: Vec<ProjectItem>) -> LogicalPlan {
        LogicalPlan::Project {
            input: Box::new(self),
            items,
            star: false,
        }
    }

    pub fn join(self, right: LogicalPlan, predicate: ScalarExpr) -> LogicalPlan {
        LogicalPlan::Join {
            left: Box::new(self),
            right: Box::new(right),
            predicate,
            semi_payload: false,
        }
    }

    pub fn aggregate(self, group_by: Vec<ColumnRef>, aggs: Vec<AggExpr>) -> LogicalPlan {
        LogicalPlan::Aggregate {
            input: Box::new(self),
            group_by,
            aggs,
        }
    }

    pub fn distinct(self) -> LogicalPlan {
        LogicalPlan::Distinct {
            input: Box::new(self),
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(self, LogicalPlan::Update { .. })
    }

    pub fn children(&self) -> Vec<&LogicalPlan> {
        match self {
            LogicalPlan::Scan { .. } | LogicalPlan::Update { .. } => vec![],
            LogicalPlan::Alias { input, .. }
            | LogicalPlan::Filter { input, .. }
            | LogicalPlan::Project { input, .. }
            | LogicalPlan::Aggregate { input, .. }
            | LogicalPlan::Distinct { input } => vec![input],
            LogicalPlan::Join { left, right, .. } => vec![left, right],
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(|c| c.node_count()).sum::<usize>()
    }

    /// Names of all base relations scanned (update target included).
    pub fn referenced_relations(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        fn walk(p: &LogicalPlan, out: &mut BTreeSet<String>) {
            match p {
                LogicalPlan::Scan { relation, .. } => {
                    out.insert(relation.clone());
                }
                LogicalPlan::Update { relation, .. } => {
                    out.insert(relation.clone());
                }
                _ => {}
            }
            for c in p.children() {
                walk(c, out);
            }
        }
        walk(self, &mut out);
        out
    }

    /// Number of scans of one base relation (self-joins count each).
    pub fn scan_count(&self, relation: &str) -> usize {
        let relation = relation.to_lowercase();
        let mut n = 0;
        fn walk(p: &LogicalPlan, rel: &str, n: &mut usize) {
            if let LogicalPlan::Scan { relation, .. } = p {
                if relation == rel {
                    *n += 1;
                }
            }
            for c in p.children() {
                walk(c, rel, n);
            }
        }
        walk(self, &relation, &mut n);
        n
    }

    pub fn references_current_user(&self) -> bool {
        fn expr_refs(e: &ScalarExpr) -> bool {
            e.references_current_user()
        }
        let here = match self {
            LogicalPlan::Filter { predicate, .. } => expr_refs(predicate),
            LogicalPlan::Project { items, .. } => items.iter().any(|i| expr_refs(&i.expr)),
            LogicalPlan::Join { predicate, .. } => expr_refs(predicate),
            LogicalPlan::Aggregate { aggs, .. } => aggs
                .iter()
                .any(|a| a.arg.as_ref().map(expr_refs).unwrap_or(false)),
            LogicalPlan::Update {
                assignments,
                predicate,
                ..
            } => {
                assignments.iter().any(|(_, e)| expr_refs(e))
                    || predicate.as_ref().map(expr_refs).unwrap_or(false)
            }
            _ => false,
        };
        here || self.children().iter().any(|c| c.references_current_user())
    }
}

/// A parsed statement plus the session it will run under.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryStatement {
    pub plan: LogicalPlan,
    pub session: Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatementKind {
    Select,
    Update,
}

impl QueryStatement {
    pub fn new(plan: LogicalPlan) -> QueryStatement {
        QueryStatement {
            plan,
            session: Session::default(),
        }
    }

    pub fn kind(&self) -> StatementKind {
        if self.plan.is_update() {
            StatementKind::Update
        } else {
            StatementKind::Select
        }
    }

    pub fn with_session(mut self, session: Session) -> QueryStatement {
        self.session = session;
        self
    }
}

/// Resolves and type-checks a plan against the database, returning the
/// output scope. Mutates the plan: star expansion and slot assignment.
pub fn validate(plan: &mut LogicalPlan, db: &Database) -> Result<Scope, PlanError> {
    let scope = validate_inner(plan, db, false)?;
    Ok(scope)
}

fn validate_inner(
    plan: &mut LogicalPlan,
    db: &Database,
    under_aggregate: bool,
) -> Result<Scope, PlanError> {
    match plan {
        LogicalPlan::Scan { relation, alias } => {
            let schema = db.schema(relation)?;
            let bindings = schema
                .columns
                .iter()
                .map(|c| Binding::new(Some(alias), &c.name, c.ty, c.nullable))
                .collect();
            Ok(Scope::new(bindings))
        }
        LogicalPlan::Alias { input, alias } => {
            let inner = validate_inner(input, db, under_aggregate)?;
            let bindings = inner
                .bindings
                .into_iter()
                .map(|b| Binding {
                    alias: Some(alias.clone()),
                    ..b
                })
                .collect();
            Ok(Scope::new(bindings))
        }
        LogicalPlan::Filter { input, predicate } => {
            let scope = validate_inner(input, db, under_aggregate)?;
            let ty = scope.check_scalar(predicate, AggPolicy::Forbid)?;
            if !matches!(ty, ValType::Bool | ValType::Any) {
                return Err(PlanError::PredicateNotBool(ty));
            }
            Ok(scope)
        }
        LogicalPlan::Project { input, items, star } => {
            let scope = validate_inner(input, db, under_aggregate)?;
            if *star {
                let mut expanded = Vec::new();
                for b in &scope.bindings {
                    if expanded
                        .iter()
                        .any(|i: &ProjectItem| i.name == b.name)
                    {
                        return Err(PlanError::StarAmbiguous(b.name.clone()));
                    }
                    expanded.push(ProjectItem::new(
                        ScalarExpr::Column(ColumnRef::new(b.alias.as_deref(), &b.name)),
                        &b.name,
                    ));
                }
                *items = expanded;
                *star = false;
            }
            let mut out = Vec::new();
            for item in items.iter_mut() {
                let ty = scope.check_scalar(&mut item.expr, AggPolicy::Forbid)?;
                if out.iter().any(|b: &Binding| b.name == item.name) {
                    return Err(PlanError::DuplicateOutput(item.name.clone()));
                }
                let (alias, nullable) = match &item.expr {
                    ScalarExpr::Column(c) => {
                        let b = &scope.bindings[c.slot.unwrap()];
                        (b.alias.clone(), b.nullable)
                    }
                    _ => (None, true),
                };
                out.push(Binding {
                    alias,
                    name: item.name.clone(),
                    ty,
                    nullable,
                });
            }
            Ok(Scope::new(out))
        }
        LogicalPlan::Join {
            left,
            right,
            predicate,
            ..
        } => {
            let l = validate_inner(left, db, under_aggregate)?;
            let r = validate_inner(right, db, under_aggregate)?;
            if let Some(a) = scope_aliases(&l).intersection(&scope_aliases(&r)).next() {
                return Err(PlanError::DuplicateAlias(a.clone()));
            }
            let mut bindings = l.bindings;
            bindings.extend(r.bindings);
            let scope = Scope::new(bindings);
            let ty = scope.check_scalar(predicate, AggPolicy::Forbid)?;
            if !matches!(ty, ValType::Bool | ValType::Any) {
                return Err(PlanError::PredicateNotBool(ty));
            }
            Ok(scope)
        }
        LogicalPlan::Aggregate {
            input,
            group_by,
            aggs,
        } => {
            if under_aggregate {
                return Err(PlanError::NestedAggregate);
            }
            let scope = validate_inner(input, db, true)?;
            let mut out = Vec::new();
            for key in group_by.iter_mut() {
                let slot = scope.resolve(key)?;
                key.slot = Some(slot);
                let b = &scope.bindings[slot];
                if out.iter().any(|o: &Binding| o.name == b.name) {
                    return Err(PlanError::DuplicateOutput(b.name.clone()));
                }
                out.push(b.clone());
            }
            for agg in aggs.iter_mut() {
                let ty = agg.check(&scope)?;
                if out.iter().any(|o: &Binding| o.name == agg.alias) {
                    return Err(PlanError::DuplicateOutput(agg.alias.clone()));
                }
                out.push(Binding {
                    alias: None,
                    name: agg.alias.clone(),
                    ty,
                    nullable: true,
                });
            }
            Ok(Scope::new(out))
        }
        LogicalPlan::Distinct { input } => validate_inner(input, db, under_aggregate),
        LogicalPlan::Update {
            relation,
            alias,
            assignments,
            predicate,
        } => {
            let schema = db.schema(relation)?.clone();
            let bindings = schema
                .columns
                .iter()
                .map(|c| Binding::new(Some(alias), &c.name, c.ty, c.nullable))
                .collect();
            let scope = Scope::new(bindings);
            for (col, expr) in assignments.iter_mut() {
                let idx = schema
                    .column_index(col)
                    .ok_or_else(|| PlanError::UnknownAssignColumn(col.clone()))?;
                let want = schema.columns[idx].ty;
                let got = scope.check_scalar(expr, AggPolicy::Forbid)?;
                if ValType::unify(want, got).is_none() {
                    return Err(PlanError::AssignType {
                        column: col.clone(),
                        want,
                        got,
                    });
                }
                if matches!(expr, ScalarExpr::Literal(Value::Null)) && !schema.columns[idx].nullable
                {
                    return Err(PlanError::AssignNull(col.clone()));
                }
            }
            if let Some(p) = predicate {
                let ty = scope.check_scalar(p, AggPolicy::Forbid)?;
                if !matches!(ty, ValType::Bool | ValType::Any) {
                    return Err(PlanError::PredicateNotBool(ty));
                }
            }
            // Updates produce no result rows.
            Ok(Scope::new(vec![]))
        }
    }
}

fn scope_aliases(s: &Scope) -> BTreeSet<String> {
    s.bindings.iter().filter_map(|b| b.alias.clone()).collect()
}

/// Output scope of an already-validated plan (no mutation, no re-checking).
pub fn output_scope(plan: &LogicalPlan, db: &Database) -> Result<Scope, PlanError> {
    let mut clone = plan.clone();
    validate(&mut clone, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::CmpOp;
    use crate::schema::{relation_from_rows, Database};

    fn db() -> Database {
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "t",
                vec![("a", ValType::Int, false), ("b", ValType::Text, true)],
                vec![],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows("s", vec![("a", ValType::Int, false)], vec![])
                .unwrap(),
        )
        .unwrap();
        db
    }

    #[test]
    fn star_expansion_and_resolution() {
        let db = db();
        let mut plan = LogicalPlan::Project {
            input: Box::new(LogicalPlan::scan("t")),
            items: vec![],
            star: true,
        };
        let scope = validate(&mut plan, &db).unwrap();
        assert_eq!(scope.bindings.len(), 2);
        match &plan {
            LogicalPlan::Project { items, star, .. } => {
                assert!(!star);
                assert_eq!(items.len(), 2);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn ambiguous_bare_column_rejected() {
        let db = db();
        let mut plan = LogicalPlan::scan("t")
            .join(
                LogicalPlan::scan("s"),
                ScalarExpr::cmp(
                    CmpOp::Eq,
                    ScalarExpr::column(None, "a"),
                    ScalarExpr::column(Some("s"), "a"),
                ),
            );
        let err = validate(&mut plan, &db).unwrap_err();
        assert!(matches!(
            err,
            PlanError::Type(TypeError::AmbiguousColumn(_))
        ));
    }

    #[test]
    fn duplicate_from_alias_rejected() {
        let db = db();
        let mut plan = LogicalPlan::scan("t").join(
            LogicalPlan::scan("t"),
            ScalarExpr::Literal(Value::Bool(true)),
        );
        assert!(matches!(
            validate(&mut plan, &db),
            Err(PlanError::DuplicateAlias(_))
        ));
    }

    #[test]
    fn nested_aggregates_rejected() {
        let db = db();
        let inner = LogicalPlan::scan("t").aggregate(vec![ColumnRef::bare("a")], vec![]);
        let mut plan = inner.aggregate(vec![ColumnRef::bare("a")], vec![]);
        assert!(matches!(
            validate(&mut plan, &db),
            Err(PlanError::NestedAggregate)
        ));
    }

    #[test]
    fn referenced_relations_is_a_set() {
        let plan = LogicalPlan::scan("t").join(
            LogicalPlan::scan_as("t", "t2"),
            ScalarExpr::Literal(Value::Bool(true)),
        );
        let rels: Vec<String> = plan.referenced_relations().into_iter().collect();
        assert_eq!(rels, vec!["t".to_string()]);
        assert_eq!(plan.scan_count("t"), 2);
    }

    #[test]
    fn update_validates_against_target_schema() {
        let db = db();
        let mut plan = LogicalPlan::Update {
            relation: "t".into(),
            alias: "t".into(),
            assignments: vec![("b".into(), ScalarExpr::Literal(Value::text("x")))],
            predicate: Some(ScalarExpr::cmp(
                CmpOp::Eq,
                ScalarExpr::column(None, "a"),
                ScalarExpr::Literal(Value::Int(4)),
            )),
        };
        validate(&mut plan, &db).unwrap();

        let mut bad = LogicalPlan::Update {
            relation: "t".into(),
            alias: "t".into(),
            assignments: vec![("a".into(), ScalarExpr::Literal(Value::text("no")))],
            predicate: None,
        };
        assert!(matches!(
            validate(&mut bad, &db),
            Err(PlanError::AssignType { .. })
        ));
    }
}
