//! The policy language: parsing, normalization, validation, applicability.
//!
//! A policy names the statements it applies to (`POLICY OVER r1, r2` for
//! selects by referenced relation, `POLICY UPDATE r AS alias` for updates of
//! `r`), optional auxiliary `DIMENSION` relations, aggregate definitions over
//! contributing tuples, a boolean `CONSTRAINT`, and the intervention
//! (`ON FAIL KILL QUERY` or `KILL ROW`).
//!
//! Aggregate calls written directly inside the constraint are hoisted into
//! generated `AGG` entries by [`normalize_policy`]; everything downstream
//! (oracle and rewriter) consumes normalized policies.

use std::fmt;

use thiserror::Error;

use crate::expr::{
    contains_agg, AggExpr, AggPolicy, Binding, ColumnRef, ScalarExpr, Scope, TypeError,
};
use crate::plan::{QueryStatement, StatementKind};
use crate::schema::{Database, SchemaError};
use crate::sql::{ParseError, Parser, TokenKind};
use crate::value::ValType;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("policy `{0}`: constraint must be boolean, got {1}")]
    ConstraintNotBool(String, ValType),
    #[error("policy `{0}`: nested aggregate calls")]
    NestedAgg(String),
    #[error("policy `{0}`: UPDATE policies require exactly one DIMENSION naming the updated relation (the prior image)")]
    UpdateDimension(String),
    #[error("policy `{0}`: duplicate relation alias `{1}`")]
    DuplicateAlias(String, String),
    #[error("policy `{0}`: duplicate aggregate alias `{1}`")]
    DuplicateAggAlias(String, String),
    #[error("policy `{0}`: aggregate `{1}` mixes columns of more than one target relation")]
    AggMixesRelations(String, String),
    #[error("policy `{0}`: count(*) is ambiguous over multiple target relations")]
    CountStarAmbiguous(String),
    #[error("policy `{0}`: aggregate `{1}` references no target column; qualify it")]
    AggSourceUnknown(String, String),
    #[error("duplicate policy name `{0}`")]
    DuplicateName(String),
    #[error("policy `{0}` was not validated before use")]
    NotCompiled(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyTarget {
    /// Applies to selects referencing every listed relation.
    Over(Vec<String>),
    /// Applies to updates of the named relation; `new_alias` binds the
    /// updated image in the constraint.
    Update { relation: String, new_alias: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingMode {
    /// Tuples contributing to the row under evaluation.
    Provenance,
    /// Rows looked up in the database at evaluation time.
    Catalog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDimension {
    pub relation: String,
    pub alias: String,
    pub mode: BindingMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnFail {
    KillQuery,
    KillRow,
}

impl OnFail {
    pub fn action_name(&self) -> &'static str {
        match self {
            OnFail::KillQuery => "kill_query",
            OnFail::KillRow => "kill_row",
        }
    }
}

/// Where an aggregate draws its input rows from during oracle evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum AggSource {
    /// Contributor tuples of one target relation.
    Relation(String),
    /// The single (old image, new image) environment of an update candidate.
    UpdateCandidate,
}

/// Resolution artifacts produced by [`validate_policy`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPolicy {
    pub agg_scope: Scope,
    pub agg_sources: Vec<AggSource>,
    pub constraint_scope: Scope,
    /// Indices into `dimensions` of the catalog-bound ones.
    pub catalog_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub name: String,
    pub target: PolicyTarget,
    pub dimensions: Vec<PolicyDimension>,
    pub aggs: Vec<AggExpr>,
    pub constraint: ScalarExpr,
    pub on_fail: OnFail,
    pub compiled: Option<CompiledPolicy>,
}

impl Policy {
    pub fn compiled(&self) -> Result<&CompiledPolicy, PolicyError> {
        self.compiled
            .as_ref()
            .ok_or_else(|| PolicyError::NotCompiled(self.name.clone()))
    }

    pub fn target_relations(&self) -> Vec<&str> {
        match &self.target {
            PolicyTarget::Over(rels) => rels.iter().map(|s| s.as_str()).collect(),
            PolicyTarget::Update { relation, .. } => vec![relation.as_str()],
        }
    }

    pub fn references_current_user(&self) -> bool {
        self.constraint.references_current_user()
            || self.aggs.iter().any(|a| {
                a.arg
                    .as_ref()
                    .map(|e| e.references_current_user())
                    .unwrap_or(false)
            })
    }

    pub fn provenance_dims(&self) -> impl Iterator<Item = &PolicyDimension> {
        self.dimensions
            .iter()
            .filter(|d| d.mode == BindingMode::Provenance)
    }

    pub fn catalog_dims(&self) -> impl Iterator<Item = &PolicyDimension> {
        self.dimensions
            .iter()
            .filter(|d| d.mode == BindingMode::Catalog)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "policy {}: ", self.name)?;
        match &self.target {
            PolicyTarget::Over(rels) => write!(f, "over {}", rels.join(", "))?,
            PolicyTarget::Update {
                relation,
                new_alias,
            } => write!(f, "update {relation} as {new_alias}")?,
        }
        for d in &self.dimensions {
            let mode = match d.mode {
                BindingMode::Provenance => "provenance",
                BindingMode::Catalog => "catalog",
            };
            if d.alias == d.relation {
                write!(f, "; dimension {} [{mode}]", d.relation)?;
            } else {
                write!(f, "; dimension {} as {} [{mode}]", d.relation, d.alias)?;
            }
        }
        for a in &self.aggs {
            write!(f, "; agg {} as {}", a.render(), a.alias)?;
        }
        write!(f, "; constraint {}", self.constraint)?;
        write!(
            f,
            "; on fail {}",
            match self.on_fail {
                OnFail::KillQuery => "kill query",
                OnFail::KillRow => "kill row",
            }
        )
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn parse_one_policy(p: &mut Parser) -> Result<Policy, ParseError> {
    let name = if p.at_kw("name") {
        p.next_tok();
        p.expect_ident("policy name")?
    } else {
        String::new()
    };
    p.expect_kw("policy")?;

    let target = if p.eat_kw("over") {
        let mut rels = Vec::new();
        loop {
            rels.push(p.expect_ident("relation name")?);
            if !matches!(p.peek().kind, TokenKind::Comma) {
                break;
            }
            p.next_tok();
        }
        PolicyTarget::Over(rels)
    } else if p.eat_kw("update") {
        let relation = p.expect_ident("relation name")?;
        let new_alias = if p.eat_kw("as") {
            p.expect_ident("alias")?
        } else {
            relation.clone()
        };
        PolicyTarget::Update {
            relation,
            new_alias,
        }
    } else {
        return Err(ParseError::Syntax {
            line: p.peek().line,
            col: p.peek().col,
            msg: "expected OVER or UPDATE after POLICY".into(),
        });
    };

    let mut dimensions = Vec::new();
    if p.eat_kw("dimension") {
        loop {
            if matches!(p.peek().kind, TokenKind::LParen) {
                return Err(ParseError::Unsupported {
                    line: p.peek().line,
                    col: p.peek().col,
                    construct: "subquery dimension".into(),
                });
            }
            let relation = p.expect_ident("dimension relation")?;
            let alias = if p.eat_kw("as") {
                p.expect_ident("alias")?
            } else {
                relation.clone()
            };
            dimensions.push(PolicyDimension {
                relation,
                alias,
                mode: BindingMode::Catalog, // refined below
            });
            if !matches!(p.peek().kind, TokenKind::Comma) {
                break;
            }
            p.next_tok();
        }
    }

    let mut aggs = Vec::new();
    if p.eat_kw("agg") {
        loop {
            let mut agg = p.parse_agg_call()?;
            p.expect_kw("as")?;
            agg.alias = p.expect_ident("aggregate alias")?;
            aggs.push(agg);
            if !matches!(p.peek().kind, TokenKind::Comma) {
                break;
            }
            p.next_tok();
        }
    }

    p.expect_kw("constraint")?;
    let constraint = p.parse_expr()?;

    p.expect_kw("on")?;
    p.expect_kw("fail")?;
    p.expect_kw("kill")?;
    let on_fail = if p.eat_kw("query") {
        OnFail::KillQuery
    } else if p.eat_kw("row") {
        OnFail::KillRow
    } else {
        return Err(ParseError::Syntax {
            line: p.peek().line,
            col: p.peek().col,
            msg: "expected QUERY or ROW after KILL".into(),
        });
    };

    // Binding-mode inference: a dimension naming the update target (prior
    // image) or an OVER relation is provenance-bound; anything else is a
    // catalog lookup.
    for d in dimensions.iter_mut() {
        let provenance = match &target {
            PolicyTarget::Over(rels) => rels.contains(&d.relation),
            PolicyTarget::Update { relation, .. } => &d.relation == relation,
        };
        if provenance {
            d.mode = BindingMode::Provenance;
        }
    }

    Ok(Policy {
        name,
        target,
        dimensions,
        aggs,
        constraint,
        on_fail,
        compiled: None,
    })
}

/// Parses exactly one policy.
pub fn parse_policy(text: &str) -> Result<Policy, ParseError> {
    let mut p = Parser::new(text)?;
    let policy = parse_one_policy(&mut p)?;
    if !p.at_eof() {
        return Err(ParseError::Syntax {
            line: p.peek().line,
            col: p.peek().col,
            msg: "unexpected input after ON FAIL clause".into(),
        });
    }
    Ok(policy)
}

/// Parses a `.dfc` text: one or more policies, each optionally preceded by
/// `NAME <identifier>`. `--` comments and blank lines are free-form.
pub fn parse_policies(text: &str) -> Result<Vec<Policy>, ParseError> {
    let mut p = Parser::new(text)?;
    let mut out = Vec::new();
    while !p.at_eof() {
        out.push(parse_one_policy(&mut p)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Hoists aggregate calls out of the constraint into generated AGG entries
/// (`__agg0`, `__agg1`, ...). Structurally identical calls share one entry.
/// Idempotent; rejects nested aggregates.
pub fn normalize_policy(p: &Policy) -> Result<Policy, PolicyError> {
    let mut out = p.clone();
    if !contains_agg(&out.constraint) {
        return Ok(out);
    }
    // Nesting check must precede the bottom-up hoist, which would otherwise
    // dissolve the inner call first.
    let mut nested = false;
    for node in collect_agg_nodes(&out.constraint) {
        if node.arg.as_ref().map(contains_agg).unwrap_or(false) {
            nested = true;
        }
    }
    if nested {
        return Err(PolicyError::NestedAgg(out.name));
    }
    let mut aggs = out.aggs.clone();
    let constraint = out.constraint.clone().rewrite(&mut |node| match node {
        ScalarExpr::Agg(call) => {
            let existing = aggs
                .iter()
                .find(|a| a.func == call.func && a.arg == call.arg)
                .map(|a| a.alias.clone());
            let alias = match existing {
                Some(a) => a,
                None => {
                    let mut k = 0;
                    let alias = loop {
                        let candidate = format!("__agg{k}");
                        if !aggs.iter().any(|a| a.alias == candidate) {
                            break candidate;
                        }
                        k += 1;
                    };
                    aggs.push(AggExpr {
                        func: call.func,
                        arg: call.arg.clone(),
                        alias: alias.clone(),
                    });
                    alias
                }
            };
            ScalarExpr::Column(ColumnRef::bare(&alias))
        }
        other => other,
    });
    out.aggs = aggs;
    out.constraint = constraint;
    out.compiled = None;
    Ok(out)
}

fn collect_agg_nodes(e: &ScalarExpr) -> Vec<&AggExpr> {
    let mut out = Vec::new();
    fn walk<'a>(e: &'a ScalarExpr, out: &mut Vec<&'a AggExpr>) {
        if let ScalarExpr::Agg(a) = e {
            out.push(a);
            if let Some(arg) = &a.arg {
                walk(arg, out);
            }
            return;
        }
        match e {
            ScalarExpr::Compare { left, right, .. } | ScalarExpr::Arith { left, right, .. } => {
                walk(left, out);
                walk(right, out);
            }
            ScalarExpr::And(l, r) | ScalarExpr::Or(l, r) => {
                walk(l, out);
                walk(r, out);
            }
            ScalarExpr::Not(x) | ScalarExpr::Neg(x) => walk(x, out),
            ScalarExpr::IsNull { expr, .. } => walk(expr, out),
            ScalarExpr::Case { whens, otherwise } => {
                for (c, v) in whens {
                    walk(c, out);
                    walk(v, out);
                }
                if let Some(o) = otherwise {
                    walk(o, out);
                }
            }
            _ => {}
        }
    }
    walk(e, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Resolves and type-checks a normalized policy against a database schema,
/// filling in `compiled`.
pub fn validate_policy(p: &mut Policy, db: &Database) -> Result<(), PolicyError> {
    let name = p.name.clone();
    if contains_agg(&p.constraint) {
        // Callers normalize first; an embedded aggregate here means they
        // did not.
        return Err(PolicyError::Type(TypeError::AggNotAllowed));
    }

    // Relations exist, aliases unique.
    let mut seen_aliases: Vec<String> = Vec::new();
    match &p.target {
        PolicyTarget::Over(rels) => {
            for r in rels {
                db.schema(r)?;
                if seen_aliases.iter().any(|s| s == r) {
                    return Err(PolicyError::DuplicateAlias(name, r.clone()));
                }
                seen_aliases.push(r.clone());
            }
        }
        PolicyTarget::Update {
            relation,
            new_alias,
        } => {
            db.schema(relation)?;
            seen_aliases.push(new_alias.clone());
        }
    }
    for d in &p.dimensions {
        db.schema(&d.relation)?;
        if seen_aliases.iter().any(|s| s == &d.alias) {
            return Err(PolicyError::DuplicateAlias(name, d.alias.clone()));
        }
        seen_aliases.push(d.alias.clone());
    }

    // Re-derive binding modes (hand-built policies may not have run the
    // parser's inference).
    for d in p.dimensions.iter_mut() {
        let provenance = match &p.target {
            PolicyTarget::Over(rels) => rels.contains(&d.relation),
            PolicyTarget::Update { relation, .. } => &d.relation == relation,
        };
        d.mode = if provenance {
            BindingMode::Provenance
        } else {
            BindingMode::Catalog
        };
    }

    if let PolicyTarget::Update { .. } = &p.target {
        if p.provenance_dims().count() != 1 {
            return Err(PolicyError::UpdateDimension(name));
        }
    }

    // Aggregate scope: target relation columns plus provenance-dimension
    // columns.
    let mut agg_bindings: Vec<Binding> = Vec::new();
    match &p.target {
        PolicyTarget::Over(rels) => {
            for r in rels {
                let schema = db.schema(r)?;
                for c in &schema.columns {
                    agg_bindings.push(Binding::new(Some(r), &c.name, c.ty, c.nullable));
                }
            }
        }
        PolicyTarget::Update {
            relation,
            new_alias,
        } => {
            let schema = db.schema(relation)?;
            for c in &schema.columns {
                agg_bindings.push(Binding::new(Some(new_alias), &c.name, c.ty, c.nullable));
            }
        }
    }
    for d in p.dimensions.iter().filter(|d| d.mode == BindingMode::Provenance) {
        let schema = db.schema(&d.relation)?;
        for c in &schema.columns {
            agg_bindings.push(Binding::new(Some(&d.alias), &c.name, c.ty, c.nullable));
        }
    }
    let mut agg_scope = Scope::new(agg_bindings);
    agg_scope.singular_alias_fallback = true;

    // Check aggregates, resolve their sources, detect alias duplicates.
    let mut agg_tys = Vec::new();
    let mut agg_sources = Vec::new();
    for i in 0..p.aggs.len() {
        if p.aggs[..i].iter().any(|a| a.alias == p.aggs[i].alias) {
            return Err(PolicyError::DuplicateAggAlias(
                name.clone(),
                p.aggs[i].alias.clone(),
            ));
        }
        let ty = p.aggs[i].check(&agg_scope)?;
        agg_tys.push(ty);
        let source = match &p.target {
            PolicyTarget::Update { .. } => AggSource::UpdateCandidate,
            PolicyTarget::Over(rels) => {
                // Map referenced scope aliases back to base relations.
                let mut source_rels: Vec<String> = Vec::new();
                if let Some(arg) = &p.aggs[i].arg {
                    for c in arg.column_refs() {
                        let slot = match c.slot {
                            Some(s) => s,
                            None => continue,
                        };
                        let alias = agg_scope.bindings[slot].alias.clone().unwrap_or_default();
                        let rel = if rels.contains(&alias) {
                            alias
                        } else {
                            p.dimensions
                                .iter()
                                .find(|d| d.alias == alias)
                                .map(|d| d.relation.clone())
                                .unwrap_or(alias)
                        };
                        if !source_rels.contains(&rel) {
                            source_rels.push(rel);
                        }
                    }
                }
                match source_rels.len() {
                    0 => {
                        if rels.len() == 1 {
                            AggSource::Relation(rels[0].clone())
                        } else if p.aggs[i].arg.is_none() {
                            return Err(PolicyError::CountStarAmbiguous(name));
                        } else {
                            return Err(PolicyError::AggSourceUnknown(
                                name,
                                p.aggs[i].render(),
                            ));
                        }
                    }
                    1 => AggSource::Relation(source_rels.pop().unwrap()),
                    _ => {
                        return Err(PolicyError::AggMixesRelations(name, p.aggs[i].render()))
                    }
                }
            }
        };
        agg_sources.push(source);
    }

    // Constraint scope: aggregate aliases, catalog dimension columns, the
    // update's new image, plus the session's current_user function.
    let mut cbindings: Vec<Binding> = Vec::new();
    for (agg, ty) in p.aggs.iter().zip(&agg_tys) {
        cbindings.push(Binding::new(None, &agg.alias, *ty, true));
    }
    let catalog_dims: Vec<usize> = p
        .dimensions
        .iter()
        .enumerate()
        .filter(|(_, d)| d.mode == BindingMode::Catalog)
        .map(|(i, _)| i)
        .collect();
    for &i in &catalog_dims {
        let d = &p.dimensions[i];
        let schema = db.schema(&d.relation)?;
        for c in &schema.columns {
            cbindings.push(Binding::new(Some(&d.alias), &c.name, c.ty, c.nullable));
        }
    }
    if let PolicyTarget::Update {
        relation,
        new_alias,
    } = &p.target
    {
        let schema = db.schema(relation)?;
        for c in &schema.columns {
            cbindings.push(Binding::new(Some(new_alias), &c.name, c.ty, c.nullable));
        }
    }
    let mut constraint_scope = Scope::new(cbindings);
    constraint_scope.singular_alias_fallback = true;
    let cty = constraint_scope.check_scalar(&mut p.constraint, AggPolicy::Forbid)?;
    if cty != ValType::Bool {
        return Err(PolicyError::ConstraintNotBool(p.name.clone(), cty));
    }

    p.compiled = Some(CompiledPolicy {
        agg_scope,
        agg_sources,
        constraint_scope,
        catalog_dims,
    });
    Ok(())
}

/// Whether a policy governs a statement: OVER policies require a select
/// referencing every listed relation; UPDATE policies an update of the
/// target.
pub fn applicable(p: &Policy, q: &QueryStatement) -> bool {
    match (&p.target, q.kind()) {
        (PolicyTarget::Over(rels), StatementKind::Select) => {
            let referenced = q.plan.referenced_relations();
            rels.iter().all(|r| referenced.contains(r))
        }
        (PolicyTarget::Update { relation, .. }, StatementKind::Update) => match &q.plan {
            crate::plan::LogicalPlan::Update {
                relation: target, ..
            } => target == relation,
            _ => false,
        },
        _ => false,
    }
}

/// An ordered, name-unique collection of normalized, validated policies.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    policies: Vec<Policy>,
}

impl PolicySet {
    pub fn new() -> PolicySet {
        PolicySet::default()
    }

    /// Normalizes, names (if unnamed), and validates one policy.
    pub fn register(&mut self, policy: Policy, db: &Database) -> Result<(), PolicyError> {
        let mut p = normalize_policy(&policy)?;
        if p.name.is_empty() {
            p.name = format!("policy{}", self.policies.len() + 1);
        }
        if self.policies.iter().any(|q| q.name == p.name) {
            return Err(PolicyError::DuplicateName(p.name));
        }
        validate_policy(&mut p, db)?;
        self.policies.push(p);
        Ok(())
    }

    pub fn register_text(&mut self, text: &str, db: &Database) -> Result<usize, PolicyError> {
        let parsed = parse_policies(text)?;
        let n = parsed.len();
        for p in parsed {
            self.register(p, db)?;
        }
        Ok(n)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Policy> {
        self.policies.iter()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Policies governing `q`, in registration order.
    pub fn applicable_to<'a>(&'a self, q: &QueryStatement) -> Vec<&'a Policy> {
        self.policies.iter().filter(|p| applicable(p, q)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::AggFunc;
    use crate::schema::{relation_from_rows, Database};
    use crate::sql::parse_sql;

    const DISAGGREGATION: &str = "\
POLICY OVER students
AGG count(distinct ethnicity) as cnt
CONSTRAINT cnt = 1
ON FAIL KILL QUERY";

    const SANITIZED: &str = "\
POLICY OVER products
CONSTRAINT bool_and(sanitized)
ON FAIL KILL ROW";

    fn db() -> Database {
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "students",
                vec![
                    ("sid", ValType::Int, false),
                    ("ethnicity", ValType::Text, true),
                ],
                vec![],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "products",
                vec![
                    ("pid", ValType::Int, false),
                    ("sanitized", ValType::Bool, false),
                ],
                vec![],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "users",
                vec![
                    ("id", ValType::Int, false),
                    ("status", ValType::Text, false),
                ],
                vec![],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    #[test]
    fn disaggregation_listing_parses() {
        let p = parse_policy(DISAGGREGATION).unwrap();
        assert_eq!(p.target, PolicyTarget::Over(vec!["students".into()]));
        assert_eq!(p.aggs.len(), 1);
        assert_eq!(p.aggs[0].alias, "cnt");
        assert_eq!(p.aggs[0].func, AggFunc::CountDistinct);
        assert_eq!(p.on_fail, OnFail::KillQuery);
        assert_eq!(p.constraint.to_string(), "cnt = 1");
    }

    #[test]
    fn constraint_aggregates_are_hoisted() {
        let p = parse_policy(SANITIZED).unwrap();
        assert!(p.aggs.is_empty());
        let n = normalize_policy(&p).unwrap();
        assert_eq!(n.aggs.len(), 1);
        assert_eq!(n.aggs[0].alias, "__agg0");
        assert_eq!(n.aggs[0].func, AggFunc::BoolAnd);
        assert_eq!(n.constraint.to_string(), "__agg0");
        // Idempotent.
        let n2 = normalize_policy(&n).unwrap();
        assert_eq!(n2.aggs, n.aggs);
        assert_eq!(n2.constraint, n.constraint);
    }

    #[test]
    fn multiple_constraint_aggregates_hoist_separately() {
        let p = parse_policy(
            "POLICY OVER students CONSTRAINT sum(sid) > 10 and min(sid) = 0 ON FAIL KILL ROW",
        )
        .unwrap();
        let n = normalize_policy(&p).unwrap();
        assert_eq!(n.aggs.len(), 2);
        assert_eq!(n.constraint.to_string(), "__agg0 > 10 and __agg1 = 0");
    }

    #[test]
    fn non_boolean_constraint_rejected() {
        let p = parse_policy("POLICY OVER students CONSTRAINT 1 ON FAIL KILL ROW").unwrap();
        let mut n = normalize_policy(&p).unwrap();
        let err = validate_policy(&mut n, &db()).unwrap_err();
        assert!(matches!(err, PolicyError::ConstraintNotBool(..)), "{err}");
    }

    #[test]
    fn update_policy_requires_prior_image_dimension() {
        let text = "\
POLICY UPDATE users as newu
AGG bool_and(oldu.status = 'Created') as allc
CONSTRAINT newu.status = 'Verified' and allc
ON FAIL KILL ROW";
        let p = parse_policy(text).unwrap();
        let mut n = normalize_policy(&p).unwrap();
        assert!(matches!(
            validate_policy(&mut n, &db()),
            Err(PolicyError::UpdateDimension(_))
        ));

        let with_dim = "\
POLICY UPDATE users as newu
DIMENSION users as oldu
AGG bool_and(oldu.status = 'Created') as allc
CONSTRAINT newu.status = 'Verified' and allc
ON FAIL KILL ROW";
        let p2 = parse_policy(with_dim).unwrap();
        assert_eq!(p2.dimensions[0].mode, BindingMode::Provenance);
        let mut n2 = normalize_policy(&p2).unwrap();
        validate_policy(&mut n2, &db()).unwrap();
    }

    #[test]
    fn applicability_by_referenced_relations() {
        let db = db();
        let mut set = PolicySet::new();
        set.register(parse_policy(DISAGGREGATION).unwrap(), &db)
            .unwrap();
        let q1 = parse_sql("SELECT sid FROM students").unwrap();
        let q2 = parse_sql("SELECT pid FROM products").unwrap();
        let q3 = parse_sql("UPDATE students SET ethnicity = 'x'").unwrap();
        let p = set.iter().next().unwrap();
        assert!(applicable(p, &q1));
        assert!(!applicable(p, &q2));
        assert!(!applicable(p, &q3));
    }

    #[test]
    fn update_applicability() {
        let db = db();
        let text = "\
POLICY UPDATE users as newu
DIMENSION users as oldu
AGG bool_and(oldu.status = 'Created') as allc
CONSTRAINT newu.status = 'Verified' and allc
ON FAIL KILL ROW";
        let mut set = PolicySet::new();
        set.register(parse_policy(text).unwrap(), &db).unwrap();
        let p = set.iter().next().unwrap();
        let upd = parse_sql("UPDATE users SET status='Verified' WHERE id=4").unwrap();
        let sel = parse_sql("SELECT id FROM users").unwrap();
        assert!(applicable(p, &upd));
        assert!(!applicable(p, &sel));
    }

    #[test]
    fn adding_a_scan_preserves_applicability() {
        let db = db();
        let mut set = PolicySet::new();
        set.register(parse_policy(DISAGGREGATION).unwrap(), &db)
            .unwrap();
        let p = set.iter().next().unwrap();
        let narrow = parse_sql("SELECT sid FROM students").unwrap();
        let wide =
            parse_sql("SELECT students.sid FROM students JOIN users ON students.sid = users.id")
                .unwrap();
        assert!(applicable(p, &narrow));
        assert!(applicable(p, &wide));
    }

    #[test]
    fn auto_naming_and_duplicates() {
        let db = db();
        let mut set = PolicySet::new();
        set.register_text(
            "POLICY OVER students CONSTRAINT count(*) >= 1 ON FAIL KILL ROW\n\n\
             NAME guard POLICY OVER products CONSTRAINT bool_and(sanitized) ON FAIL KILL ROW",
            &db,
        )
        .unwrap();
        let names: Vec<&str> = set.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["policy1", "guard"]);
        let dup = parse_policy(
            "NAME guard POLICY OVER students CONSTRAINT count(*) >= 0 ON FAIL KILL ROW",
        )
        .unwrap();
        assert!(matches!(
            set.register(dup, &db),
            Err(PolicyError::DuplicateName(_))
        ));
    }

    #[test]
    fn singular_alias_fallback_resolves_user_against_users() {
        let db = db();
        let text = "\
POLICY OVER students
DIMENSION users
CONSTRAINT users.id = current_user and not (user.status = 'Banned' and count(distinct ethnicity) < 3)
ON FAIL KILL ROW";
        let mut set = PolicySet::new();
        set.register(parse_policy(text).unwrap(), &db).unwrap();
        let p = set.iter().next().unwrap();
        assert!(p.compiled.is_some());
        assert_eq!(p.catalog_dims().count(), 1);
        assert!(p.references_current_user());
    }
}
