//! Scalar and aggregate expressions shared by queries and policies.
//!
//! Expressions are validated (resolved and type-checked) against a [`Scope`]
//! before evaluation; evaluation itself cannot hit a type error. Column
//! references carry a resolved slot index into the scope's row layout after
//! validation, so per-row evaluation is lookup-free.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::value::{tv_and, tv_not, tv_or, ValType, Value, ValueError};

/// Session parameters supplied with a statement. `current_user` backs the
/// niladic `current_user` function.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Session {
    pub current_user: Option<Value>,
}

impl Session {
    pub fn with_user(v: Value) -> Session {
        Session {
            current_user: Some(v),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TypeError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("ambiguous column `{0}`")]
    AmbiguousColumn(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("aggregate call not allowed in this context")]
    AggNotAllowed,
    #[error("nested aggregate calls are not allowed")]
    NestedAgg,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("unresolved column reference `{0}` (expression was not validated)")]
    Unresolved(String),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("no current_user in session")]
    NoCurrentUser,
    #[error("policy `{policy}` violated")]
    PolicyKill { policy: String },
}

/// Reference to a column, optionally qualified by a relation alias.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnRef {
    pub alias: Option<String>,
    pub column: String,
    /// Slot into the owning node's input row, filled by validation.
    pub slot: Option<usize>,
}

impl ColumnRef {
    pub fn new(alias: Option<&str>, column: &str) -> ColumnRef {
        ColumnRef {
            alias: alias.map(|a| a.to_lowercase()),
            column: column.to_lowercase(),
            slot: None,
        }
    }

    pub fn bare(column: &str) -> ColumnRef {
        ColumnRef::new(None, column)
    }

    pub fn qualified(alias: &str, column: &str) -> ColumnRef {
        ColumnRef::new(Some(alias), column)
    }

    pub fn display_name(&self) -> String {
        match &self.alias {
            Some(a) => format!("{a}.{}", self.column),
            None => self.column.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Column(ColumnRef),
    Literal(Value),
    Compare {
        op: CmpOp,
        left: Box<ScalarExpr>,
        right: Box<ScalarExpr>,
    },
    And(Box<ScalarExpr>, Box<ScalarExpr>),
    Or(Box<ScalarExpr>, Box<ScalarExpr>),
    Not(Box<ScalarExpr>),
    Arith {
        op: ArithOp,
        left: Box<ScalarExpr>,
        right: Box<ScalarExpr>,
    },
    Neg(Box<ScalarExpr>),
    Case {
        whens: Vec<(ScalarExpr, ScalarExpr)>,
        otherwise: Option<Box<ScalarExpr>>,
    },
    IsNull {
        expr: Box<ScalarExpr>,
        negated: bool,
    },
    /// Niladic session-user function.
    CurrentUser,
    /// Error-raising guard function; evaluating it aborts the statement.
    Kill { policy: String },
    /// Aggregate call embedded in a policy constraint. Only legal before
    /// normalization hoists it into the policy's AGG list.
    Agg(Box<AggExpr>),
}

impl ScalarExpr {
    pub fn column(alias: Option<&str>, column: &str) -> ScalarExpr {
        ScalarExpr::Column(ColumnRef::new(alias, column))
    }

    pub fn literal(v: Value) -> ScalarExpr {
        ScalarExpr::Literal(v)
    }

    pub fn cmp(op: CmpOp, l: ScalarExpr, r: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Compare {
            op,
            left: Box::new(l),
            right: Box::new(r),
        }
    }

    pub fn and(l: ScalarExpr, r: ScalarExpr) -> ScalarExpr {
        ScalarExpr::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: ScalarExpr, r: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Or(Box::new(l), Box::new(r))
    }

    pub fn not(e: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Not(Box::new(e))
    }

    /// Splits a conjunction into its conjuncts (single expression otherwise).
    pub fn conjuncts(&self) -> Vec<&ScalarExpr> {
        match self {
            ScalarExpr::And(l, r) => {
                let mut out = l.conjuncts();
                out.extend(r.conjuncts());
                out
            }
            other => vec![other],
        }
    }

    /// Rebuilds a conjunction from conjuncts; `true` for an empty list.
    pub fn conjoin(mut exprs: Vec<ScalarExpr>) -> ScalarExpr {
        match exprs.len() {
            0 => ScalarExpr::Literal(Value::Bool(true)),
            1 => exprs.pop().unwrap(),
            _ => {
                let mut it = exprs.into_iter();
                let first = it.next().unwrap();
                it.fold(first, ScalarExpr::and)
            }
        }
    }

    pub fn references_current_user(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, ScalarExpr::CurrentUser) {
                found = true;
            }
        });
        found
    }

    /// All column references in the tree, in evaluation order.
    pub fn column_refs(&self) -> Vec<&ColumnRef> {
        fn walk<'a>(e: &'a ScalarExpr, out: &mut Vec<&'a ColumnRef>) {
            match e {
                ScalarExpr::Column(c) => out.push(c),
                ScalarExpr::Literal(_) | ScalarExpr::CurrentUser | ScalarExpr::Kill { .. } => {}
                ScalarExpr::Compare { left, right, .. }
                | ScalarExpr::Arith { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
                ScalarExpr::And(l, r) | ScalarExpr::Or(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                ScalarExpr::Not(e) | ScalarExpr::Neg(e) => walk(e, out),
                ScalarExpr::IsNull { expr, .. } => walk(expr, out),
                ScalarExpr::Case { whens, otherwise } => {
                    for (c, v) in whens {
                        walk(c, out);
                        walk(v, out);
                    }
                    if let Some(e) = otherwise {
                        walk(e, out);
                    }
                }
                ScalarExpr::Agg(a) => {
                    if let Some(arg) = &a.arg {
                        walk(arg, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    fn visit(&self, f: &mut impl FnMut(&ScalarExpr)) {
        f(self);
        match self {
            ScalarExpr::Compare { left, right, .. } | ScalarExpr::Arith { left, right, .. } => {
                left.visit(f);
                right.visit(f);
            }
            ScalarExpr::And(l, r) | ScalarExpr::Or(l, r) => {
                l.visit(f);
                r.visit(f);
            }
            ScalarExpr::Not(e) | ScalarExpr::Neg(e) => e.visit(f),
            ScalarExpr::IsNull { expr, .. } => expr.visit(f),
            ScalarExpr::Case { whens, otherwise } => {
                for (c, v) in whens {
                    c.visit(f);
                    v.visit(f);
                }
                if let Some(e) = otherwise {
                    e.visit(f);
                }
            }
            ScalarExpr::Agg(a) => {
                if let Some(arg) = &a.arg {
                    arg.visit(f);
                }
            }
            _ => {}
        }
    }

    /// Applies `f` to every node bottom-up, rebuilding the tree.
    pub fn rewrite(self, f: &mut impl FnMut(ScalarExpr) -> ScalarExpr) -> ScalarExpr {
        let rebuilt = match self {
            ScalarExpr::Compare { op, left, right } => ScalarExpr::Compare {
                op,
                left: Box::new(left.rewrite(f)),
                right: Box::new(right.rewrite(f)),
            },
            ScalarExpr::Arith { op, left, right } => ScalarExpr::Arith {
                op,
                left: Box::new(left.rewrite(f)),
                right: Box::new(right.rewrite(f)),
            },
            ScalarExpr::And(l, r) => {
                ScalarExpr::And(Box::new(l.rewrite(f)), Box::new(r.rewrite(f)))
            }
            ScalarExpr::Or(l, r) => ScalarExpr::Or(Box::new(l.rewrite(f)), Box::new(r.rewrite(f))),
            ScalarExpr::Not(e) => ScalarExpr::Not(Box::new(e.rewrite(f))),
            ScalarExpr::Neg(e) => ScalarExpr::Neg(Box::new(e.rewrite(f))),
            ScalarExpr::IsNull { expr, negated } => ScalarExpr::IsNull {
                expr: Box::new(expr.rewrite(f)),
                negated,
            },
            ScalarExpr::Case { whens, otherwise } => ScalarExpr::Case {
                whens: whens
                    .into_iter()
                    .map(|(c, v)| (c.rewrite(f), v.rewrite(f)))
                    .collect(),
                otherwise: otherwise.map(|e| Box::new(e.rewrite(f))),
            },
            ScalarExpr::Agg(a) => {
                let AggExpr {
                    func,
                    arg,
                    alias,
                } = *a;
                ScalarExpr::Agg(Box::new(AggExpr {
                    func,
                    arg: arg.map(|e| e.rewrite(f)),
                    alias,
                }))
            }
            leaf => leaf,
        };
        f(rebuilt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Count,
    CountDistinct,
    Sum,
    Avg,
    Min,
    Max,
    BoolAnd,
    BoolOr,
}

impl AggFunc {
    pub fn parse(name: &str, distinct: bool) -> Option<AggFunc> {
        match (name.to_ascii_lowercase().as_str(), distinct) {
            ("count", false) => Some(AggFunc::Count),
            ("count", true) => Some(AggFunc::CountDistinct),
            ("sum", false) => Some(AggFunc::Sum),
            ("avg", false) => Some(AggFunc::Avg),
            ("min", false) => Some(AggFunc::Min),
            ("max", false) => Some(AggFunc::Max),
            ("bool_and", false) => Some(AggFunc::BoolAnd),
            ("bool_or", false) => Some(AggFunc::BoolOr),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggFunc::Count | AggFunc::CountDistinct => "count",
            AggFunc::Sum => "sum",
            AggFunc::Avg => "avg",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
            AggFunc::BoolAnd => "bool_and",
            AggFunc::BoolOr => "bool_or",
        }
    }

    pub fn is_distinct(&self) -> bool {
        matches!(self, AggFunc::CountDistinct)
    }

    pub fn result_type(&self, arg: Option<ValType>) -> ValType {
        match self {
            AggFunc::Count | AggFunc::CountDistinct => ValType::Int,
            AggFunc::Avg => ValType::Decimal,
            AggFunc::Sum | AggFunc::Min | AggFunc::Max => arg.unwrap_or(ValType::Any),
            AggFunc::BoolAnd | AggFunc::BoolOr => ValType::Bool,
        }
    }
}

/// One aggregate computation: function, argument (None is `count(*)`), and
/// the output alias it binds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggExpr {
    pub func: AggFunc,
    pub arg: Option<ScalarExpr>,
    pub alias: String,
}

impl AggExpr {
    pub fn new(func: AggFunc, arg: Option<ScalarExpr>, alias: &str) -> AggExpr {
        AggExpr {
            func,
            arg,
            alias: alias.to_lowercase(),
        }
    }

    /// Validates the argument against `scope` and returns the result type.
    pub fn check(&mut self, scope: &Scope) -> Result<ValType, TypeError> {
        let arg_ty = match &mut self.arg {
            None => {
                if !matches!(self.func, AggFunc::Count) {
                    return Err(TypeError::Mismatch(format!(
                        "{}(*) is not defined; only count(*)",
                        self.func.name()
                    )));
                }
                None
            }
            Some(arg) => {
                if contains_agg(arg) {
                    return Err(TypeError::NestedAgg);
                }
                Some(scope.check_scalar(arg, AggPolicy::Forbid)?)
            }
        };
        match (self.func, arg_ty) {
            (AggFunc::Sum | AggFunc::Avg, Some(t)) if !t.is_numeric() => Err(TypeError::Mismatch(
                format!("{} requires a numeric argument, got {t}", self.func.name()),
            )),
            (AggFunc::BoolAnd | AggFunc::BoolOr, Some(t))
                if !matches!(t, ValType::Bool | ValType::Any) =>
            {
                Err(TypeError::Mismatch(format!(
                    "{} requires a boolean argument, got {t}",
                    self.func.name()
                )))
            }
            _ => Ok(self.func.result_type(arg_ty)),
        }
    }

    pub fn render(&self) -> String {
        let arg = match &self.arg {
            None => "*".to_string(),
            Some(e) => render_expr(e),
        };
        if self.func.is_distinct() {
            format!("count(distinct {arg})")
        } else {
            format!("{}({arg})", self.func.name())
        }
    }
}

pub fn contains_agg(e: &ScalarExpr) -> bool {
    let mut found = false;
    e.visit(&mut |n| {
        if matches!(n, ScalarExpr::Agg(_)) {
            found = true;
        }
    });
    found
}

/// Whether aggregate calls are legal while checking an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggPolicy {
    Forbid,
    /// Policy constraints before normalization.
    Allow,
}

/// One name visible to expressions: an optional relation alias, the column
/// (or output) name, and its type.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub alias: Option<String>,
    pub name: String,
    pub ty: ValType,
    pub nullable: bool,
}

impl Binding {
    pub fn new(alias: Option<&str>, name: &str, ty: ValType, nullable: bool) -> Binding {
        Binding {
            alias: alias.map(|a| a.to_lowercase()),
            name: name.to_lowercase(),
            ty,
            nullable,
        }
    }
}

/// An ordered row layout for name resolution. Slot i of a resolved
/// expression reads value i of the row being evaluated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scope {
    pub bindings: Vec<Binding>,
    /// Resolve alias `x` against a binding aliased `xs` when nothing matches
    /// exactly. Enabled only for policy scopes.
    pub singular_alias_fallback: bool,
}

impl Scope {
    pub fn new(bindings: Vec<Binding>) -> Scope {
        Scope {
            bindings,
            singular_alias_fallback: false,
        }
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    pub fn resolve(&self, col: &ColumnRef) -> Result<usize, TypeError> {
        let matches: Vec<usize> = match &col.alias {
            Some(a) => {
                let exact: Vec<usize> = self
                    .bindings
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.alias.as_deref() == Some(a.as_str()) && b.name == col.column)
                    .map(|(i, _)| i)
                    .collect();
                if exact.is_empty() && self.singular_alias_fallback {
                    let plural = format!("{a}s");
                    self.bindings
                        .iter()
                        .enumerate()
                        .filter(|(_, b)| {
                            b.alias.as_deref() == Some(plural.as_str()) && b.name == col.column
                        })
                        .map(|(i, _)| i)
                        .collect()
                } else {
                    exact
                }
            }
            None => {
                // Computed outputs (aggregate aliases, projected
                // expressions) shadow relation columns for bare names.
                let unaliased: Vec<usize> = self
                    .bindings
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.alias.is_none() && b.name == col.column)
                    .map(|(i, _)| i)
                    .collect();
                if !unaliased.is_empty() {
                    unaliased
                } else {
                    self.bindings
                        .iter()
                        .enumerate()
                        .filter(|(_, b)| b.name == col.column)
                        .map(|(i, _)| i)
                        .collect()
                }
            }
        };
        match matches.len() {
            0 => Err(TypeError::UnknownColumn(col.display_name())),
            1 => Ok(matches[0]),
            _ => Err(TypeError::AmbiguousColumn(col.display_name())),
        }
    }

    /// Resolves and type-checks an expression in place.
    pub fn check_scalar(
        &self,
        expr: &mut ScalarExpr,
        aggs: AggPolicy,
    ) -> Result<ValType, TypeError> {
        match expr {
            ScalarExpr::Column(c) => {
                let slot = self.resolve(c)?;
                c.slot = Some(slot);
                Ok(self.bindings[slot].ty)
            }
            ScalarExpr::Literal(v) => Ok(v.ty().unwrap_or(ValType::Any)),
            ScalarExpr::Compare { op, left, right } => {
                let lt = self.check_scalar(left, aggs)?;
                let rt = self.check_scalar(right, aggs)?;
                let joined = ValType::unify(lt, rt).ok_or_else(|| {
                    TypeError::Mismatch(format!("cannot compare {lt} with {rt}"))
                })?;
                if matches!(op, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
                    && matches!(joined, ValType::Bool)
                {
                    return Err(TypeError::Mismatch(
                        "ordered comparison on booleans".to_string(),
                    ));
                }
                Ok(ValType::Bool)
            }
            ScalarExpr::And(l, r) | ScalarExpr::Or(l, r) => {
                for side in [l, r] {
                    let t = self.check_scalar(side, aggs)?;
                    if !matches!(t, ValType::Bool | ValType::Any) {
                        return Err(TypeError::Mismatch(format!(
                            "boolean connective over {t}"
                        )));
                    }
                }
                Ok(ValType::Bool)
            }
            ScalarExpr::Not(e) => {
                let t = self.check_scalar(e, aggs)?;
                if !matches!(t, ValType::Bool | ValType::Any) {
                    return Err(TypeError::Mismatch(format!("not over {t}")));
                }
                Ok(ValType::Bool)
            }
            ScalarExpr::Arith { op, left, right } => {
                let lt = self.check_scalar(left, aggs)?;
                let rt = self.check_scalar(right, aggs)?;
                if !lt.is_numeric() || !rt.is_numeric() {
                    return Err(TypeError::Mismatch(format!(
                        "arithmetic {} over {lt} and {rt}",
                        op.symbol()
                    )));
                }
                ValType::unify(lt, rt)
                    .ok_or_else(|| TypeError::Mismatch("incompatible numeric types".into()))
            }
            ScalarExpr::Neg(e) => {
                let t = self.check_scalar(e, aggs)?;
                if !t.is_numeric() {
                    return Err(TypeError::Mismatch(format!("negation of {t}")));
                }
                Ok(t)
            }
            ScalarExpr::Case { whens, otherwise } => {
                let mut out = ValType::Any;
                for (cond, val) in whens.iter_mut() {
                    let ct = self.check_scalar(cond, aggs)?;
                    if !matches!(ct, ValType::Bool | ValType::Any) {
                        return Err(TypeError::Mismatch(format!("case condition of type {ct}")));
                    }
                    let vt = self.check_scalar(val, aggs)?;
                    out = ValType::unify(out, vt).ok_or_else(|| {
                        TypeError::Mismatch("case arms have incompatible types".into())
                    })?;
                }
                if let Some(e) = otherwise {
                    let vt = self.check_scalar(e, aggs)?;
                    out = ValType::unify(out, vt).ok_or_else(|| {
                        TypeError::Mismatch("case arms have incompatible types".into())
                    })?;
                }
                Ok(out)
            }
            ScalarExpr::IsNull { expr, .. } => {
                self.check_scalar(expr, aggs)?;
                Ok(ValType::Bool)
            }
            ScalarExpr::CurrentUser => Ok(ValType::Any),
            ScalarExpr::Kill { .. } => Ok(ValType::Any),
            ScalarExpr::Agg(agg) => match aggs {
                AggPolicy::Forbid => Err(TypeError::AggNotAllowed),
                AggPolicy::Allow => {
                    if let Some(arg) = &agg.arg {
                        if contains_agg(arg) {
                            return Err(TypeError::NestedAgg);
                        }
                    }
                    agg.check(self)
                }
            },
        }
    }
}

/// Per-statement evaluation context: session values plus soft diagnostics.
#[derive(Debug)]
pub struct EvalCtx<'a> {
    pub session: &'a Session,
    /// Set when a division by zero produced a null.
    pub div_by_zero: Cell<bool>,
}

impl<'a> EvalCtx<'a> {
    pub fn new(session: &'a Session) -> EvalCtx<'a> {
        EvalCtx {
            session,
            div_by_zero: Cell::new(false),
        }
    }
}

/// Evaluates a resolved expression over one row.
pub fn eval(expr: &ScalarExpr, row: &[Value], ctx: &EvalCtx) -> Result<Value, EvalError> {
    match expr {
        ScalarExpr::Column(c) => {
            let slot = c
                .slot
                .ok_or_else(|| EvalError::Unresolved(c.display_name()))?;
            Ok(row[slot].clone())
        }
        ScalarExpr::Literal(v) => Ok(v.clone()),
        ScalarExpr::Compare { op, left, right } => {
            let l = eval(left, row, ctx)?;
            let r = eval(right, row, ctx)?;
            match l.compare(&r)? {
                None => Ok(Value::Null),
                Some(ord) => {
                    let b = match op {
                        CmpOp::Eq => ord.is_eq(),
                        CmpOp::Ne => !ord.is_eq(),
                        CmpOp::Lt => ord.is_lt(),
                        CmpOp::Le => ord.is_le(),
                        CmpOp::Gt => ord.is_gt(),
                        CmpOp::Ge => ord.is_ge(),
                    };
                    Ok(Value::Bool(b))
                }
            }
        }
        ScalarExpr::And(l, r) => {
            let lv = eval(l, row, ctx)?;
            if lv == Value::Bool(false) {
                return Ok(Value::Bool(false));
            }
            let rv = eval(r, row, ctx)?;
            Ok(tv_and(&lv, &rv))
        }
        ScalarExpr::Or(l, r) => {
            let lv = eval(l, row, ctx)?;
            if lv == Value::Bool(true) {
                return Ok(Value::Bool(true));
            }
            let rv = eval(r, row, ctx)?;
            Ok(tv_or(&lv, &rv))
        }
        ScalarExpr::Not(e) => Ok(tv_not(&eval(e, row, ctx)?)),
        ScalarExpr::Arith { op, left, right } => {
            let l = eval(left, row, ctx)?;
            let r = eval(right, row, ctx)?;
            eval_arith(*op, &l, &r, ctx)
        }
        ScalarExpr::Neg(e) => match eval(e, row, ctx)? {
            Value::Null => Ok(Value::Null),
            Value::Int(i) => i
                .checked_neg()
                .map(Value::Int)
                .ok_or(EvalError::Value(ValueError::Overflow("negation"))),
            Value::Decimal(d) => Ok(Value::Decimal(-d)),
            v => Err(EvalError::Value(ValueError::NonNumeric(
                v.ty().unwrap_or(ValType::Any),
                ValType::Any,
            ))),
        },
        ScalarExpr::Case { whens, otherwise } => {
            for (cond, val) in whens {
                if eval(cond, row, ctx)? == Value::Bool(true) {
                    return eval(val, row, ctx);
                }
            }
            match otherwise {
                Some(e) => eval(e, row, ctx),
                None => Ok(Value::Null),
            }
        }
        ScalarExpr::IsNull { expr, negated } => {
            let v = eval(expr, row, ctx)?;
            Ok(Value::Bool(v.is_null() != *negated))
        }
        ScalarExpr::CurrentUser => ctx
            .session
            .current_user
            .clone()
            .ok_or(EvalError::NoCurrentUser),
        ScalarExpr::Kill { policy } => Err(EvalError::PolicyKill {
            policy: policy.clone(),
        }),
        ScalarExpr::Agg(a) => Err(EvalError::Unresolved(format!(
            "aggregate {} outside an aggregation context",
            a.render()
        ))),
    }
}

fn eval_arith(op: ArithOp, l: &Value, r: &Value, ctx: &EvalCtx) -> Result<Value, EvalError> {
    if l.is_null() || r.is_null() {
        return Ok(Value::Null);
    }
    match (l, r) {
        (Value::Int(a), Value::Int(b)) => match op {
            ArithOp::Add => a
                .checked_add(*b)
                .map(Value::Int)
                .ok_or(EvalError::Value(ValueError::Overflow("addition"))),
            ArithOp::Sub => a
                .checked_sub(*b)
                .map(Value::Int)
                .ok_or(EvalError::Value(ValueError::Overflow("subtraction"))),
            ArithOp::Mul => a
                .checked_mul(*b)
                .map(Value::Int)
                .ok_or(EvalError::Value(ValueError::Overflow("multiplication"))),
            ArithOp::Div => {
                if *b == 0 {
                    ctx.div_by_zero.set(true);
                    Ok(Value::Null)
                } else {
                    a.checked_div(*b)
                        .map(Value::Int)
                        .ok_or(EvalError::Value(ValueError::Overflow("division")))
                }
            }
        },
        _ => {
            let (a, b) = match (l.as_f64(), r.as_f64()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(EvalError::Value(ValueError::NonNumeric(
                        l.ty().unwrap_or(ValType::Any),
                        r.ty().unwrap_or(ValType::Any),
                    )))
                }
            };
            match op {
                ArithOp::Add => Ok(Value::Decimal(a + b)),
                ArithOp::Sub => Ok(Value::Decimal(a - b)),
                ArithOp::Mul => Ok(Value::Decimal(a * b)),
                ArithOp::Div => {
                    if b == 0.0 {
                        ctx.div_by_zero.set(true);
                        Ok(Value::Null)
                    } else {
                        Ok(Value::Decimal(a / b))
                    }
                }
            }
        }
    }
}

/// Incremental aggregate accumulator.
pub enum AggAcc {
    Count { rows: bool, n: i64 },
    CountDistinct(HashSet<Value>),
    Sum(Option<Value>),
    Avg { sum: f64, n: i64 },
    MinMax { max: bool, cur: Option<Value> },
    Bool { and: bool, acc: Value },
}

impl AggAcc {
    pub fn new(func: AggFunc, counts_rows: bool) -> AggAcc {
        match func {
            AggFunc::Count => AggAcc::Count {
                rows: counts_rows,
                n: 0,
            },
            AggFunc::CountDistinct => AggAcc::CountDistinct(HashSet::new()),
            AggFunc::Sum => AggAcc::Sum(None),
            AggFunc::Avg => AggAcc::Avg { sum: 0.0, n: 0 },
            AggFunc::Min => AggAcc::MinMax {
                max: false,
                cur: None,
            },
            AggFunc::Max => AggAcc::MinMax {
                max: true,
                cur: None,
            },
            AggFunc::BoolAnd => AggAcc::Bool {
                and: true,
                acc: Value::Bool(true),
            },
            AggFunc::BoolOr => AggAcc::Bool {
                and: false,
                acc: Value::Bool(false),
            },
        }
    }

    pub fn update(&mut self, v: Value) -> Result<(), EvalError> {
        match self {
            AggAcc::Count { rows, n } => {
                if *rows || !v.is_null() {
                    *n += 1;
                }
            }
            AggAcc::CountDistinct(set) => {
                if !v.is_null() {
                    set.insert(v);
                }
            }
            AggAcc::Sum(cur) => {
                if !v.is_null() {
                    let next = match cur.take() {
                        None => v,
                        Some(acc) => match (&acc, &v) {
                            (Value::Int(a), Value::Int(b)) => Value::Int(
                                a.checked_add(*b)
                                    .ok_or(EvalError::Value(ValueError::Overflow("sum")))?,
                            ),
                            _ => Value::Decimal(
                                acc.as_f64().unwrap_or(0.0) + v.as_f64().unwrap_or(0.0),
                            ),
                        },
                    };
                    *cur = Some(next);
                }
            }
            AggAcc::Avg { sum, n } => {
                if let Some(x) = v.as_f64() {
                    *sum += x;
                    *n += 1;
                }
            }
            AggAcc::MinMax { max, cur } => {
                if !v.is_null() {
                    let replace = match cur.as_ref() {
                        None => true,
                        Some(c) => {
                            let ord = v.compare(c)?;
                            match ord {
                                Some(o) => {
                                    if *max {
                                        o.is_gt()
                                    } else {
                                        o.is_lt()
                                    }
                                }
                                None => false,
                            }
                        }
                    };
                    if replace {
                        *cur = Some(v);
                    }
                }
            }
            // bool_and/bool_or fold nulls three-valued: an unknown input
            // leaves the aggregate unknown unless absorbed, so a policy
            // constraint over it fails closed.
            AggAcc::Bool { and, acc } => {
                *acc = if *and { tv_and(acc, &v) } else { tv_or(acc, &v) };
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Value {
        match self {
            AggAcc::Count { n, .. } => Value::Int(n),
            AggAcc::CountDistinct(set) => Value::Int(set.len() as i64),
            AggAcc::Sum(cur) => cur.unwrap_or(Value::Null),
            AggAcc::Avg { sum, n } => {
                if n == 0 {
                    Value::Null
                } else {
                    Value::Decimal(sum / n as f64)
                }
            }
            AggAcc::MinMax { cur, .. } => cur.unwrap_or(Value::Null),
            AggAcc::Bool { acc, .. } => acc,
        }
    }
}

/// A self-contained binding environment for standalone expression
/// evaluation (tests, policy evaluation). Keys are `alias.column` or bare
/// column names.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub scope: Scope,
    pub values: Vec<Value>,
    pub session: Session,
}

impl Env {
    pub fn from_pairs(pairs: Vec<(&str, Value)>, session: Session) -> Env {
        let mut bindings = Vec::new();
        let mut values = Vec::new();
        for (key, v) in pairs {
            let (alias, name) = match key.split_once('.') {
                Some((a, n)) => (Some(a), n),
                None => (None, key),
            };
            let ty = v.ty().unwrap_or(ValType::Any);
            bindings.push(Binding::new(alias, name, ty, true));
            values.push(v);
        }
        Env {
            scope: Scope::new(bindings),
            values,
            session,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExprError {
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Validates and evaluates a scalar expression against an environment.
pub fn eval_scalar(expr: &ScalarExpr, env: &Env) -> Result<Value, ExprError> {
    let mut e = expr.clone();
    env.scope.check_scalar(&mut e, AggPolicy::Forbid)?;
    let ctx = EvalCtx::new(&env.session);
    Ok(eval(&e, &env.values, &ctx)?)
}

/// Validates and evaluates an aggregate over a group of environments. All
/// environments must share the first one's layout.
pub fn eval_agg(agg: &AggExpr, group: &[Env]) -> Result<Value, ExprError> {
    let mut a = agg.clone();
    let scope = group.first().map(|e| &e.scope);
    if let Some(scope) = scope {
        a.check(scope)?;
    }
    let session = Session::default();
    let ctx = EvalCtx::new(&session);
    let mut acc = AggAcc::new(a.func, a.arg.is_none());
    for env in group {
        let v = match &a.arg {
            None => Value::Bool(true), // count(*): every row counts
            Some(arg) => eval(arg, &env.values, &ctx)?,
        };
        acc.update(v)?;
    }
    Ok(acc.finish())
}

/// Renders an expression as canonical SQL text.
pub fn render_expr(e: &ScalarExpr) -> String {
    render_prec(e, 0)
}

// Precedence levels: 1 or, 2 and, 3 not, 4 comparison, 5 additive,
// 6 multiplicative, 7 unary/primary.
fn render_prec(e: &ScalarExpr, parent: u8) -> String {
    let (s, prec) = match e {
        ScalarExpr::Column(c) => (c.display_name(), 7),
        ScalarExpr::Literal(v) => (v.render(), 7),
        ScalarExpr::CurrentUser => ("current_user".to_string(), 7),
        ScalarExpr::Kill { policy } => (format!("kill('{policy}')"), 7),
        ScalarExpr::Compare { op, left, right } => (
            format!(
                "{} {} {}",
                render_prec(left, 5),
                op.symbol(),
                render_prec(right, 5)
            ),
            4,
        ),
        ScalarExpr::And(l, r) => (
            format!("{} and {}", render_prec(l, 3), render_prec(r, 2)),
            2,
        ),
        ScalarExpr::Or(l, r) => (
            format!("{} or {}", render_prec(l, 2), render_prec(r, 1)),
            1,
        ),
        ScalarExpr::Not(x) => (format!("not {}", render_prec(x, 4)), 3),
        ScalarExpr::Arith { op, left, right } => match op {
            ArithOp::Add | ArithOp::Sub => (
                format!(
                    "{} {} {}",
                    render_prec(left, 5),
                    op.symbol(),
                    render_prec(right, 6)
                ),
                5,
            ),
            ArithOp::Mul | ArithOp::Div => (
                format!(
                    "{} {} {}",
                    render_prec(left, 6),
                    op.symbol(),
                    render_prec(right, 7)
                ),
                6,
            ),
        },
        ScalarExpr::Neg(x) => (format!("-{}", render_prec(x, 7)), 7),
        ScalarExpr::Case { whens, otherwise } => {
            let mut s = String::from("case");
            for (c, v) in whens {
                s.push_str(&format!(
                    " when {} then {}",
                    render_prec(c, 0),
                    render_prec(v, 0)
                ));
            }
            if let Some(o) = otherwise {
                s.push_str(&format!(" else {}", render_prec(o, 0)));
            }
            s.push_str(" end");
            (s, 7)
        }
        ScalarExpr::IsNull { expr, negated } => (
            format!(
                "{} is {}null",
                render_prec(expr, 7),
                if *negated { "not " } else { "" }
            ),
            4,
        ),
        ScalarExpr::Agg(a) => (a.render(), 7),
    };
    if prec < parent {
        format!("({s})")
    } else {
        s
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_expr(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit_i(i: i64) -> ScalarExpr {
        ScalarExpr::Literal(Value::Int(i))
    }

    #[test]
    fn identity_comparison_over_empty_env() {
        let env = Env::from_pairs(vec![], Session::default());
        let e = ScalarExpr::cmp(CmpOp::Eq, lit_i(1), lit_i(1));
        assert_eq!(eval_scalar(&e, &env).unwrap(), Value::Bool(true));
    }

    #[test]
    fn current_user_equality() {
        let env = Env::from_pairs(
            vec![("users.id", Value::Int(7))],
            Session::with_user(Value::Int(7)),
        );
        let e = ScalarExpr::cmp(
            CmpOp::Eq,
            ScalarExpr::column(Some("users"), "id"),
            ScalarExpr::CurrentUser,
        );
        assert_eq!(eval_scalar(&e, &env).unwrap(), Value::Bool(true));
    }

    #[test]
    fn case_without_else_yields_null_or_arm() {
        // case when not cnt = 1 then 'KILL' end
        let e = ScalarExpr::Case {
            whens: vec![(
                ScalarExpr::not(ScalarExpr::cmp(
                    CmpOp::Eq,
                    ScalarExpr::column(None, "cnt"),
                    lit_i(1),
                )),
                ScalarExpr::Literal(Value::text("KILL")),
            )],
            otherwise: None,
        };
        let env = Env::from_pairs(vec![("cnt", Value::Int(2))], Session::default());
        assert_eq!(eval_scalar(&e, &env).unwrap(), Value::text("KILL"));
        let env1 = Env::from_pairs(vec![("cnt", Value::Int(1))], Session::default());
        assert_eq!(eval_scalar(&e, &env1).unwrap(), Value::Null);
    }

    #[test]
    fn division_by_zero_is_null_with_diagnostic() {
        let e = ScalarExpr::Arith {
            op: ArithOp::Div,
            left: Box::new(lit_i(1)),
            right: Box::new(lit_i(0)),
        };
        let session = Session::default();
        let ctx = EvalCtx::new(&session);
        assert_eq!(eval(&e, &[], &ctx).unwrap(), Value::Null);
        assert!(ctx.div_by_zero.get());
    }

    #[test]
    fn unbound_column_is_an_error() {
        let env = Env::from_pairs(vec![], Session::default());
        let e = ScalarExpr::column(None, "ghost");
        assert!(matches!(
            eval_scalar(&e, &env),
            Err(ExprError::Type(TypeError::UnknownColumn(_)))
        ));
    }

    fn envs(vals: Vec<Value>) -> Vec<Env> {
        vals.into_iter()
            .map(|v| Env::from_pairs(vec![("x", v)], Session::default()))
            .collect()
    }

    #[test]
    fn count_distinct_collapses_duplicates() {
        let agg = AggExpr::new(
            AggFunc::CountDistinct,
            Some(ScalarExpr::column(None, "x")),
            "cnt",
        );
        let g = envs(vec![Value::text("A"), Value::text("A")]);
        assert_eq!(eval_agg(&agg, &g).unwrap(), Value::Int(1));
        let g2 = envs(vec![Value::text("A"), Value::text("B")]);
        assert_eq!(eval_agg(&agg, &g2).unwrap(), Value::Int(2));
        let g3 = envs(vec![Value::text("A"), Value::Null]);
        assert_eq!(eval_agg(&agg, &g3).unwrap(), Value::Int(1));
    }

    #[test]
    fn bool_and_over_mixed_group_is_false() {
        let agg = AggExpr::new(AggFunc::BoolAnd, Some(ScalarExpr::column(None, "x")), "a");
        let g = envs(vec![Value::Bool(true), Value::Bool(false)]);
        assert_eq!(eval_agg(&agg, &g).unwrap(), Value::Bool(false));
    }

    #[test]
    fn bool_and_treats_null_as_unknown() {
        let agg = AggExpr::new(AggFunc::BoolAnd, Some(ScalarExpr::column(None, "x")), "a");
        let g = envs(vec![Value::Bool(true), Value::Null]);
        assert_eq!(eval_agg(&agg, &g).unwrap(), Value::Null);
    }

    #[test]
    fn empty_group_identities() {
        let x = Some(ScalarExpr::column(None, "x"));
        for (f, want) in [
            (AggFunc::Count, Value::Int(0)),
            (AggFunc::CountDistinct, Value::Int(0)),
            (AggFunc::BoolAnd, Value::Bool(true)),
            (AggFunc::BoolOr, Value::Bool(false)),
            (AggFunc::Sum, Value::Null),
            (AggFunc::Min, Value::Null),
            (AggFunc::Max, Value::Null),
        ] {
            let agg = AggExpr::new(f, x.clone(), "a");
            assert_eq!(eval_agg(&agg, &[]).unwrap(), want, "{f:?}");
        }
    }

    #[test]
    fn count_and_sum_merge_across_group_splits() {
        let all = vec![Value::Int(3), Value::Int(4), Value::Null, Value::Int(5)];
        for f in [AggFunc::Count, AggFunc::Sum] {
            let agg = AggExpr::new(f, Some(ScalarExpr::column(None, "x")), "a");
            let whole = eval_agg(&agg, &envs(all.clone())).unwrap();
            for split in 0..=all.len() {
                let (l, r) = all.split_at(split);
                let lv = eval_agg(&agg, &envs(l.to_vec())).unwrap();
                let rv = eval_agg(&agg, &envs(r.to_vec())).unwrap();
                let merged = match (lv, rv) {
                    (Value::Null, v) | (v, Value::Null) => v,
                    (Value::Int(a), Value::Int(b)) => Value::Int(a + b),
                    _ => unreachable!(),
                };
                assert_eq!(merged, whole);
            }
        }
    }

    #[test]
    fn renderer_parenthesizes_by_precedence() {
        let e = ScalarExpr::or(
            ScalarExpr::and(
                ScalarExpr::column(None, "a"),
                ScalarExpr::not(ScalarExpr::column(None, "b")),
            ),
            ScalarExpr::column(None, "c"),
        );
        assert_eq!(render_expr(&e), "a and not b or c");
        let e2 = ScalarExpr::and(
            ScalarExpr::or(ScalarExpr::column(None, "a"), ScalarExpr::column(None, "b")),
            ScalarExpr::column(None, "c"),
        );
        assert_eq!(render_expr(&e2), "(a or b) and c");
    }
}
