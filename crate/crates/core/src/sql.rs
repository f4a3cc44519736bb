//! SQL frontend: lexer, parser, and canonical renderer.
//!
//! Supported fragment: `SELECT [DISTINCT] items FROM t [AS a] {[CROSS|INNER]
//! JOIN t2 ON pred} [WHERE pred] [GROUP BY cols]` plus simple
//! `UPDATE t SET c = e, ... [WHERE pred]`. Inner joins only; aggregates only
//! as top-level select items; GROUP BY keys are bare column references.
//! Derived tables `(select ...) AS a` are accepted in FROM so that rewritten
//! queries emitted by the canonical renderer re-parse.
//!
//! Keywords and identifiers are case-insensitive; string literals are
//! single-quoted with `''` escaping; `--` starts a line comment.

use std::fmt;

use thiserror::Error;

use crate::expr::{
    contains_agg, AggExpr, AggFunc, ArithOp, CmpOp, ColumnRef, ScalarExpr,
};
use crate::plan::{LogicalPlan, ProjectItem, QueryStatement};
use crate::schema::Database;
use crate::value::Value;

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Ident(String),
    Int(i64),
    Dec(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Ident(s) => format!("`{s}`"),
            TokenKind::Int(i) => format!("`{i}`"),
            TokenKind::Dec(d) => format!("`{d}`"),
            TokenKind::Str(s) => format!("'{s}'"),
            TokenKind::Eof => "end of input".to_string(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            TokenKind::LParen => "(",
            TokenKind::RParen => ")",
            TokenKind::Comma => ",",
            TokenKind::Dot => ".",
            TokenKind::Eq => "=",
            TokenKind::Ne => "<>",
            TokenKind::Lt => "<",
            TokenKind::Le => "<=",
            TokenKind::Gt => ">",
            TokenKind::Ge => ">=",
            TokenKind::Plus => "+",
            TokenKind::Minus => "-",
            TokenKind::Star => "*",
            TokenKind::Slash => "/",
            _ => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("unsupported construct at {line}:{col}: {construct}")]
    Unsupported {
        line: u32,
        col: u32,
        construct: String,
    },
}

impl ParseError {
    fn syntax(tok: &Token, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: tok.line,
            col: tok.col,
            msg: msg.into(),
        }
    }

    fn unsupported(tok: &Token, construct: impl Into<String>) -> ParseError {
        ParseError::Unsupported {
            line: tok.line,
            col: tok.col,
            construct: construct.into(),
        }
    }
}

pub fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    macro_rules! tok {
        ($kind:expr, $l:expr, $c:expr) => {
            out.push(Token {
                kind: $kind,
                line: $l,
                col: $c,
            })
        };
    }
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        match c {
            '\n' => {
                line += 1;
                col = 1;
                i += 1;
            }
            ' ' | '\t' | '\r' => {
                col += 1;
                i += 1;
            }
            '-' if i + 1 < chars.len() && chars[i + 1] == '-' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '(' => {
                tok!(TokenKind::LParen, tl, tc);
                i += 1;
                col += 1;
            }
            ')' => {
                tok!(TokenKind::RParen, tl, tc);
                i += 1;
                col += 1;
            }
            ',' => {
                tok!(TokenKind::Comma, tl, tc);
                i += 1;
                col += 1;
            }
            '.' => {
                tok!(TokenKind::Dot, tl, tc);
                i += 1;
                col += 1;
            }
            '+' => {
                tok!(TokenKind::Plus, tl, tc);
                i += 1;
                col += 1;
            }
            '-' => {
                tok!(TokenKind::Minus, tl, tc);
                i += 1;
                col += 1;
            }
            '*' => {
                tok!(TokenKind::Star, tl, tc);
                i += 1;
                col += 1;
            }
            '/' => {
                tok!(TokenKind::Slash, tl, tc);
                i += 1;
                col += 1;
            }
            '=' => {
                tok!(TokenKind::Eq, tl, tc);
                i += 1;
                col += 1;
            }
            '!' if i + 1 < chars.len() && chars[i + 1] == '=' => {
                tok!(TokenKind::Ne, tl, tc);
                i += 2;
                col += 2;
            }
            '<' => {
                if i + 1 < chars.len() && chars[i + 1] == '>' {
                    tok!(TokenKind::Ne, tl, tc);
                    i += 2;
                    col += 2;
                } else if i + 1 < chars.len() && chars[i + 1] == '=' {
                    tok!(TokenKind::Le, tl, tc);
                    i += 2;
                    col += 2;
                } else {
                    tok!(TokenKind::Lt, tl, tc);
                    i += 1;
                    col += 1;
                }
            }
            '>' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    tok!(TokenKind::Ge, tl, tc);
                    i += 2;
                    col += 2;
                } else {
                    tok!(TokenKind::Gt, tl, tc);
                    i += 1;
                    col += 1;
                }
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                col += 1;
                loop {
                    if i >= chars.len() {
                        return Err(ParseError::Syntax {
                            line: tl,
                            col: tc,
                            msg: "unterminated string literal".into(),
                        });
                    }
                    if chars[i] == '\'' {
                        if i + 1 < chars.len() && chars[i + 1] == '\'' {
                            s.push('\'');
                            i += 2;
                            col += 2;
                        } else {
                            i += 1;
                            col += 1;
                            break;
                        }
                    } else {
                        if chars[i] == '\n' {
                            line += 1;
                            col = 1;
                        } else {
                            col += 1;
                        }
                        s.push(chars[i]);
                        i += 1;
                    }
                }
                tok!(TokenKind::Str(s), tl, tc);
            }
            d if d.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let mut is_dec = false;
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    is_dec = true;
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else if i < chars.len() && chars[i] == '.' && i + 1 >= chars.len() {
                    is_dec = true;
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                col += (i - start) as u32;
                if is_dec {
                    let v = text.parse::<f64>().map_err(|_| ParseError::Syntax {
                        line: tl,
                        col: tc,
                        msg: format!("bad number `{text}`"),
                    })?;
                    tok!(TokenKind::Dec(v), tl, tc);
                } else {
                    let v = text.parse::<i64>().map_err(|_| ParseError::Syntax {
                        line: tl,
                        col: tc,
                        msg: format!("integer out of range `{text}`"),
                    })?;
                    tok!(TokenKind::Int(v), tl, tc);
                }
            }
            a if a.is_ascii_alphabetic() || a == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                col += (i - start) as u32;
                tok!(TokenKind::Ident(text.to_lowercase()), tl, tc);
            }
            other => {
                return Err(ParseError::Syntax {
                    line: tl,
                    col: tc,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    out.push(Token {
        kind: TokenKind::Eof,
        line,
        col,
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

pub struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

const AGG_NAMES: &[&str] = &["count", "sum", "avg", "min", "max", "bool_and", "bool_or"];
const UNSUPPORTED_TRAILERS: &[(&str, &str)] = &[
    ("order", "ORDER BY"),
    ("having", "HAVING"),
    ("limit", "LIMIT"),
    ("union", "set operation"),
    ("intersect", "set operation"),
    ("except", "set operation"),
    ("offset", "OFFSET"),
];

impl Parser {
    pub fn new(text: &str) -> Result<Parser, ParseError> {
        Ok(Parser {
            toks: lex(text)?,
            pos: 0,
        })
    }

    pub fn peek(&self) -> &Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn peek2(&self) -> &Token {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)]
    }

    pub fn next_tok(&mut self) -> Token {
        let t = self.toks[self.pos.min(self.toks.len() - 1)].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    pub fn at_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().kind, TokenKind::Ident(s) if s == kw)
    }

    fn at_kw2(&self, kw: &str) -> bool {
        matches!(&self.peek2().kind, TokenKind::Ident(s) if s == kw)
    }

    pub fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(ParseError::syntax(
                self.peek(),
                format!("expected `{}`, found {}", kw, self.peek().kind.describe()),
            ))
        }
    }

    fn eat_sym(&mut self, kind: &TokenKind) -> bool {
        if &self.peek().kind == kind {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, kind: TokenKind) -> Result<(), ParseError> {
        if self.eat_sym(&kind) {
            Ok(())
        } else {
            Err(ParseError::syntax(
                self.peek(),
                format!(
                    "expected `{}`, found {}",
                    kind.symbol(),
                    self.peek().kind.describe()
                ),
            ))
        }
    }

    pub fn expect_ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().kind.clone() {
            TokenKind::Ident(s) => {
                self.pos += 1;
                Ok(s)
            }
            _ => Err(ParseError::syntax(
                self.peek(),
                format!("expected {what}, found {}", self.peek().kind.describe()),
            )),
        }
    }

    pub fn at_eof(&self) -> bool {
        matches!(self.peek().kind, TokenKind::Eof)
    }

    fn check_unsupported_trailer(&self) -> Result<(), ParseError> {
        if let TokenKind::Ident(s) = &self.peek().kind {
            for (kw, name) in UNSUPPORTED_TRAILERS {
                if s == kw {
                    return Err(ParseError::unsupported(self.peek(), *name));
                }
            }
        }
        Ok(())
    }

    // -- expressions --------------------------------------------------------

    pub fn parse_expr(&mut self) -> Result<ScalarExpr, ParseError> {
        self.parse_or()
    }

    fn parse_or(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut e = self.parse_and()?;
        while self.eat_kw("or") {
            let r = self.parse_and()?;
            e = ScalarExpr::or(e, r);
        }
        Ok(e)
    }

    fn parse_and(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut e = self.parse_not()?;
        while self.eat_kw("and") {
            let r = self.parse_not()?;
            e = ScalarExpr::and(e, r);
        }
        Ok(e)
    }

    fn parse_not(&mut self) -> Result<ScalarExpr, ParseError> {
        if self.eat_kw("not") {
            Ok(ScalarExpr::not(self.parse_not()?))
        } else {
            self.parse_cmp()
        }
    }

    fn parse_cmp(&mut self) -> Result<ScalarExpr, ParseError> {
        let left = self.parse_add()?;
        let op = match self.peek().kind {
            TokenKind::Eq => Some(CmpOp::Eq),
            TokenKind::Ne => Some(CmpOp::Ne),
            TokenKind::Lt => Some(CmpOp::Lt),
            TokenKind::Le => Some(CmpOp::Le),
            TokenKind::Gt => Some(CmpOp::Gt),
            TokenKind::Ge => Some(CmpOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.pos += 1;
            let right = self.parse_add()?;
            return Ok(ScalarExpr::cmp(op, left, right));
        }
        if self.at_kw("is") {
            self.pos += 1;
            let negated = self.eat_kw("not");
            self.expect_kw("null")?;
            return Ok(ScalarExpr::IsNull {
                expr: Box::new(left),
                negated,
            });
        }
        Ok(left)
    }

    fn parse_add(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut e = self.parse_mul()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Plus => ArithOp::Add,
                TokenKind::Minus => ArithOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let r = self.parse_mul()?;
            e = ScalarExpr::Arith {
                op,
                left: Box::new(e),
                right: Box::new(r),
            };
        }
        Ok(e)
    }

    fn parse_mul(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut e = self.parse_unary()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Star => ArithOp::Mul,
                TokenKind::Slash => ArithOp::Div,
                _ => break,
            };
            self.pos += 1;
            let r = self.parse_unary()?;
            e = ScalarExpr::Arith {
                op,
                left: Box::new(e),
                right: Box::new(r),
            };
        }
        Ok(e)
    }

    fn parse_unary(&mut self) -> Result<ScalarExpr, ParseError> {
        if self.eat_sym(&TokenKind::Minus) {
            // Fold a minus before a numeric literal into the literal.
            match self.peek().kind.clone() {
                TokenKind::Int(i) => {
                    self.pos += 1;
                    return Ok(ScalarExpr::Literal(Value::Int(-i)));
                }
                TokenKind::Dec(d) => {
                    self.pos += 1;
                    return Ok(ScalarExpr::Literal(Value::Decimal(-d)));
                }
                _ => return Ok(ScalarExpr::Neg(Box::new(self.parse_unary()?))),
            }
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<ScalarExpr, ParseError> {
        let tok = self.peek().clone();
        match tok.kind {
            TokenKind::Int(i) => {
                self.pos += 1;
                Ok(ScalarExpr::Literal(Value::Int(i)))
            }
            TokenKind::Dec(d) => {
                self.pos += 1;
                Ok(ScalarExpr::Literal(Value::Decimal(d)))
            }
            TokenKind::Str(s) => {
                self.pos += 1;
                Ok(ScalarExpr::Literal(Value::text(s)))
            }
            TokenKind::LParen => {
                self.pos += 1;
                if self.at_kw("select") {
                    return Err(ParseError::unsupported(&tok, "subquery"));
                }
                let e = self.parse_expr()?;
                self.expect_sym(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::Ident(name) => match name.as_str() {
                "null" => {
                    self.pos += 1;
                    Ok(ScalarExpr::Literal(Value::Null))
                }
                "true" => {
                    self.pos += 1;
                    Ok(ScalarExpr::Literal(Value::Bool(true)))
                }
                "false" => {
                    self.pos += 1;
                    Ok(ScalarExpr::Literal(Value::Bool(false)))
                }
                "current_user" => {
                    self.pos += 1;
                    Ok(ScalarExpr::CurrentUser)
                }
                "case" => self.parse_case(),
                "kill" => {
                    self.pos += 1;
                    self.expect_sym(TokenKind::LParen)?;
                    let policy = match self.peek().kind.clone() {
                        TokenKind::Str(s) => {
                            self.pos += 1;
                            s
                        }
                        _ => {
                            return Err(ParseError::syntax(
                                self.peek(),
                                "kill() takes a single string literal",
                            ))
                        }
                    };
                    self.expect_sym(TokenKind::RParen)?;
                    Ok(ScalarExpr::Kill { policy })
                }
                _ if AGG_NAMES.contains(&name.as_str())
                    && matches!(self.peek2().kind, TokenKind::LParen) =>
                {
                    let agg = self.parse_agg_call()?;
                    Ok(ScalarExpr::Agg(Box::new(agg)))
                }
                _ => {
                    self.pos += 1;
                    if self.eat_sym(&TokenKind::Dot) {
                        let col = self.expect_ident("column name")?;
                        Ok(ScalarExpr::Column(ColumnRef::qualified(&name, &col)))
                    } else {
                        Ok(ScalarExpr::Column(ColumnRef::bare(&name)))
                    }
                }
            },
            _ => Err(ParseError::syntax(
                &tok,
                format!("expected expression, found {}", tok.kind.describe()),
            )),
        }
    }

    fn parse_case(&mut self) -> Result<ScalarExpr, ParseError> {
        self.expect_kw("case")?;
        let mut whens = Vec::new();
        while self.eat_kw("when") {
            let cond = self.parse_expr()?;
            self.expect_kw("then")?;
            let val = self.parse_expr()?;
            whens.push((cond, val));
        }
        if whens.is_empty() {
            return Err(ParseError::syntax(
                self.peek(),
                "case requires at least one when arm",
            ));
        }
        let otherwise = if self.eat_kw("else") {
            Some(Box::new(self.parse_expr()?))
        } else {
            None
        };
        self.expect_kw("end")?;
        Ok(ScalarExpr::Case { whens, otherwise })
    }

    /// `func ( [distinct] expr | * )`; alias is attached by the caller.
    pub fn parse_agg_call(&mut self) -> Result<AggExpr, ParseError> {
        let tok = self.peek().clone();
        let name = self.expect_ident("aggregate function")?;
        self.expect_sym(TokenKind::LParen)?;
        let distinct = self.eat_kw("distinct");
        let arg = if self.eat_sym(&TokenKind::Star) {
            if distinct {
                return Err(ParseError::syntax(&tok, "count(distinct *) is not defined"));
            }
            None
        } else {
            Some(self.parse_expr()?)
        };
        self.expect_sym(TokenKind::RParen)?;
        let func = AggFunc::parse(&name, distinct).ok_or_else(|| {
            ParseError::syntax(
                &tok,
                format!(
                    "unknown aggregate `{name}{}`",
                    if distinct { " distinct" } else { "" }
                ),
            )
        })?;
        if arg.is_none() && !matches!(func, AggFunc::Count) {
            return Err(ParseError::syntax(
                &tok,
                format!("{name}(*) is not defined; only count(*)"),
            ));
        }
        Ok(AggExpr {
            func,
            arg,
            alias: String::new(),
        })
    }

    // -- statements ---------------------------------------------------------

    fn parse_from_item(&mut self) -> Result<LogicalPlan, ParseError> {
        if self.eat_sym(&TokenKind::LParen) {
            let inner = self.parse_select()?;
            self.expect_sym(TokenKind::RParen)?;
            self.eat_kw("as");
            let alias = self.expect_ident("derived table alias")?;
            return Ok(LogicalPlan::Alias {
                input: Box::new(inner),
                alias,
            });
        }
        let rel = self.expect_ident("relation name")?;
        let alias = if self.eat_kw("as") {
            self.expect_ident("alias")?
        } else if let TokenKind::Ident(next) = &self.peek().kind {
            // Bare alias, unless the ident is a clause keyword.
            const CLAUSE_KWS: &[&str] = &[
                "join", "cross", "inner", "left", "right", "full", "on", "where", "group",
                "order", "having", "limit", "union", "intersect", "except", "set", "offset",
            ];
            if CLAUSE_KWS.contains(&next.as_str()) {
                rel.clone()
            } else {
                let a = next.clone();
                self.pos += 1;
                a
            }
        } else {
            rel.clone()
        };
        Ok(LogicalPlan::scan_as(&rel, &alias))
    }

    fn parse_from(&mut self) -> Result<LogicalPlan, ParseError> {
        let mut plan = self.parse_from_item()?;
        loop {
            let tok = self.peek().clone();
            if self.at_kw("left") || self.at_kw("right") || self.at_kw("full") || self.at_kw("outer")
            {
                return Err(ParseError::unsupported(&tok, "outer join"));
            }
            if self.at_kw("cross") {
                self.pos += 1;
                self.expect_kw("join")?;
                let right = self.parse_from_item()?;
                plan = plan.join(right, ScalarExpr::Literal(Value::Bool(true)));
                continue;
            }
            if self.at_kw("inner") && self.at_kw2("join") {
                self.pos += 1;
            }
            if self.eat_kw("join") {
                let right = self.parse_from_item()?;
                self.expect_kw("on")?;
                let pred = self.parse_expr()?;
                plan = plan.join(right, pred);
                continue;
            }
            break;
        }
        Ok(plan)
    }

    fn parse_select(&mut self) -> Result<LogicalPlan, ParseError> {
        self.expect_kw("select")?;
        let distinct = self.eat_kw("distinct");

        let mut star = false;
        let mut items: Vec<(ScalarExpr, Option<String>)> = Vec::new();
        if self.eat_sym(&TokenKind::Star) {
            star = true;
        } else {
            loop {
                let expr = self.parse_expr()?;
                let alias = if self.eat_kw("as") {
                    Some(self.expect_ident("output alias")?)
                } else {
                    None
                };
                items.push((expr, alias));
                if !self.eat_sym(&TokenKind::Comma) {
                    break;
                }
            }
        }

        if !self.at_kw("from") {
            return Err(ParseError::syntax(self.peek(), "FROM clause required"));
        }
        self.expect_kw("from")?;
        let mut plan = self.parse_from()?;

        if self.eat_kw("where") {
            let pred = self.parse_expr()?;
            if contains_agg(&pred) {
                return Err(ParseError::syntax(
                    self.peek(),
                    "aggregates are not allowed in WHERE",
                ));
            }
            plan = plan.filter(pred);
        }

        let mut group_by: Vec<ColumnRef> = Vec::new();
        let mut grouped = false;
        if self.at_kw("group") {
            grouped = true;
            self.pos += 1;
            self.expect_kw("by")?;
            loop {
                let tok = self.peek().clone();
                let e = self.parse_expr()?;
                match e {
                    ScalarExpr::Column(c) => group_by.push(c),
                    _ => {
                        return Err(ParseError::syntax(
                            &tok,
                            "GROUP BY keys must be bare column references",
                        ))
                    }
                }
                if !self.eat_sym(&TokenKind::Comma) {
                    break;
                }
            }
        }

        self.check_unsupported_trailer()?;

        let has_aggs = items.iter().any(|(e, _)| contains_agg(e));
        let mut plan = if grouped || has_aggs {
            if star {
                return Err(ParseError::syntax(
                    self.peek(),
                    "SELECT * cannot be combined with GROUP BY or aggregates",
                ));
            }
            let mut aggs: Vec<AggExpr> = Vec::new();
            let mut proj = Vec::new();
            for (expr, alias) in items {
                match expr {
                    ScalarExpr::Agg(a) => {
                        let mut agg = *a;
                        agg.alias = alias.unwrap_or_else(|| agg.func.name().to_string());
                        proj.push(ProjectItem::new(
                            ScalarExpr::Column(ColumnRef::bare(&agg.alias)),
                            &agg.alias.clone(),
                        ));
                        aggs.push(agg);
                    }
                    ScalarExpr::Column(c) => {
                        let name = alias.unwrap_or_else(|| c.column.clone());
                        proj.push(ProjectItem::new(ScalarExpr::Column(c), &name));
                    }
                    other if contains_agg(&other) => {
                        // Expression over aggregates: hoist each call into
                        // the aggregation operator, reusing structurally
                        // identical entries.
                        let name = match alias {
                            Some(a) => a,
                            None => {
                                return Err(ParseError::syntax(
                                    self.peek(),
                                    format!("select item `{other}` requires AS <name>"),
                                ))
                            }
                        };
                        let rewritten = other.rewrite(&mut |node| match node {
                            ScalarExpr::Agg(call) => {
                                let existing = aggs
                                    .iter()
                                    .find(|g| g.func == call.func && g.arg == call.arg)
                                    .map(|g| g.alias.clone());
                                let hoisted = match existing {
                                    Some(a) => a,
                                    None => {
                                        let mut k = aggs.len();
                                        let alias = loop {
                                            let cand = format!("__a{k}");
                                            if !aggs.iter().any(|g| g.alias == cand) {
                                                break cand;
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
                                ScalarExpr::Column(ColumnRef::bare(&hoisted))
                            }
                            node => node,
                        });
                        proj.push(ProjectItem::new(rewritten, &name));
                    }
                    other => {
                        return Err(ParseError::syntax(
                            self.peek(),
                            format!(
                                "non-aggregate select item `{other}` must be a grouped column"
                            ),
                        ))
                    }
                }
            }
            plan.aggregate(group_by, aggs).project(proj)
        } else {
            if star {
                LogicalPlan::Project {
                    input: Box::new(plan),
                    items: vec![],
                    star: true,
                }
            } else {
                let mut proj = Vec::new();
                for (expr, alias) in items {
                    let name = match (&expr, alias) {
                        (_, Some(a)) => a,
                        (ScalarExpr::Column(c), None) => c.column.clone(),
                        (other, None) => {
                            return Err(ParseError::syntax(
                                self.peek(),
                                format!("select item `{other}` requires AS <name>"),
                            ))
                        }
                    };
                    proj.push(ProjectItem::new(expr, &name));
                }
                plan.project(proj)
            }
        };
        if distinct {
            plan = plan.distinct();
        }
        Ok(plan)
    }

    fn parse_update(&mut self) -> Result<LogicalPlan, ParseError> {
        self.expect_kw("update")?;
        let rel = self.expect_ident("relation name")?;
        let alias = if self.eat_kw("as") {
            self.expect_ident("alias")?
        } else if let TokenKind::Ident(next) = &self.peek().kind {
            if next != "set" {
                let a = next.clone();
                self.pos += 1;
                a
            } else {
                rel.clone()
            }
        } else {
            rel.clone()
        };
        self.expect_kw("set")?;
        let mut assignments = Vec::new();
        loop {
            let col = self.expect_ident("column name")?;
            self.expect_sym(TokenKind::Eq)?;
            let e = self.parse_expr()?;
            if contains_agg(&e) {
                return Err(ParseError::syntax(
                    self.peek(),
                    "aggregates are not allowed in SET",
                ));
            }
            assignments.push((col, e));
            if !self.eat_sym(&TokenKind::Comma) {
                break;
            }
        }
        let predicate = if self.eat_kw("where") {
            Some(self.parse_expr()?)
        } else {
            None
        };
        Ok(LogicalPlan::Update {
            relation: rel,
            alias,
            assignments,
            predicate,
        })
    }
}

/// Parses one statement of the supported fragment.
pub fn parse_sql(text: &str) -> Result<QueryStatement, ParseError> {
    let mut p = Parser::new(text)?;
    let plan = if p.at_kw("select") {
        p.parse_select()?
    } else if p.at_kw("update") {
        p.parse_update()?
    } else {
        return Err(ParseError::syntax(
            p.peek(),
            "expected SELECT or UPDATE",
        ));
    };
    p.check_unsupported_trailer()?;
    if !p.at_eof() {
        return Err(ParseError::syntax(
            p.peek(),
            format!("unexpected {}", p.peek().kind.describe()),
        ));
    }
    Ok(QueryStatement::new(plan))
}

// ---------------------------------------------------------------------------
// Canonical renderer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RenderError {
    #[error("cannot qualify column `{0}` in emitted SQL")]
    Unqualifiable(String),
    #[error("plan not renderable: {0}")]
    NotRenderable(String),
}

struct FromLeg<'a> {
    plan: &'a LogicalPlan,
    on: Option<&'a ScalarExpr>,
    cross: bool,
}

struct FromCtx {
    /// (qualifier as written in the emitted FROM, exposed output names)
    items: Vec<(String, Vec<String>)>,
}

impl FromCtx {
    fn qualify(&self, c: &ColumnRef) -> Result<String, RenderError> {
        if let Some(a) = &c.alias {
            if self
                .items
                .iter()
                .any(|(q, names)| q == a && names.contains(&c.column))
            {
                return Ok(format!("{a}.{}", c.column));
            }
        }
        let hits: Vec<&String> = self
            .items
            .iter()
            .filter(|(_, names)| names.contains(&c.column))
            .map(|(q, _)| q)
            .collect();
        match (c.alias.as_ref(), hits.len()) {
            (None, 1) => Ok(c.column.clone()),
            (Some(_), 1) => Ok(format!("{}.{}", hits[0], c.column)),
            (None, 0) | (Some(_), 0) => Err(RenderError::Unqualifiable(c.display_name())),
            _ => Err(RenderError::Unqualifiable(c.display_name())),
        }
    }

    fn render_expr(&self, e: &ScalarExpr) -> Result<String, RenderError> {
        // Re-qualify column references, then reuse the plain renderer.
        let mut err = None;
        let out = e.clone().rewrite(&mut |node| match node {
            ScalarExpr::Column(c) => {
                match self.qualify(&c) {
                    Ok(q) => {
                        let (alias, column) = match q.split_once('.') {
                            Some((a, n)) => (Some(a.to_string()), n.to_string()),
                            None => (None, q),
                        };
                        ScalarExpr::Column(ColumnRef {
                            alias,
                            column,
                            slot: None,
                        })
                    }
                    Err(e) => {
                        err = Some(e);
                        ScalarExpr::Column(c)
                    }
                }
            }
            other => other,
        });
        match err {
            Some(e) => Err(e),
            None => Ok(crate::expr::render_expr(&out)),
        }
    }
}

pub struct SqlRenderer<'a> {
    db: &'a Database,
    counter: usize,
}

impl<'a> SqlRenderer<'a> {
    pub fn new(db: &'a Database) -> SqlRenderer<'a> {
        SqlRenderer { db, counter: 0 }
    }

    fn fresh_alias(&mut self) -> String {
        let a = format!("__q{}", self.counter);
        self.counter += 1;
        a
    }

    fn exposed_names(&self, plan: &LogicalPlan) -> Result<Vec<String>, RenderError> {
        crate::plan::output_scope(plan, self.db)
            .map(|s| s.bindings.into_iter().map(|b| b.name).collect())
            .map_err(|e| RenderError::NotRenderable(e.to_string()))
    }

    /// Flattens a left-deep join tree into FROM legs, hoisting filters on
    /// the left spine into the block's WHERE (kept in bottom-up order so
    /// conjunct evaluation order matches the stacked filters).
    fn flatten_joins<'p>(
        &self,
        plan: &'p LogicalPlan,
        legs: &mut Vec<FromLeg<'p>>,
        hoisted: &mut Vec<&'p ScalarExpr>,
    ) {
        match plan {
            LogicalPlan::Join {
                left,
                right,
                predicate,
                semi_payload,
            } => {
                self.flatten_joins(left, legs, hoisted);
                let cross = !*semi_payload
                    && matches!(predicate, ScalarExpr::Literal(Value::Bool(true)));
                legs.push(FromLeg {
                    plan: right,
                    on: if cross { None } else { Some(predicate) },
                    cross,
                });
            }
            LogicalPlan::Filter { input, predicate } => {
                self.flatten_joins(input, legs, hoisted);
                hoisted.push(predicate);
            }
            other => legs.push(FromLeg {
                plan: other,
                on: None,
                cross: false,
            }),
        }
    }

    fn render_from_item(&mut self, plan: &LogicalPlan) -> Result<(String, String, Vec<String>), RenderError> {
        match plan {
            LogicalPlan::Scan { relation, alias } => {
                let names = self
                    .db
                    .schema(relation)
                    .map_err(|e| RenderError::NotRenderable(e.to_string()))?
                    .columns
                    .iter()
                    .map(|c| c.name.clone())
                    .collect();
                let sql = if alias == relation {
                    relation.clone()
                } else {
                    format!("{relation} as {alias}")
                };
                Ok((sql, alias.clone(), names))
            }
            LogicalPlan::Alias { input, alias } => {
                let inner = self.render_select(input)?;
                let names = self.exposed_names(plan)?;
                Ok((format!("({inner}) as {alias}"), alias.clone(), names))
            }
            other => {
                let inner = self.render_select(other)?;
                let alias = self.fresh_alias();
                let names = self.exposed_names(other)?;
                Ok((format!("({inner}) as {alias}"), alias, names))
            }
        }
    }

    pub fn render_select(&mut self, plan: &LogicalPlan) -> Result<String, RenderError> {
        let mut node = plan;
        let mut distinct = false;
        if let LogicalPlan::Distinct { input } = node {
            distinct = true;
            node = input;
        }
        let project: Option<&Vec<ProjectItem>> = match node {
            LogicalPlan::Project { input, items, star } => {
                if *star {
                    return Err(RenderError::NotRenderable(
                        "unvalidated SELECT * projection".into(),
                    ));
                }
                node = input;
                Some(items)
            }
            _ => None,
        };
        let aggregate: Option<(&Vec<ColumnRef>, &Vec<AggExpr>)> = match node {
            LogicalPlan::Aggregate {
                input,
                group_by,
                aggs,
            } => {
                node = input;
                Some((group_by, aggs))
            }
            _ => None,
        };
        let mut tops: Vec<&ScalarExpr> = Vec::new();
        while let LogicalPlan::Filter { input, predicate } = node {
            tops.push(predicate);
            node = input;
        }

        let mut legs = Vec::new();
        let mut wheres: Vec<&ScalarExpr> = Vec::new();
        self.flatten_joins(node, &mut legs, &mut wheres);
        wheres.extend(tops.into_iter().rev());

        let mut ctx = FromCtx { items: vec![] };
        let mut from_sql = String::new();
        for (i, leg) in legs.iter().enumerate() {
            let (sql, qual, names) = self.render_from_item(leg.plan)?;
            ctx.items.push((qual, names));
            if i == 0 {
                from_sql.push_str(&sql);
            } else if leg.cross {
                from_sql.push_str(&format!(" cross join {sql}"));
            } else {
                let on = ctx.render_expr(leg.on.expect("non-cross join has a predicate"))?;
                from_sql.push_str(&format!(" join {sql} on {on}"));
            }
        }

        // Select list.
        let mut select_items = Vec::new();
        match (project, aggregate) {
            (Some(items), Some((_, aggs))) => {
                // SQL has no way to reference an aggregate output by alias
                // within its own select list, so references to aggregate
                // aliases expand back into the aggregate call.
                for item in items {
                    let substituted = item.expr.clone().rewrite(&mut |node| match node {
                        ScalarExpr::Column(c) if c.alias.is_none() => {
                            match aggs.iter().find(|a| a.alias == c.column) {
                                Some(agg) => {
                                    let mut hoisted = agg.clone();
                                    hoisted.alias = c.column.clone();
                                    ScalarExpr::Agg(Box::new(hoisted))
                                }
                                None => ScalarExpr::Column(c),
                            }
                        }
                        other => other,
                    });
                    let body = ctx.render_expr(&substituted)?;
                    let rendered = match &substituted {
                        ScalarExpr::Column(c) if c.column == item.name => body,
                        _ => format!("{body} as {}", item.name),
                    };
                    select_items.push(rendered);
                }
            }
            (Some(items), None) => {
                for item in items {
                    select_items.push(self.render_item(item, &ctx)?);
                }
            }
            (None, Some((group_by, aggs))) => {
                for g in group_by.iter() {
                    select_items.push(ctx.qualify(g)?);
                }
                for a in aggs {
                    let body = self.render_agg(a, &ctx)?;
                    select_items.push(format!("{body} as {}", a.alias));
                }
            }
            (None, None) => {
                for (q, names) in &ctx.items {
                    for n in names {
                        select_items.push(format!("{q}.{n}"));
                    }
                }
            }
        }

        let mut sql = format!(
            "select {}{} from {}",
            if distinct { "distinct " } else { "" },
            select_items.join(", "),
            from_sql
        );
        if !wheres.is_empty() {
            let parts: Result<Vec<String>, RenderError> = wheres
                .iter()
                .map(|w| {
                    let s = ctx.render_expr(w)?;
                    // Each part becomes an AND operand.
                    Ok(if matches!(w, ScalarExpr::Or(..)) {
                        format!("({s})")
                    } else {
                        s
                    })
                })
                .collect();
            sql.push_str(&format!(" where {}", parts?.join(" and ")));
        }
        if let Some((group_by, _)) = aggregate {
            if !group_by.is_empty() {
                let keys: Result<Vec<String>, RenderError> =
                    group_by.iter().map(|g| ctx.qualify(g)).collect();
                sql.push_str(&format!(" group by {}", keys?.join(", ")));
            }
        }
        Ok(sql)
    }

    fn render_agg(&self, a: &AggExpr, ctx: &FromCtx) -> Result<String, RenderError> {
        let arg = match &a.arg {
            None => "*".to_string(),
            Some(e) => ctx.render_expr(e)?,
        };
        Ok(if a.func.is_distinct() {
            format!("count(distinct {arg})")
        } else {
            format!("{}({arg})", a.func.name())
        })
    }

    fn render_item(&self, item: &ProjectItem, ctx: &FromCtx) -> Result<String, RenderError> {
        let body = ctx.render_expr(&item.expr)?;
        match &item.expr {
            ScalarExpr::Column(c) if c.column == item.name => Ok(body),
            _ => Ok(format!("{body} as {}", item.name)),
        }
    }

    pub fn render_update(&mut self, plan: &LogicalPlan) -> Result<String, RenderError> {
        if let LogicalPlan::Update {
            relation,
            alias,
            assignments,
            predicate,
        } = plan
        {
            let names = self
                .db
                .schema(relation)
                .map_err(|e| RenderError::NotRenderable(e.to_string()))?
                .columns
                .iter()
                .map(|c| c.name.clone())
                .collect::<Vec<_>>();
            let ctx = FromCtx {
                items: vec![(alias.clone(), names)],
            };
            let mut sql = format!("update {relation}");
            if alias != relation {
                sql.push_str(&format!(" as {alias}"));
            }
            let sets: Result<Vec<String>, RenderError> = assignments
                .iter()
                .map(|(c, e)| Ok(format!("{c} = {}", ctx.render_expr(e)?)))
                .collect();
            sql.push_str(&format!(" set {}", sets?.join(", ")));
            if let Some(p) = predicate {
                sql.push_str(&format!(" where {}", ctx.render_expr(p)?));
            }
            Ok(sql)
        } else {
            Err(RenderError::NotRenderable("expected an update plan".into()))
        }
    }
}

/// Renders a validated plan as canonical SQL. `parse -> render -> parse` is a
/// fixpoint on the supported fragment; rewriter-emitted plans render with
/// derived tables where needed.
pub fn render_sql(plan: &LogicalPlan, db: &Database) -> Result<String, RenderError> {
    let mut r = SqlRenderer::new(db);
    if plan.is_update() {
        r.render_update(plan)
    } else {
        r.render_select(plan)
    }
}

impl fmt::Display for LogicalPlan {
    /// Compact operator-tree form used by `--explain` and tests.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(p: &LogicalPlan, indent: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let pad = "  ".repeat(indent);
            match p {
                LogicalPlan::Scan { relation, alias } => {
                    if relation == alias {
                        writeln!(f, "{pad}scan {relation}")?;
                    } else {
                        writeln!(f, "{pad}scan {relation} as {alias}")?;
                    }
                }
                LogicalPlan::Alias { input, alias } => {
                    writeln!(f, "{pad}alias {alias}")?;
                    go(input, indent + 1, f)?;
                }
                LogicalPlan::Filter { input, predicate } => {
                    writeln!(f, "{pad}filter {predicate}")?;
                    go(input, indent + 1, f)?;
                }
                LogicalPlan::Project { input, items, .. } => {
                    let names: Vec<String> = items
                        .iter()
                        .map(|i| format!("{} as {}", i.expr, i.name))
                        .collect();
                    writeln!(f, "{pad}project [{}]", names.join(", "))?;
                    go(input, indent + 1, f)?;
                }
                LogicalPlan::Join {
                    left,
                    right,
                    predicate,
                    semi_payload,
                } => {
                    let kind = if *semi_payload { "semi join" } else { "join" };
                    writeln!(f, "{pad}{kind} on {predicate}")?;
                    go(left, indent + 1, f)?;
                    go(right, indent + 1, f)?;
                }
                LogicalPlan::Aggregate {
                    input,
                    group_by,
                    aggs,
                } => {
                    let keys: Vec<String> = group_by.iter().map(|g| g.display_name()).collect();
                    let fs: Vec<String> =
                        aggs.iter().map(|a| format!("{} as {}", a.render(), a.alias)).collect();
                    writeln!(f, "{pad}aggregate by [{}] compute [{}]", keys.join(", "), fs.join(", "))?;
                    go(input, indent + 1, f)?;
                }
                LogicalPlan::Distinct { input } => {
                    writeln!(f, "{pad}distinct")?;
                    go(input, indent + 1, f)?;
                }
                LogicalPlan::Update {
                    relation,
                    alias,
                    assignments,
                    predicate,
                } => {
                    let sets: Vec<String> = assignments
                        .iter()
                        .map(|(c, e)| format!("{c} = {e}"))
                        .collect();
                    let wh = predicate
                        .as_ref()
                        .map(|p| format!(" where {p}"))
                        .unwrap_or_default();
                    writeln!(f, "{pad}update {relation} as {alias} set [{}]{wh}", sets.join(", "))?;
                }
            }
            Ok(())
        }
        go(self, 0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{validate, StatementKind};
    use crate::schema::{relation_from_rows, Database};
    use crate::value::ValType;

    fn db() -> Database {
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
                vec![],
            )
            .unwrap(),
        )
        .unwrap();
        db.add_relation(
            relation_from_rows(
                "s",
                vec![("sid", ValType::Int, false), ("year", ValType::Int, false)],
                vec![],
            )
            .unwrap(),
        )
        .unwrap();
        db
    }

    #[test]
    fn join_aggregate_shape() {
        let q = parse_sql(
            "SELECT school, avg(score) FROM students JOIN S ON students.sid=S.sid \
             WHERE year=2024 GROUP BY school",
        )
        .unwrap();
        assert_eq!(q.kind(), StatementKind::Select);
        // Project(Aggregate(Filter(Join(Scan, Scan))))
        match &q.plan {
            LogicalPlan::Project { input, .. } => match input.as_ref() {
                LogicalPlan::Aggregate { input, aggs, .. } => {
                    assert_eq!(aggs.len(), 1);
                    assert_eq!(aggs[0].func, AggFunc::Avg);
                    match input.as_ref() {
                        LogicalPlan::Filter { input, .. } => {
                            assert!(matches!(input.as_ref(), LogicalPlan::Join { .. }));
                        }
                        other => panic!("expected filter, got {other}"),
                    }
                }
                other => panic!("expected aggregate, got {other}"),
            },
            other => panic!("expected project, got {other}"),
        }
        let rels: Vec<String> = q.plan.referenced_relations().into_iter().collect();
        assert_eq!(rels, vec!["s".to_string(), "students".to_string()]);
    }

    #[test]
    fn select_without_from_is_rejected() {
        let err = parse_sql("SELECT 1").unwrap_err();
        assert!(err.to_string().contains("FROM clause required"), "{err}");
    }

    #[test]
    fn update_parses_to_update_root() {
        let q = parse_sql("UPDATE users SET status='Verified' WHERE id=4").unwrap();
        assert_eq!(q.kind(), StatementKind::Update);
        match &q.plan {
            LogicalPlan::Update {
                relation,
                assignments,
                predicate,
                ..
            } => {
                assert_eq!(relation, "users");
                assert_eq!(assignments.len(), 1);
                assert!(predicate.is_some());
            }
            other => panic!("expected update, got {other}"),
        }
    }

    #[test]
    fn unsupported_constructs_name_the_construct() {
        for (sql, what) in [
            ("SELECT a FROM t ORDER BY a", "ORDER BY"),
            ("SELECT a FROM t HAVING a > 1", "HAVING"),
            ("SELECT a FROM t LEFT JOIN s ON 1=1", "outer join"),
            ("SELECT a FROM t WHERE x = (SELECT y FROM s)", "subquery"),
            ("SELECT a FROM t UNION SELECT a FROM s", "set operation"),
        ] {
            match parse_sql(sql) {
                Err(ParseError::Unsupported { construct, .. }) => {
                    assert_eq!(construct, what, "{sql}")
                }
                other => panic!("{sql}: expected unsupported error, got {other:?}"),
            }
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_sql("SELECT a FROM") {
            Err(ParseError::Syntax { line, col, .. }) => {
                assert_eq!(line, 1);
                assert!(col > 1);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn parse_render_parse_is_a_fixpoint() {
        let db = db();
        let queries = [
            "select school, avg(score) as avg from students join s on students.sid = s.sid where year = 2024 group by school",
            "select distinct school from students",
            "select sid, score from students where score > 80.5 and ethnicity is not null",
            "select students.school, count(*) as n from students cross join s group by students.school",
            "select sid as id, score * 2.0 as double_score from students",
            "update students set score = score + 1.0 where sid = 3",
            "select count(distinct ethnicity) as cnt from students",
        ];
        for q in queries {
            let mut stmt = parse_sql(q).unwrap();
            validate(&mut stmt.plan, &db).unwrap();
            let rendered = render_sql(&stmt.plan, &db).unwrap();
            let mut stmt2 = parse_sql(&rendered).unwrap();
            validate(&mut stmt2.plan, &db).unwrap();
            assert_eq!(stmt.plan, stmt2.plan, "not a fixpoint:\n{q}\n{rendered}");
            let rendered2 = render_sql(&stmt2.plan, &db).unwrap();
            assert_eq!(rendered, rendered2);
        }
    }

    #[test]
    fn derived_tables_in_from_parse() {
        let db = db();
        let mut stmt = parse_sql(
            "select q.school from (select school from students) as q where q.school = 'x'",
        )
        .unwrap();
        validate(&mut stmt.plan, &db).unwrap();
        let rendered = render_sql(&stmt.plan, &db).unwrap();
        let mut stmt2 = parse_sql(&rendered).unwrap();
        validate(&mut stmt2.plan, &db).unwrap();
        assert_eq!(stmt.plan, stmt2.plan);
    }

    #[test]
    fn validation_rejects_ill_typed_plans() {
        let db = db();
        let mut stmt = parse_sql("select sid from students where school + 1 = 2").unwrap();
        assert!(validate(&mut stmt.plan, &db).is_err());
        let mut stmt2 = parse_sql("select sid from students where score").unwrap();
        assert!(validate(&mut stmt2.plan, &db).is_err());
    }
}
