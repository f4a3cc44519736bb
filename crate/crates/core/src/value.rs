//! Runtime values and their SQL-flavored semantics.
//!
//! Five storage types: 64-bit integers, 64-bit floats (`decimal`), text,
//! booleans, and null. Comparisons between incompatible non-null types are
//! errors, never `false`; integers and decimals form one numeric family and
//! compare with promotion. Null propagates through scalar operators under
//! three-valued logic.

use std::cmp::Ordering;
use std::sync::Arc;
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

/// Storable value type. `Any` never appears in a schema; it is the static
/// type of `current_user` and of the never-returning `kill()` function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValType {
    Int,
    Decimal,
    Text,
    Bool,
    Any,
}

impl ValType {
    pub fn parse(s: &str) -> Option<ValType> {
        match s.to_ascii_lowercase().as_str() {
            "int" | "integer" | "bigint" => Some(ValType::Int),
            "decimal" | "float" | "double" => Some(ValType::Decimal),
            "text" | "varchar" | "string" => Some(ValType::Text),
            "bool" | "boolean" => Some(ValType::Bool),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ValType::Int => "int",
            ValType::Decimal => "decimal",
            ValType::Text => "text",
            ValType::Bool => "bool",
            ValType::Any => "any",
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, ValType::Int | ValType::Decimal | ValType::Any)
    }

    /// Least common type of two expression types, if one exists.
    pub fn unify(a: ValType, b: ValType) -> Option<ValType> {
        use ValType::*;
        match (a, b) {
            (Any, t) | (t, Any) => Some(t),
            (x, y) if x == y => Some(x),
            (Int, Decimal) | (Decimal, Int) => Some(Decimal),
            _ => None,
        }
    }
}

impl fmt::Display for ValType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ValueError {
    #[error("cannot compare {0} with {1}")]
    Incomparable(ValType, ValType),
    #[error("arithmetic requires numeric operands, got {0} and {1}")]
    NonNumeric(ValType, ValType),
    #[error("integer overflow in {0}")]
    Overflow(&'static str),
}

/// A single runtime value.
#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Decimal(f64),
    Text(Arc<str>),
    Bool(bool),
    Null,
}

impl Value {
    pub fn ty(&self) -> Option<ValType> {
        match self {
            Value::Int(_) => Some(ValType::Int),
            Value::Decimal(_) => Some(ValType::Decimal),
            Value::Text(_) => Some(ValType::Text),
            Value::Bool(_) => Some(ValType::Bool),
            Value::Null => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn text(s: impl AsRef<str>) -> Value {
        Value::Text(Arc::from(s.as_ref()))
    }

    fn decimal_bits(f: f64) -> u64 {
        // Collapse -0.0 with 0.0 and all NaN payloads so structural
        // equality and hashing agree with grouping semantics.
        if f == 0.0 {
            0f64.to_bits()
        } else if f.is_nan() {
            f64::NAN.to_bits()
        } else {
            f.to_bits()
        }
    }

    fn type_rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Bool(_) => 1,
            Value::Int(_) => 2,
            Value::Decimal(_) => 3,
            Value::Text(_) => 4,
        }
    }

    /// Total order across all values, used for deterministic sorting of
    /// result rows and digests. Not SQL comparison: that is [`Value::compare`].
    pub fn total_cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Decimal(a), Value::Decimal(b)) => a.total_cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Null, Value::Null) => Ordering::Equal,
            _ => self.type_rank().cmp(&other.type_rank()),
        }
    }

    /// SQL comparison: `None` when either side is null, error on
    /// incompatible types. Int and Decimal compare with promotion.
    pub fn compare(&self, other: &Value) -> Result<Option<Ordering>, ValueError> {
        match (self, other) {
            (Value::Null, _) | (_, Value::Null) => Ok(None),
            (Value::Int(a), Value::Int(b)) => Ok(Some(a.cmp(b))),
            (Value::Decimal(a), Value::Decimal(b)) => Ok(Some(a.total_cmp(b))),
            (Value::Int(a), Value::Decimal(b)) => Ok(Some((*a as f64).total_cmp(b))),
            (Value::Decimal(a), Value::Int(b)) => Ok(Some(a.total_cmp(&(*b as f64)))),
            (Value::Text(a), Value::Text(b)) => Ok(Some(a.cmp(b))),
            (Value::Bool(a), Value::Bool(b)) => Ok(Some(a.cmp(b))),
            _ => Err(ValueError::Incomparable(
                self.ty().unwrap(),
                other.ty().unwrap(),
            )),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    /// SQL literal rendering; round-trips through the lexer for every type.
    pub fn render(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Decimal(d) => render_decimal(*d),
            Value::Text(s) => format!("'{}'", s.replace('\'', "''")),
            Value::Bool(b) => b.to_string(),
            Value::Null => "null".to_string(),
        }
    }
}

/// Shortest representation that parses back to the same f64, with a forced
/// decimal point so the lexer re-reads it as a decimal, not an int.
pub fn render_decimal(d: f64) -> String {
    let s = format!("{d}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Decimal(a), Value::Decimal(b)) => {
                Value::decimal_bits(*a) == Value::decimal_bits(*b)
            }
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Null, Value::Null) => true,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.type_rank().hash(state);
        match self {
            Value::Int(i) => i.hash(state),
            Value::Decimal(d) => Value::decimal_bits(*d).hash(state),
            Value::Text(s) => s.hash(state),
            Value::Bool(b) => b.hash(state),
            Value::Null => {}
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Three-valued AND.
pub fn tv_and(a: &Value, b: &Value) -> Value {
    match (a, b) {
        (Value::Bool(false), _) | (_, Value::Bool(false)) => Value::Bool(false),
        (Value::Bool(true), Value::Bool(true)) => Value::Bool(true),
        _ => Value::Null,
    }
}

/// Three-valued OR.
pub fn tv_or(a: &Value, b: &Value) -> Value {
    match (a, b) {
        (Value::Bool(true), _) | (_, Value::Bool(true)) => Value::Bool(true),
        (Value::Bool(false), Value::Bool(false)) => Value::Bool(false),
        _ => Value::Null,
    }
}

/// Three-valued NOT.
pub fn tv_not(a: &Value) -> Value {
    match a {
        Value::Bool(b) => Value::Bool(!b),
        _ => Value::Null,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_comparison_promotes() {
        assert_eq!(
            Value::Int(2).compare(&Value::Decimal(2.0)).unwrap(),
            Some(Ordering::Equal)
        );
        assert_eq!(
            Value::Decimal(1.5).compare(&Value::Int(2)).unwrap(),
            Some(Ordering::Less)
        );
    }

    #[test]
    fn cross_type_comparison_is_an_error_not_false() {
        let err = Value::text("x").compare(&Value::Int(1)).unwrap_err();
        assert_eq!(err, ValueError::Incomparable(ValType::Text, ValType::Int));
    }

    #[test]
    fn null_comparison_is_unknown() {
        assert_eq!(Value::Null.compare(&Value::Int(1)).unwrap(), None);
    }

    #[test]
    fn three_valued_connectives() {
        let (t, f, n) = (Value::Bool(true), Value::Bool(false), Value::Null);
        assert_eq!(tv_and(&f, &n), f);
        assert_eq!(tv_and(&t, &n), n);
        assert_eq!(tv_or(&t, &n), t);
        assert_eq!(tv_or(&f, &n), n);
        assert_eq!(tv_not(&n), n);
    }

    #[test]
    fn decimal_render_round_trips() {
        for d in [0.1, 1.0, -3.25, 1e300, 0.00001, 123.45] {
            let s = render_decimal(d);
            assert_eq!(s.parse::<f64>().unwrap(), d, "render of {d} was {s}");
        }
    }

    #[test]
    fn grouping_equality_collapses_signed_zero() {
        assert_eq!(Value::Decimal(0.0), Value::Decimal(-0.0));
    }
}
