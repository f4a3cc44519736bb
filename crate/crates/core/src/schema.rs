//! Relations, schemas, and stable tuple identities.

use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

use crate::value::{ValType, Value};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate column `{0}` in relation `{1}`")]
    DuplicateColumn(String, String),
    #[error("duplicate relation `{0}`")]
    DuplicateRelation(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("row arity {got} does not match schema arity {want} in `{relation}`")]
    Arity {
        relation: String,
        want: usize,
        got: usize,
    },
    #[error("column `{column}` of `{relation}`: expected {want}, got {got}")]
    ColumnType {
        relation: String,
        column: String,
        want: ValType,
        got: String,
    },
    #[error("null in non-nullable column `{column}` of `{relation}`")]
    UnexpectedNull { relation: String, column: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub ty: ValType,
    pub nullable: bool,
}

/// Schema of one relation. Column names are case-insensitive (stored lowered)
/// and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub relation: String,
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(
        relation: impl Into<String>,
        columns: Vec<(&str, ValType, bool)>,
    ) -> Result<Schema, SchemaError> {
        let relation = relation.into().to_lowercase();
        let mut cols = Vec::with_capacity(columns.len());
        for (name, ty, nullable) in columns {
            let name = name.to_lowercase();
            if cols.iter().any(|c: &Column| c.name == name) {
                return Err(SchemaError::DuplicateColumn(name, relation));
            }
            cols.push(Column { name, ty, nullable });
        }
        Ok(Schema {
            relation,
            columns: cols,
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        let name = name.to_lowercase();
        self.columns.iter().position(|c| c.name == name)
    }

    /// Checks one row against arity, types, and nullability.
    pub fn check_row(&self, row: &[Value]) -> Result<(), SchemaError> {
        if row.len() != self.columns.len() {
            return Err(SchemaError::Arity {
                relation: self.relation.clone(),
                want: self.columns.len(),
                got: row.len(),
            });
        }
        for (col, v) in self.columns.iter().zip(row) {
            match v.ty() {
                None => {
                    if !col.nullable {
                        return Err(SchemaError::UnexpectedNull {
                            relation: self.relation.clone(),
                            column: col.name.clone(),
                        });
                    }
                }
                Some(t) if t == col.ty => {}
                Some(t) => {
                    return Err(SchemaError::ColumnType {
                        relation: self.relation.clone(),
                        column: col.name.clone(),
                        want: col.ty,
                        got: t.to_string(),
                    })
                }
            }
        }
        Ok(())
    }
}

/// Identity of an input tuple, stable for the lifetime of the database.
/// Ordinals are dense 0..n-1 in load order and are never reused.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TupleId {
    pub relation: Arc<str>,
    pub ordinal: u64,
}

impl TupleId {
    pub fn new(relation: impl AsRef<str>, ordinal: u64) -> TupleId {
        TupleId {
            relation: Arc::from(relation.as_ref()),
            ordinal,
        }
    }
}

impl fmt::Display for TupleId {
    /// Canonical text form is 1-based (`a1` is the first tuple of `a`),
    /// following the usual subscript convention for tuple variables.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.relation, self.ordinal + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Relation {
    pub schema: Schema,
    pub rows: Vec<(TupleId, Vec<Value>)>,
    name: Arc<str>,
}

impl Relation {
    pub fn new(schema: Schema) -> Relation {
        let name = Arc::from(schema.relation.as_str());
        Relation {
            schema,
            rows: Vec::new(),
            name,
        }
    }

    pub fn push_row(&mut self, row: Vec<Value>) -> Result<TupleId, SchemaError> {
        self.schema.check_row(&row)?;
        let id = TupleId {
            relation: self.name.clone(),
            ordinal: self.rows.len() as u64,
        };
        self.rows.push((id.clone(), row));
        Ok(id)
    }

    pub fn get(&self, id: &TupleId) -> Option<&[Value]> {
        self.rows
            .iter()
            .find(|(tid, _)| tid == id)
            .map(|(_, r)| r.as_slice())
    }

    /// Direct lookup by dense load ordinal.
    pub fn row_by_ordinal(&self, ordinal: u64) -> Option<&[Value]> {
        self.rows.get(ordinal as usize).and_then(|(tid, r)| {
            if tid.ordinal == ordinal {
                Some(r.as_slice())
            } else {
                None
            }
        })
    }
}

/// Named relations; names are case-insensitive and unique. Iteration order is
/// registration order everywhere, so runs are reproducible.
#[derive(Debug, Clone, Default)]
pub struct Database {
    relations: IndexMap<String, Relation>,
}

impl Database {
    pub fn new() -> Database {
        Database::default()
    }

    pub fn add_relation(&mut self, relation: Relation) -> Result<(), SchemaError> {
        let name = relation.schema.relation.clone();
        if self.relations.contains_key(&name) {
            return Err(SchemaError::DuplicateRelation(name));
        }
        self.relations.insert(name, relation);
        Ok(())
    }

    pub fn relation(&self, name: &str) -> Result<&Relation, SchemaError> {
        self.relations
            .get(&name.to_lowercase())
            .ok_or_else(|| SchemaError::UnknownRelation(name.to_string()))
    }

    pub fn relation_mut(&mut self, name: &str) -> Result<&mut Relation, SchemaError> {
        self.relations
            .get_mut(&name.to_lowercase())
            .ok_or_else(|| SchemaError::UnknownRelation(name.to_string()))
    }

    pub fn has_relation(&self, name: &str) -> bool {
        self.relations.contains_key(&name.to_lowercase())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Relation)> {
        self.relations.iter()
    }

    pub fn schema(&self, name: &str) -> Result<&Schema, SchemaError> {
        Ok(&self.relation(name)?.schema)
    }
}

/// Convenience constructor used heavily in tests and generators.
pub fn relation_from_rows(
    name: &str,
    columns: Vec<(&str, ValType, bool)>,
    rows: Vec<Vec<Value>>,
) -> Result<Relation, SchemaError> {
    let mut rel = Relation::new(Schema::new(name, columns)?);
    for row in rows {
        rel.push_row(row)?;
    }
    Ok(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuple_ids_are_dense_in_load_order() {
        let mut rel = Relation::new(
            Schema::new("t", vec![("x", ValType::Int, false)]).unwrap(),
        );
        for i in 0..5 {
            rel.push_row(vec![Value::Int(i)]).unwrap();
        }
        let ordinals: Vec<u64> = rel.rows.iter().map(|(id, _)| id.ordinal).collect();
        assert_eq!(ordinals, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn schema_rejects_duplicate_columns_case_insensitively() {
        let err = Schema::new("t", vec![("X", ValType::Int, false), ("x", ValType::Int, false)])
            .unwrap_err();
        assert!(matches!(err, SchemaError::DuplicateColumn(..)));
    }

    #[test]
    fn row_type_mismatch_rejected() {
        let mut rel = Relation::new(
            Schema::new("t", vec![("x", ValType::Int, false)]).unwrap(),
        );
        assert!(rel.push_row(vec![Value::text("no")]).is_err());
        assert!(rel.push_row(vec![Value::Null]).is_err());
    }

    #[test]
    fn tuple_id_renders_one_based() {
        assert_eq!(TupleId::new("a", 0).to_string(), "a1");
        assert_eq!(TupleId::new("b", 1).to_string(), "b2");
    }
}
