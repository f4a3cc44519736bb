//! Data directory loading and dumping.
//!
//! A data directory holds `schema.txt` (one stanza per relation) plus one
//! RFC-4180 CSV per relation with a header row matching the declared columns.
//!
//! ```text
//! relation students
//!   sid int
//!   school text
//!   ethnicity text nullable
//!   score decimal
//! ```
//!
//! Empty CSV fields are nulls in nullable columns. Values round-trip
//! bit-exactly: decimals are written in shortest-round-trip form.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::schema::{Database, Relation, Schema, SchemaError};
use crate::value::{render_decimal, ValType, Value};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses the schema manifest text into relation schemas.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<Schema>, DataError> {
    let mut schemas: Vec<Schema> = Vec::new();
    let mut current: Option<(String, Vec<(String, ValType, bool)>)> = None;
    let flush = |cur: &mut Option<(String, Vec<(String, ValType, bool)>)>,
                     line: usize|
     -> Result<Option<Schema>, DataError> {
        if let Some((name, cols)) = cur.take() {
            if cols.is_empty() {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("relation `{name}` has no columns"),
                });
            }
            let schema = Schema::new(
                name,
                cols.iter()
                    .map(|(n, t, nl)| (n.as_str(), *t, *nl))
                    .collect(),
            )?;
            return Ok(Some(schema));
        }
        Ok(None)
    };
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split("--").next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts[0].eq_ignore_ascii_case("relation") {
            if parts.len() != 2 {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: "expected `relation <name>`".into(),
                });
            }
            if let Some(s) = flush(&mut current, line_no)? {
                schemas.push(s);
            }
            current = Some((parts[1].to_string(), Vec::new()));
        } else {
            let cur = current.as_mut().ok_or_else(|| DataError::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                msg: "column line before any `relation` stanza".into(),
            })?;
            if parts.len() < 2 || parts.len() > 3 {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: "expected `<column> <type> [nullable]`".into(),
                });
            }
            let ty = ValType::parse(parts[1]).ok_or_else(|| DataError::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("unknown type `{}`", parts[1]),
            })?;
            let nullable = match parts.get(2) {
                None => false,
                Some(s) if s.eq_ignore_ascii_case("nullable") => true,
                Some(s) => {
                    return Err(DataError::Manifest {
                        path: path.to_path_buf(),
                        line: line_no,
                        msg: format!("unexpected `{s}` (only `nullable` is allowed)"),
                    })
                }
            };
            cur.1.push((parts[0].to_string(), ty, nullable));
        }
    }
    if let Some(s) = flush(&mut current, text.lines().count())? {
        schemas.push(s);
    }
    Ok(schemas)
}

fn parse_field(raw: &str, ty: ValType, nullable: bool) -> Result<Value, String> {
    if raw.is_empty() && nullable {
        return Ok(Value::Null);
    }
    match ty {
        ValType::Int => raw
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| format!("bad int `{raw}`")),
        ValType::Decimal => raw
            .parse::<f64>()
            .map(Value::Decimal)
            .map_err(|_| format!("bad decimal `{raw}`")),
        ValType::Text => Ok(Value::text(raw)),
        ValType::Bool => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("bad bool `{raw}` (use true/false)")),
        },
        ValType::Any => Err("schema cannot declare type any".into()),
    }
}

fn render_field(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Int(i) => i.to_string(),
        Value::Decimal(d) => render_decimal(*d),
        Value::Text(s) => s.to_string(),
        Value::Bool(b) => b.to_string(),
    }
}

/// Loads one relation's CSV against its schema. Tuple ids are assigned
/// densely in file order.
pub fn load_relation_csv(schema: Schema, path: &Path) -> Result<Relation, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .clone();
    let want: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    let got: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();
    if got != want {
        return Err(DataError::Csv {
            path: path.to_path_buf(),
            msg: format!(
                "header mismatch: expected [{}], found [{}]",
                want.join(", "),
                got.join(", ")
            ),
        });
    }
    let mut rel = Relation::new(schema);
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(rel.schema.columns.len());
        for (field, col) in record.iter().zip(rel.schema.columns.clone().iter()) {
            let v = parse_field(field, col.ty, col.nullable).map_err(|msg| DataError::Csv {
                path: path.to_path_buf(),
                msg: format!("row {}: column `{}`: {msg}", i + 1, col.name),
            })?;
            row.push(v);
        }
        rel.push_row(row)?;
    }
    Ok(rel)
}

/// Loads a whole data directory: `schema.txt` plus `<relation>.csv` each.
pub fn load_dir(dir: &Path) -> Result<Database, DataError> {
    let manifest_path = dir.join("schema.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let schemas = parse_manifest(&text, &manifest_path)?;
    let mut db = Database::new();
    for schema in schemas {
        let csv_path = dir.join(format!("{}.csv", schema.relation));
        let rel = load_relation_csv(schema, &csv_path)?;
        db.add_relation(rel)?;
    }
    Ok(db)
}

/// Writes a database back out as a manifest plus CSVs.
pub fn dump_dir(db: &Database, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    for (name, rel) in db.iter() {
        manifest.push_str(&format!("relation {name}\n"));
        for c in &rel.schema.columns {
            manifest.push_str(&format!(
                "  {} {}{}\n",
                c.name,
                c.ty.name(),
                if c.nullable { " nullable" } else { "" }
            ));
        }
        manifest.push('\n');
    }
    let manifest_path = dir.join("schema.txt");
    fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))?;
    for (name, rel) in db.iter() {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| DataError::Csv {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let header: Vec<&str> = rel.schema.columns.iter().map(|c| c.name.as_str()).collect();
        w.write_record(&header).map_err(|e| DataError::Csv {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        for (_, row) in &rel.rows {
            let rec: Vec<String> = row.iter().map(render_field).collect();
            w.write_record(&rec).map_err(|e| DataError::Csv {
                path: path.clone(),
                msg: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::relation_from_rows;

    #[test]
    fn manifest_round_trip() {
        let text = "
relation t -- trailing comment
  a int
  b text nullable
  c bool

relation u
  x decimal
";
        let schemas = parse_manifest(text, Path::new("schema.txt")).unwrap();
        assert_eq!(schemas.len(), 2);
        assert_eq!(schemas[0].relation, "t");
        assert_eq!(schemas[0].columns.len(), 3);
        assert!(schemas[0].columns[1].nullable);
        assert_eq!(schemas[1].columns[0].ty, ValType::Decimal);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = Database::new();
        db.add_relation(
            relation_from_rows(
                "t",
                vec![
                    ("a", ValType::Int, false),
                    ("b", ValType::Decimal, true),
                    ("c", ValType::Text, true),
                    ("d", ValType::Bool, false),
                ],
                vec![
                    vec![
                        Value::Int(-7),
                        Value::Decimal(0.1),
                        Value::text("hello, \"world\"\nline"),
                        Value::Bool(true),
                    ],
                    vec![
                        Value::Int(i64::MAX),
                        Value::Null,
                        Value::Null,
                        Value::Bool(false),
                    ],
                    vec![
                        Value::Int(0),
                        Value::Decimal(12345.6789),
                        Value::text("it's quoted"),
                        Value::Bool(true),
                    ],
                ],
            )
            .unwrap(),
        )
        .unwrap();
        dump_dir(&db, dir.path()).unwrap();
        let loaded = load_dir(dir.path()).unwrap();
        let orig = db.relation("t").unwrap();
        let back = loaded.relation("t").unwrap();
        assert_eq!(orig.schema, back.schema);
        assert_eq!(orig.rows, back.rows);
    }
}
