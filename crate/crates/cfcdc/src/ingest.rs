//! JSONL ingestion for the WikiSQL-style on-disk layout.
//!
//! Tables file: one object per line, `{"id", "header", "types", "rows"}`.
//! Examples file: one object per line,
//! `{"question", "table_id", "sql": {"sel", "agg", "conds": [[col, op, value]]}}`.
//! Condition values may be JSON strings or numbers; numbers are normalized
//! through the same real formatting the executor uses.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use cfcdc_core::data::{format_real, Cell, ColumnSpec, ColumnType, TableSchema};
use cfcdc_core::sql::{AggOp, CondOp};
use cfcdc_core::{NlExample, SqlLabel, TableStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}:{line}: {detail}")]
    Invalid { path: String, line: usize, detail: String },
}

#[derive(Serialize, Deserialize)]
struct TableRecord {
    id: String,
    header: Vec<String>,
    types: Vec<String>,
    rows: Vec<Vec<serde_json::Value>>,
}

#[derive(Serialize, Deserialize)]
struct SqlRecord {
    sel: usize,
    agg: u8,
    conds: Vec<(usize, u8, serde_json::Value)>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    question: String,
    table_id: String,
    sql: SqlRecord,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BufReader::new(file).lines())
}

fn value_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(format_real(n.as_f64()?)),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn load_tables(path: &Path) -> Result<TableStore, IngestError> {
    let mut store = TableStore::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TableRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: lineno,
                detail: e.to_string(),
            })?;
        let invalid = |detail: String| IngestError::Invalid {
            path: path.display().to_string(),
            line: lineno,
            detail,
        };
        if rec.header.len() != rec.types.len() {
            return Err(invalid(format!(
                "table {:?}: {} header entries but {} types",
                rec.id,
                rec.header.len(),
                rec.types.len()
            )));
        }
        let mut columns = Vec::with_capacity(rec.header.len());
        for (index, (name, ty)) in rec.header.iter().zip(&rec.types).enumerate() {
            let ctype = match ty.as_str() {
                "text" => ColumnType::Text,
                "real" => ColumnType::Real,
                other => {
                    return Err(invalid(format!(
                        "table {:?} column {index}: unknown type {other:?}",
                        rec.id
                    )))
                }
            };
            columns.push(ColumnSpec { index, name: name.clone(), ctype });
        }
        let mut rows = Vec::with_capacity(rec.rows.len());
        for (r, raw) in rec.rows.iter().enumerate() {
            let mut row = Vec::with_capacity(raw.len());
            for (c, v) in raw.iter().enumerate() {
                let cell = match v {
                    serde_json::Value::Number(n) => Cell::Real(n.as_f64().ok_or_else(|| {
                        invalid(format!("table {:?} row {r} col {c}: non-finite number", rec.id))
                    })?),
                    other => Cell::Text(value_to_string(other).ok_or_else(|| {
                        invalid(format!(
                            "table {:?} row {r} col {c}: unsupported cell {other}",
                            rec.id
                        ))
                    })?),
                };
                row.push(cell);
            }
            rows.push(row);
        }
        let schema = TableSchema { table_id: rec.id.clone(), columns, rows };
        schema
            .validate()
            .map_err(|e| invalid(format!("table {:?}: {e}", rec.id)))?;
        if store.insert(rec.id.clone(), schema).is_some() {
            return Err(invalid(format!("duplicate table id {:?}", rec.id)));
        }
    }
    Ok(store)
}

pub fn load_examples(path: &Path, tables: &TableStore) -> Result<Vec<NlExample>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: lineno,
                detail: e.to_string(),
            })?;
        let invalid = |detail: String| IngestError::Invalid {
            path: path.display().to_string(),
            line: lineno,
            detail,
        };
        let schema = tables
            .get(&rec.table_id)
            .ok_or_else(|| invalid(format!("unknown table_id {:?}", rec.table_id)))?;
        let agg = AggOp::from_code(rec.sql.agg)
            .ok_or_else(|| invalid(format!("unknown aggregate code {}", rec.sql.agg)))?;
        let mut conds = Vec::with_capacity(rec.sql.conds.len());
        for (col, op_code, value) in &rec.sql.conds {
            let op = CondOp::from_code(*op_code)
                .ok_or_else(|| invalid(format!("unknown operator code {op_code}")))?;
            let value = value_to_string(value)
                .ok_or_else(|| invalid(format!("unsupported condition value {value}")))?;
            conds.push((*col, op, value));
        }
        let example = NlExample {
            question: rec.question,
            table_id: rec.table_id,
            label: SqlLabel { sel_col: rec.sql.sel, agg, conds },
        };
        example
            .validate(schema)
            .map_err(|e| invalid(e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}

pub fn write_tables(path: &Path, tables: &TableStore) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for schema in tables.values() {
        let rec = TableRecord {
            id: schema.table_id.clone(),
            header: schema.columns.iter().map(|c| c.name.clone()).collect(),
            types: schema
                .columns
                .iter()
                .map(|c| match c.ctype {
                    ColumnType::Text => "text".to_string(),
                    ColumnType::Real => "real".to_string(),
                })
                .collect(),
            rows: schema
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|cell| match cell {
                            Cell::Real(v) => serde_json::json!(v),
                            Cell::Text(s) => serde_json::json!(s),
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| IngestError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn write_examples(path: &Path, examples: &[NlExample]) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for ex in examples {
        let rec = ExampleRecord {
            question: ex.question.clone(),
            table_id: ex.table_id.clone(),
            sql: SqlRecord {
                sel: ex.label.sel_col,
                agg: ex.label.agg.code(),
                conds: ex
                    .label
                    .conds
                    .iter()
                    .map(|(col, op, value)| (*col, op.code(), serde_json::json!(value)))
                    .collect(),
            },
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| IngestError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
