//! WikiSQL-subset SQL: AST, canonical serialization, in-memory execution,
//! and execution-guided candidate selection.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{parse_real, Cell, ColumnType, TableSchema, MAX_WHERE_NUM};

/// Aggregation operators with WikiSQL integer codes 0..5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AggOp {
    None = 0,
    Max = 1,
    Min = 2,
    Count = 3,
    Sum = 4,
    Avg = 5,
}

impl AggOp {
    pub const ALL: [AggOp; 6] = [
        AggOp::None,
        AggOp::Max,
        AggOp::Min,
        AggOp::Count,
        AggOp::Sum,
        AggOp::Avg,
    ];

    pub fn from_code(code: u8) -> Option<AggOp> {
        AggOp::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn keyword(self) -> &'static str {
        match self {
            AggOp::None => "",
            AggOp::Max => "MAX",
            AggOp::Min => "MIN",
            AggOp::Count => "COUNT",
            AggOp::Sum => "SUM",
            AggOp::Avg => "AVG",
        }
    }

    /// MAX/MIN/SUM/AVG need a numeric column; COUNT and NONE apply to any.
    pub fn needs_real(self) -> bool {
        matches!(self, AggOp::Max | AggOp::Min | AggOp::Sum | AggOp::Avg)
    }
}

/// Condition operators with WikiSQL integer codes 0..2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CondOp {
    Eq = 0,
    Gt = 1,
    Lt = 2,
}

impl CondOp {
    pub const ALL: [CondOp; 3] = [CondOp::Eq, CondOp::Gt, CondOp::Lt];

    pub fn from_code(code: u8) -> Option<CondOp> {
        CondOp::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CondOp::Eq => "=",
            CondOp::Gt => ">",
            CondOp::Lt => "<",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqlQuery {
    pub agg: AggOp,
    pub sel_col: usize,
    pub conds: Vec<(usize, CondOp, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SqlError {
    BadColumn { index: usize, n_columns: usize },
    TooManyConds { n: usize },
    TypeError { detail: String },
    EmptyCandidates,
}

impl core::fmt::Display for SqlError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SqlError::BadColumn { index, n_columns } => {
                write!(f, "column index {index} out of range for {n_columns} columns")
            }
            SqlError::TooManyConds { n } => write!(f, "{n} conditions exceed the maximum"),
            SqlError::TypeError { detail } => write!(f, "type error: {detail}"),
            SqlError::EmptyCandidates => write!(f, "empty candidate list"),
        }
    }
}

/// Execution output: a scalar for aggregated queries, the selected cells
/// otherwise. Comparison is order-insensitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ResultSet {
    Empty,
    Scalar(f64),
    Cells(Vec<Cell>),
}

fn validate(query: &SqlQuery, schema: &TableSchema) -> Result<(), SqlError> {
    let n = schema.columns.len();
    if query.sel_col >= n {
        return Err(SqlError::BadColumn { index: query.sel_col, n_columns: n });
    }
    if query.conds.len() > MAX_WHERE_NUM {
        return Err(SqlError::TooManyConds { n: query.conds.len() });
    }
    for &(col, _, _) in &query.conds {
        if col >= n {
            return Err(SqlError::BadColumn { index: col, n_columns: n });
        }
    }
    Ok(())
}

fn quote_literal(value: &str) -> String {
    let mut out = String::with_capacity(value.len() + 2);
    out.push('\'');
    for c in value.chars() {
        if c == '\'' {
            out.push('\'');
        }
        out.push(c);
    }
    out.push('\'');
    out
}

/// Canonical SQL string:
/// `SELECT <AGG>(<col>) FROM <table_id> WHERE <c1> AND <c2> ...`.
/// NONE omits the aggregate wrapper; text literals are single-quoted with
/// quote doubling; numeric literals are printed bare.
pub fn serialize(query: &SqlQuery, schema: &TableSchema) -> Result<String, SqlError> {
    validate(query, schema)?;
    let col_name = &schema.columns[query.sel_col].name;
    let sel = if query.agg == AggOp::None {
        col_name.clone()
    } else {
        format!("{}({})", query.agg.keyword(), col_name)
    };
    let mut out = format!("SELECT {} FROM {}", sel, schema.table_id);
    for (i, (col, op, value)) in query.conds.iter().enumerate() {
        out.push_str(if i == 0 { " WHERE " } else { " AND " });
        let lit = if schema.columns[*col].ctype == ColumnType::Real && parse_real(value).is_some() {
            value.trim().to_string()
        } else {
            quote_literal(value)
        };
        out.push_str(&format!("{} {} {}", schema.columns[*col].name, op.symbol(), lit));
    }
    Ok(out)
}

fn text_eq(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

fn cond_matches(cell: &Cell, ctype: ColumnType, op: CondOp, literal: &str) -> Result<bool, SqlError> {
    match op {
        CondOp::Eq => {
            if ctype == ColumnType::Real {
                let cv = cell.as_real().ok_or_else(|| SqlError::TypeError {
                    detail: format!("cell {:?} is not numeric", cell.as_text()),
                })?;
                let lv = parse_real(literal).ok_or_else(|| SqlError::TypeError {
                    detail: format!("literal {literal:?} is not numeric"),
                })?;
                Ok(cv == lv)
            } else {
                Ok(text_eq(&cell.as_text(), literal))
            }
        }
        CondOp::Gt | CondOp::Lt => {
            let cv = cell.as_real().ok_or_else(|| SqlError::TypeError {
                detail: format!("cell {:?} is not numeric", cell.as_text()),
            })?;
            let lv = parse_real(literal).ok_or_else(|| SqlError::TypeError {
                detail: format!("literal {literal:?} is not numeric"),
            })?;
            Ok(if op == CondOp::Gt { cv > lv } else { cv < lv })
        }
    }
}

/// Execute a query over an in-memory table. Conditions are conjunctive.
/// Numeric aggregates over zero rows yield `Empty`; COUNT yields 0.
pub fn execute(query: &SqlQuery, table: &TableSchema) -> Result<ResultSet, SqlError> {
    validate(query, table)?;
    let mut selected: Vec<&Cell> = Vec::new();
    'rows: for row in &table.rows {
        for (col, op, literal) in &query.conds {
            if !cond_matches(&row[*col], table.columns[*col].ctype, *op, literal)? {
                continue 'rows;
            }
        }
        selected.push(&row[query.sel_col]);
    }

    match query.agg {
        AggOp::None => Ok(ResultSet::Cells(selected.into_iter().cloned().collect())),
        AggOp::Count => Ok(ResultSet::Scalar(selected.len() as f64)),
        agg => {
            let mut nums = Vec::with_capacity(selected.len());
            for cell in &selected {
                nums.push(cell.as_real().ok_or_else(|| SqlError::TypeError {
                    detail: format!("{} over non-numeric cell {:?}", agg.keyword(), cell.as_text()),
                })?);
            }
            if nums.is_empty() {
                return Ok(ResultSet::Empty);
            }
            let v = match agg {
                AggOp::Max => nums.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                AggOp::Min => nums.iter().cloned().fold(f64::INFINITY, f64::min),
                AggOp::Sum => nums.iter().sum(),
                AggOp::Avg => nums.iter().sum::<f64>() / nums.len() as f64,
                _ => unreachable!(),
            };
            Ok(ResultSet::Scalar(v))
        }
    }
}

const NUM_TOL: f64 = 1e-6;

fn cell_key(cell: &Cell) -> (Option<i64>, String) {
    // Numeric cells (or numeric-looking text) compare by quantized value,
    // text by normalized form.
    match cell.as_real() {
        Some(v) => ((libm::round(v / NUM_TOL) as i64).into(), String::new()),
        None => (None, cell.as_text().trim().to_lowercase()),
    }
}

/// Multiset equality of two results; numbers within absolute 1e-6.
pub fn exec_match(r1: &ResultSet, r2: &ResultSet) -> bool {
    match (r1, r2) {
        (ResultSet::Empty, ResultSet::Empty) => true,
        (ResultSet::Scalar(a), ResultSet::Scalar(b)) => (a - b).abs() <= NUM_TOL,
        (ResultSet::Cells(a), ResultSet::Cells(b)) => {
            if a.len() != b.len() {
                return false;
            }
            let mut ka: Vec<_> = a.iter().map(cell_key).collect();
            let mut kb: Vec<_> = b.iter().map(cell_key).collect();
            ka.sort();
            kb.sort();
            ka == kb
        }
        _ => false,
    }
}

/// True when a result would be rejected by execution-guided decoding:
/// empty, or a SELECT with no surviving rows.
pub fn is_empty_result(r: &ResultSet) -> bool {
    match r {
        ResultSet::Empty => true,
        ResultSet::Cells(cells) => cells.is_empty(),
        ResultSet::Scalar(_) => false,
    }
}

/// Execution-guided decoding: scan the top-k candidates in score order and
/// return the first that executes without error to a non-empty result.
/// Falls back to the top-1 candidate when none qualifies.
pub fn eg_decode(
    candidates: &[(SqlQuery, f64)],
    table: &TableSchema,
    k: usize,
) -> Result<SqlQuery, SqlError> {
    if candidates.is_empty() {
        return Err(SqlError::EmptyCandidates);
    }
    debug_assert!(k >= 1);
    for (query, _) in candidates.iter().take(k) {
        if let Ok(result) = execute(query, table) {
            if !is_empty_result(&result) {
                return Ok(query.clone());
            }
        }
    }
    Ok(candidates[0].0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSpec;
    use alloc::vec;

    fn demo_table() -> TableSchema {
        TableSchema {
            table_id: "t".into(),
            columns: vec![
                ColumnSpec { index: 0, name: "department".into(), ctype: ColumnType::Text },
                ColumnSpec { index: 1, name: "age".into(), ctype: ColumnType::Real },
            ],
            rows: vec![
                vec![Cell::Text("CS".into()), Cell::Real(30.0)],
                vec![Cell::Text("EE".into()), Cell::Real(20.0)],
                vec![Cell::Text("CS".into()), Cell::Real(20.0)],
            ],
        }
    }

    #[test]
    fn serialize_fig1_pattern() {
        let q = SqlQuery {
            agg: AggOp::Avg,
            sel_col: 1,
            conds: vec![(0, CondOp::Eq, "CS".into())],
        };
        assert_eq!(
            serialize(&q, &demo_table()).unwrap(),
            "SELECT AVG(age) FROM t WHERE department = 'CS'"
        );
    }

    #[test]
    fn serialize_plain_select() {
        let q = SqlQuery { agg: AggOp::None, sel_col: 0, conds: vec![] };
        assert_eq!(serialize(&q, &demo_table()).unwrap(), "SELECT department FROM t");
    }

    #[test]
    fn serialize_doubles_quotes() {
        let q = SqlQuery {
            agg: AggOp::None,
            sel_col: 1,
            conds: vec![(0, CondOp::Eq, "O'Brien".into())],
        };
        let s = serialize(&q, &demo_table()).unwrap();
        assert!(s.ends_with("department = 'O''Brien'"), "{s}");
    }

    #[test]
    fn execute_avg_with_condition() {
        let q = SqlQuery {
            agg: AggOp::Avg,
            sel_col: 1,
            conds: vec![(0, CondOp::Eq, "CS".into())],
        };
        assert_eq!(execute(&q, &demo_table()).unwrap(), ResultSet::Scalar(25.0));
    }

    #[test]
    fn count_over_no_rows_is_zero() {
        let q = SqlQuery {
            agg: AggOp::Count,
            sel_col: 1,
            conds: vec![(0, CondOp::Eq, "nope".into())],
        };
        assert_eq!(execute(&q, &demo_table()).unwrap(), ResultSet::Scalar(0.0));
    }

    #[test]
    fn numeric_op_on_text_cell_is_type_error() {
        let q = SqlQuery {
            agg: AggOp::None,
            sel_col: 1,
            conds: vec![(0, CondOp::Gt, "5".into())],
        };
        assert!(matches!(execute(&q, &demo_table()), Err(SqlError::TypeError { .. })));
    }

    #[test]
    fn avg_over_no_rows_is_empty() {
        let q = SqlQuery {
            agg: AggOp::Avg,
            sel_col: 1,
            conds: vec![(0, CondOp::Eq, "nope".into())],
        };
        assert_eq!(execute(&q, &demo_table()).unwrap(), ResultSet::Empty);
    }

    #[test]
    fn exec_match_is_order_insensitive() {
        let a = ResultSet::Cells(vec![Cell::Text("x".into()), Cell::Text("y".into())]);
        let b = ResultSet::Cells(vec![Cell::Text("y".into()), Cell::Text("x".into())]);
        assert!(exec_match(&a, &b));
    }

    #[test]
    fn exec_match_numeric_tolerance() {
        assert!(exec_match(&ResultSet::Scalar(25.0), &ResultSet::Scalar(25.0 + 1e-9)));
        assert!(!exec_match(&ResultSet::Scalar(25.0), &ResultSet::Scalar(25.1)));
    }

    #[test]
    fn eg_decode_prefers_first_working_candidate() {
        let table = demo_table();
        // top-1 is a type error (GT on text column), top-2 executes non-empty
        let bad = SqlQuery {
            agg: AggOp::None,
            sel_col: 0,
            conds: vec![(0, CondOp::Gt, "5".into())],
        };
        let good = SqlQuery { agg: AggOp::None, sel_col: 0, conds: vec![] };
        let out = eg_decode(&[(bad.clone(), 0.9), (good.clone(), 0.5)], &table, 8).unwrap();
        assert_eq!(out, good);
    }

    #[test]
    fn eg_decode_falls_back_to_top1() {
        let table = demo_table();
        let bad = SqlQuery {
            agg: AggOp::None,
            sel_col: 0,
            conds: vec![(0, CondOp::Gt, "5".into())],
        };
        let out = eg_decode(&[(bad.clone(), 0.9)], &table, 8).unwrap();
        assert_eq!(out, bad);
    }

    #[test]
    fn eg_decode_keeps_working_top1() {
        let table = demo_table();
        let good = SqlQuery { agg: AggOp::None, sel_col: 0, conds: vec![] };
        let other = SqlQuery { agg: AggOp::None, sel_col: 1, conds: vec![] };
        let out = eg_decode(&[(good.clone(), 0.9), (other, 0.5)], &table, 8).unwrap();
        assert_eq!(out, good);
    }

    #[test]
    fn empty_candidates_is_an_error() {
        assert!(matches!(eg_decode(&[], &demo_table(), 4), Err(SqlError::EmptyCandidates)));
    }
}
