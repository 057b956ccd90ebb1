//! The query executor checked against an independently written
//! brute-force evaluator over randomized tables and queries.

use std::time::Instant;

use cfcdc_core::data::{format_real, parse_real, Cell, ColumnSpec, ColumnType, TableSchema};
use cfcdc_core::rng::Rng;
use cfcdc_core::sql::{execute, AggOp, CondOp, ResultSet, SqlQuery};

const TEXTS: &[&str] = &["red", "blue", "green", "alpha", "beta", "new york", "Gold", " east "];

fn random_table(rng: &mut Rng, id: usize) -> TableSchema {
    let n_cols = 2 + rng.below(4);
    let n_rows = rng.below(12); // zero-row tables included
    let columns: Vec<ColumnSpec> = (0..n_cols)
        .map(|i| ColumnSpec {
            index: i,
            name: format!("c{i}"),
            ctype: if rng.below(2) == 0 { ColumnType::Text } else { ColumnType::Real },
        })
        .collect();
    let rows = (0..n_rows)
        .map(|_| {
            columns
                .iter()
                .map(|c| match c.ctype {
                    ColumnType::Text => {
                        Cell::Text(TEXTS[rng.below(TEXTS.len())].to_string())
                    }
                    ColumnType::Real => Cell::Real((rng.below(41) as f64) - 20.0 + 0.5),
                })
                .collect()
        })
        .collect();
    TableSchema { table_id: format!("t{id}"), columns, rows }
}

fn random_query(rng: &mut Rng, table: &TableSchema) -> SqlQuery {
    let n_cols = table.columns.len();
    // aggregates other than COUNT only over numeric columns
    let (sel_col, agg) = loop {
        let col = rng.below(n_cols);
        let agg = AggOp::from_code(rng.below(6) as u8).unwrap();
        let numeric = table.columns[col].ctype == ColumnType::Real;
        if !agg.needs_real() || numeric {
            break (col, agg);
        }
    };
    let n_conds = rng.below(4);
    let conds = (0..n_conds)
        .map(|_| {
            let col = rng.below(n_cols);
            match table.columns[col].ctype {
                ColumnType::Text => {
                    let val = if !table.rows.is_empty() && rng.below(2) == 0 {
                        let r = rng.below(table.rows.len());
                        table.rows[r][col].as_text()
                    } else {
                        TEXTS[rng.below(TEXTS.len())].to_string()
                    };
                    (col, CondOp::Eq, val)
                }
                ColumnType::Real => {
                    let op = CondOp::from_code(rng.below(3) as u8).unwrap();
                    let val = (rng.below(41) as f64) - 20.0 + 0.5;
                    (col, op, format_real(val))
                }
            }
        })
        .collect();
    SqlQuery { agg, sel_col, conds }
}

/// Straightforward reference evaluator, written separately from the
/// executor: explicit row loop, per-type comparisons, naive aggregates.
fn oracle(q: &SqlQuery, t: &TableSchema) -> ResultSet {
    let mut kept: Vec<Cell> = Vec::new();
    for row in &t.rows {
        let mut all = true;
        for (col, op, lit) in &q.conds {
            let cell = &row[*col];
            let passes = match t.columns[*col].ctype {
                ColumnType::Text => {
                    assert_eq!(*op, CondOp::Eq);
                    cell.as_text().trim().to_lowercase() == lit.trim().to_lowercase()
                }
                ColumnType::Real => {
                    let cv = cell.as_real().unwrap();
                    let lv = parse_real(lit).unwrap();
                    match op {
                        CondOp::Eq => cv == lv,
                        CondOp::Gt => cv > lv,
                        CondOp::Lt => cv < lv,
                    }
                }
            };
            if !passes {
                all = false;
                break;
            }
        }
        if all {
            kept.push(row[q.sel_col].clone());
        }
    }
    match q.agg {
        AggOp::None => ResultSet::Cells(kept),
        AggOp::Count => ResultSet::Scalar(kept.len() as f64),
        _ => {
            let nums: Vec<f64> = kept.iter().map(|c| c.as_real().unwrap()).collect();
            if nums.is_empty() {
                return ResultSet::Empty;
            }
            let v = match q.agg {
                AggOp::Max => nums.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a }),
                AggOp::Min => nums.iter().fold(f64::INFINITY, |a, &b| if b < a { b } else { a }),
                AggOp::Sum => nums.iter().sum(),
                AggOp::Avg => nums.iter().sum::<f64>() / nums.len() as f64,
                _ => unreachable!(),
            };
            ResultSet::Scalar(v)
        }
    }
}

fn results_equal(a: &ResultSet, b: &ResultSet) -> bool {
    match (a, b) {
        (ResultSet::Empty, ResultSet::Empty) => true,
        (ResultSet::Scalar(x), ResultSet::Scalar(y)) => (x - y).abs() < 1e-9,
        (ResultSet::Cells(x), ResultSet::Cells(y)) => {
            let key = |c: &Cell| c.as_text();
            let mut kx: Vec<String> = x.iter().map(key).collect();
            let mut ky: Vec<String> = y.iter().map(key).collect();
            kx.sort();
            ky.sort();
            kx == ky
        }
        _ => false,
    }
}

#[test]
fn executor_agrees_with_brute_force_on_1000_cases() {
    let start = Instant::now();
    let mut rng = Rng::new(0xec);
    for case in 0..1000 {
        let table = random_table(&mut rng, case);
        let query = random_query(&mut rng, &table);
        let got = execute(&query, &table)
            .unwrap_or_else(|e| panic!("case {case}: unexpected error {e}"));
        let want = oracle(&query, &table);
        assert!(
            results_equal(&got, &want),
            "case {case}: {query:?} over {} rows: {got:?} vs {want:?}",
            table.rows.len()
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "oracle comparison took {elapsed:?}");
}

#[test]
fn executor_rejects_type_confusion() {
    let mut rng = Rng::new(0x7e);
    let mut checked = 0;
    for case in 0..200 {
        let table = random_table(&mut rng, 10_000 + case);
        if table.rows.is_empty() {
            continue;
        }
        // numeric comparison against a non-numeric literal must error
        if let Some(col) = table.columns.iter().find(|c| c.ctype == ColumnType::Real) {
            let q = SqlQuery {
                agg: AggOp::None,
                sel_col: 0,
                conds: vec![(col.index, CondOp::Gt, "not a number".into())],
            };
            assert!(execute(&q, &table).is_err());
            checked += 1;
        }
    }
    assert!(checked > 0);
}
