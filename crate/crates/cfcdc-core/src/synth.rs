//! Desk-scale synthetic dataset generation.
//!
//! Questions are produced from fixed templates over sampled tables so that
//! every label component (select column, aggregate, conditions, values) is
//! recoverable from the question text, and every gold query executes to a
//! non-empty result because condition values are taken from a witness row.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{
    format_real, Cell, ColumnSpec, ColumnType, NlExample, SqlLabel, TableSchema, TableStore,
};
use crate::rng::Rng;
use crate::sql::{AggOp, CondOp};

const TEXT_COL_NAMES: &[&str] = &[
    "department", "color", "city", "team", "position", "status", "grade", "category", "region",
    "brand",
];
const REAL_COL_NAMES: &[&str] = &[
    "age", "salary", "score", "points", "size", "rank", "year", "weight", "price", "count",
];
const TEXT_VALUES: &[&str] = &[
    "red", "blue", "green", "alpha", "beta", "gamma", "north", "south", "east", "west", "silver",
    "gold", "sales", "支持", "new york", "los angeles", "san diego", "fort worth",
];

fn agg_phrase(agg: AggOp) -> &'static str {
    match agg {
        AggOp::None => "show",
        AggOp::Max => "maximum",
        AggOp::Min => "minimum",
        AggOp::Count => "count of",
        AggOp::Sum => "total",
        AggOp::Avg => "average",
    }
}

fn op_phrase(op: CondOp) -> &'static str {
    match op {
        CondOp::Eq => "equals",
        CondOp::Gt => "above",
        CondOp::Lt => "below",
    }
}

fn sample_table(rng: &mut Rng, table_id: String) -> TableSchema {
    let n_cols = 4 + rng.below(3); // 4..=6
    let n_rows = 6 + rng.below(11); // 6..=16

    // At least one text and one real column; names unique within the table.
    let mut text_names: Vec<&str> = TEXT_COL_NAMES.to_vec();
    let mut real_names: Vec<&str> = REAL_COL_NAMES.to_vec();
    rng.shuffle(&mut text_names);
    rng.shuffle(&mut real_names);
    let n_real = 1 + rng.below(n_cols - 1);
    let n_text = n_cols - n_real;
    let mut columns = Vec::with_capacity(n_cols);
    for i in 0..n_text {
        columns.push((text_names[i].to_string(), ColumnType::Text));
    }
    for i in 0..n_real {
        columns.push((real_names[i].to_string(), ColumnType::Real));
    }
    rng.shuffle(&mut columns);
    let columns: Vec<ColumnSpec> = columns
        .into_iter()
        .enumerate()
        .map(|(index, (name, ctype))| ColumnSpec { index, name, ctype })
        .collect();

    let rows = (0..n_rows)
        .map(|_| {
            columns
                .iter()
                .map(|c| match c.ctype {
                    ColumnType::Text => Cell::Text(rng.choose(TEXT_VALUES).to_string()),
                    ColumnType::Real => Cell::Real((10 + rng.below(990)) as f64),
                })
                .collect()
        })
        .collect();

    TableSchema { table_id, columns, rows }
}

fn sample_example(rng: &mut Rng, table: &TableSchema, ordinal: usize) -> NlExample {
    let real_cols: Vec<usize> = table
        .columns
        .iter()
        .filter(|c| c.ctype == ColumnType::Real)
        .map(|c| c.index)
        .collect();

    // Round-robin over aggregates and condition counts keeps coverage of
    // every head near-uniform even on small datasets.
    let agg = AggOp::ALL[ordinal % 6];
    let sel_col = if agg.needs_real() {
        *rng.choose(&real_cols)
    } else {
        rng.below(table.columns.len())
    };
    let n_conds = (ordinal % 5).min(table.columns.len());

    // Witness row: condition values are derived from its cells so the
    // conjunction is satisfiable and the gold query returns rows.
    let witness = rng.below(table.rows.len());
    let mut cond_cols: Vec<usize> = (0..table.columns.len()).collect();
    rng.shuffle(&mut cond_cols);
    cond_cols.truncate(n_conds);
    cond_cols.sort_unstable();

    let mut conds = Vec::with_capacity(n_conds);
    for &col in &cond_cols {
        let cell = &table.rows[witness][col];
        let (op, value) = match table.columns[col].ctype {
            ColumnType::Text => (CondOp::Eq, cell.as_text()),
            ColumnType::Real => {
                let v = cell.as_real().unwrap();
                match CondOp::ALL[rng.below(3)] {
                    CondOp::Eq => (CondOp::Eq, format_real(v)),
                    CondOp::Gt => (CondOp::Gt, format_real(v - (1 + rng.below(5)) as f64)),
                    CondOp::Lt => (CondOp::Lt, format_real(v + (1 + rng.below(5)) as f64)),
                }
            }
        };
        conds.push((col, op, value));
    }

    let mut question = format!("{} {}", agg_phrase(agg), table.columns[sel_col].name);
    for (i, (col, op, value)) in conds.iter().enumerate() {
        question.push_str(if i == 0 { " when " } else { " and " });
        question.push_str(&format!("{} {} {}", table.columns[*col].name, op_phrase(*op), value));
    }

    NlExample {
        question,
        table_id: table.table_id.clone(),
        label: SqlLabel { sel_col, agg, conds },
    }
}

/// Generate a deterministic synthetic dataset: a table store, `n_examples`
/// training examples, and a dev split of about a fifth of the train size.
pub fn synth_dataset(
    seed: u64,
    n_examples: usize,
    schema_pool_size: usize,
) -> (TableStore, Vec<NlExample>, Vec<NlExample>) {
    assert!(n_examples >= 1);
    assert!(schema_pool_size >= 1);
    let mut store = TableStore::new();
    let mut tables = Vec::with_capacity(schema_pool_size);
    for t in 0..schema_pool_size {
        let mut rng = Rng::derive(seed, &[3, t as u64]);
        let table = sample_table(&mut rng, format!("synth-{t}"));
        tables.push(table.clone());
        store.insert(table.table_id.clone(), table);
    }

    let mut train = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let mut rng = Rng::derive(seed, &[1, i as u64]);
        let table = &tables[rng.below(tables.len())];
        train.push(sample_example(&mut rng, table, i));
    }

    let n_dev = (n_examples / 5).max(1);
    let mut dev = Vec::with_capacity(n_dev);
    for i in 0..n_dev {
        let mut rng = Rng::derive(seed, &[2, i as u64]);
        let table = &tables[rng.below(tables.len())];
        dev.push(sample_example(&mut rng, table, i));
    }

    (store, train, dev)
}
