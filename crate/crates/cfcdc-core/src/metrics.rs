//! Logical-form and component accuracy metrics.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{format_real, parse_real};
use crate::sql::{CondOp, SqlQuery};

/// Canonical form for condition-value comparison: trimmed, lowercased,
/// and numerically normalized ("25.0" and "25" compare equal).
pub fn canonical_value(s: &str) -> String {
    let t = s.trim().to_lowercase();
    match parse_real(&t) {
        Some(v) => format_real(v),
        None => t,
    }
}

fn cond_multiset(q: &SqlQuery) -> BTreeMap<(usize, u8, String), usize> {
    let mut m = BTreeMap::new();
    for (col, op, val) in &q.conds {
        *m.entry((*col, op.code(), canonical_value(val))).or_insert(0) += 1;
    }
    m
}

/// Logical-form match: aggregate and select column exact, conditions equal
/// as a multiset with canonicalized values (order-insensitive).
pub fn lf_match(pred: &SqlQuery, gold: &SqlQuery) -> bool {
    pred.agg == gold.agg && pred.sel_col == gold.sel_col && cond_multiset(pred) == cond_multiset(gold)
}

/// Per-example component correctness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentMatch {
    pub s_col: bool,
    pub s_agg: bool,
    pub w_col: bool,
    pub w_op: bool,
    pub w_val: bool,
}

pub fn component_match(pred: &SqlQuery, gold: &SqlQuery) -> ComponentMatch {
    let cols = |q: &SqlQuery| -> BTreeSet<usize> { q.conds.iter().map(|c| c.0).collect() };
    let ops = |q: &SqlQuery| -> BTreeMap<(usize, CondOp), usize> {
        let mut m = BTreeMap::new();
        for (col, op, _) in &q.conds {
            *m.entry((*col, *op)).or_insert(0) += 1;
        }
        m
    };
    let vals = |q: &SqlQuery| -> BTreeMap<(usize, String), usize> {
        let mut m = BTreeMap::new();
        for (col, _, val) in &q.conds {
            *m.entry((*col, canonical_value(val))).or_insert(0) += 1;
        }
        m
    };
    ComponentMatch {
        s_col: pred.sel_col == gold.sel_col,
        s_agg: pred.agg == gold.agg,
        w_col: cols(pred) == cols(gold),
        w_op: ops(pred) == ops(gold),
        w_val: vals(pred) == vals(gold),
    }
}

/// Accumulated accuracies over an evaluation split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub lf: f64,
    pub ex: f64,
    pub s_col: f64,
    pub s_agg: f64,
    pub w_col: f64,
    pub w_op: f64,
    pub w_val: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    n: usize,
    lf: usize,
    ex: usize,
    s_col: usize,
    s_agg: usize,
    w_col: usize,
    w_op: usize,
    w_val: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &SqlQuery, gold: &SqlQuery, exec_match: bool) {
        self.n += 1;
        self.lf += lf_match(pred, gold) as usize;
        self.ex += exec_match as usize;
        let c = component_match(pred, gold);
        self.s_col += c.s_col as usize;
        self.s_agg += c.s_agg as usize;
        self.w_col += c.w_col as usize;
        self.w_op += c.w_op as usize;
        self.w_val += c.w_val as usize;
    }

    pub fn report(&self) -> MetricsReport {
        let f = |x: usize| if self.n == 0 { 0.0 } else { x as f64 / self.n as f64 };
        MetricsReport {
            n: self.n,
            lf: f(self.lf),
            ex: f(self.ex),
            s_col: f(self.s_col),
            s_agg: f(self.s_agg),
            w_col: f(self.w_col),
            w_op: f(self.w_op),
            w_val: f(self.w_val),
        }
    }
}

/// Flat key/value lines for text output, and stable ordering for JSON.
impl MetricsReport {
    pub fn lines(&self) -> Vec<(&'static str, f64)> {
        alloc::vec![
            ("lf", self.lf),
            ("ex", self.ex),
            ("s_col", self.s_col),
            ("s_agg", self.s_agg),
            ("w_col", self.w_col),
            ("w_op", self.w_op),
            ("w_val", self.w_val),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sql::AggOp;

    fn q(agg: u8, sel: usize, conds: &[(usize, u8, &str)]) -> SqlQuery {
        SqlQuery {
            agg: AggOp::from_code(agg).unwrap(),
            sel_col: sel,
            conds: conds
                .iter()
                .map(|&(c, o, v)| (c, CondOp::from_code(o).unwrap(), v.into()))
                .collect(),
        }
    }

    #[test]
    fn identical_queries_match() {
        let a = q(3, 1, &[(0, 0, "bob"), (2, 1, "25")]);
        assert!(lf_match(&a, &a));
    }

    #[test]
    fn condition_order_does_not_matter() {
        let a = q(0, 1, &[(0, 0, "bob"), (2, 1, "25")]);
        let b = q(0, 1, &[(2, 1, "25"), (0, 0, "bob")]);
        assert!(lf_match(&a, &b));
    }

    #[test]
    fn values_compare_canonically() {
        let a = q(0, 1, &[(0, 0, " Bob "), (2, 1, "25.0")]);
        let b = q(0, 1, &[(0, 0, "bob"), (2, 1, "25")]);
        assert!(lf_match(&a, &b));
        assert_eq!(canonical_value("  25.0 "), "25");
        assert_eq!(canonical_value("New York"), "new york");
    }

    #[test]
    fn multiset_semantics_catch_duplicates() {
        let a = q(0, 1, &[(0, 0, "x"), (0, 0, "x")]);
        let b = q(0, 1, &[(0, 0, "x")]);
        assert!(!lf_match(&a, &b));
    }

    #[test]
    fn differing_parts_fail_lf() {
        let gold = q(1, 1, &[(0, 0, "x")]);
        assert!(!lf_match(&q(2, 1, &[(0, 0, "x")]), &gold));
        assert!(!lf_match(&q(1, 2, &[(0, 0, "x")]), &gold));
        assert!(!lf_match(&q(1, 1, &[(0, 1, "x")]), &gold));
        assert!(!lf_match(&q(1, 1, &[(0, 0, "y")]), &gold));
        assert!(!lf_match(&q(1, 1, &[]), &gold));
    }

    #[test]
    fn component_flags_isolate_errors() {
        let gold = q(1, 1, &[(0, 0, "x"), (2, 1, "9")]);
        // wrong op on column 2, right columns and values
        let pred = q(1, 1, &[(0, 0, "x"), (2, 2, "9")]);
        let c = component_match(&pred, &gold);
        assert!(c.s_col && c.s_agg && c.w_col && c.w_val);
        assert!(!c.w_op);
        // wrong value only
        let pred = q(1, 1, &[(0, 0, "z"), (2, 1, "9")]);
        let c = component_match(&pred, &gold);
        assert!(c.w_col && c.w_op && !c.w_val);
    }

    #[test]
    fn accumulator_averages() {
        let gold = q(1, 1, &[(0, 0, "x")]);
        let mut acc = MetricsAccumulator::default();
        acc.add(&gold, &gold, true);
        acc.add(&q(0, 1, &[(0, 0, "x")]), &gold, false);
        let r = acc.report();
        assert_eq!(r.n, 2);
        assert!((r.lf - 0.5).abs() < 1e-12);
        assert!((r.ex - 0.5).abs() < 1e-12);
        assert!((r.s_agg - 0.5).abs() < 1e-12);
        assert!((r.s_col - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_report_is_zero() {
        let r = MetricsAccumulator::default().report();
        assert_eq!(r.n, 0);
        assert_eq!(r.lf, 0.0);
    }
}
