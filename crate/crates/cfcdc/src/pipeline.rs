//! End-to-end prediction and evaluation: run the three clause modules over
//! every column candidate, optionally vote with the coupling module,
//! assemble the query, and score LF/EX/component accuracy over a split.

use cfcdc_core::cfcc::{self, CfccModule, SqlComponents};
use cfcdc_core::cfcd::{predict_candidate, CandidatePrediction, CfcdError};
use cfcdc_core::data::{build_candidate_input, tokenize, Vocabulary, MAX_WHERE_NUM};
use cfcdc_core::ifcd::IfcdError;
use cfcdc_core::metrics::{lf_match, MetricsAccumulator, MetricsReport};
use cfcdc_core::sql::{self, AggOp, CondOp, SqlQuery};
use cfcdc_core::{mathx, CfcdModule, NlExample, TableSchema, TableStore};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("model error: {0}")]
    Model(String),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("table has no columns")]
    EmptyTable,
}

impl From<CfcdError> for PipelineError {
    fn from(e: CfcdError) -> Self {
        PipelineError::Model(format!("{e:?}"))
    }
}

impl From<IfcdError> for PipelineError {
    fn from(e: IfcdError) -> Self {
        PipelineError::Model(format!("{e:?}"))
    }
}

/// Trained model set: three clause modules, the optional coupling module,
/// and everything needed to tokenize raw questions.
pub struct ModelBundle {
    pub sel: CfcdModule,
    pub whr: CfcdModule,
    pub sw: CfcdModule,
    pub cfcc: Option<CfccModule>,
    pub vocab: Vocabulary,
    pub max_seq_len: usize,
    /// Weight on the coupling-module distributions during voting.
    pub alpha: f64,
}

pub struct Prediction {
    pub query: SqlQuery,
    pub warnings: Vec<String>,
    /// Per-slot alternatives for execution-guided decoding.
    slots: EgSlots,
}

struct EgSlots {
    /// (column, probability, agg top-2 of that column) for the top-2 select columns.
    sel: Vec<(usize, f64, Vec<(usize, f64)>)>,
    /// (where count, probability) top-2.
    nums: Vec<(usize, f64)>,
    /// Ranked where candidates: (column, relevance, op, value).
    whr_ranked: Vec<(usize, f64, usize, String)>,
}

fn extract_value(question: &str, pred: &CandidatePrediction, tokens_spans: &[(usize, usize)]) -> String {
    let (Some(sd), Some(ed)) = (&pred.start_dist, &pred.end_dist) else {
        return String::new();
    };
    if sd.is_empty() || tokens_spans.is_empty() {
        return String::new();
    }
    let start = mathx::argmax(sd);
    // best end at or after the start
    let end = start + mathx::argmax(&ed[start..]);
    let (b0, _) = tokens_spans[start];
    let (_, b1) = tokens_spans[end];
    question[b0..b1].to_string()
}

/// Run every column candidate through the clause modules, vote with the
/// coupling module when present, and return assembled components.
fn predict_components(
    bundle: &ModelBundle,
    schema: &TableSchema,
    question: &str,
) -> Result<(SqlComponents, EgSlots), PipelineError> {
    if schema.columns.is_empty() {
        return Err(PipelineError::EmptyTable);
    }
    let mut c = SqlComponents {
        sel_scores: Vec::new(),
        sel_num_dists: Vec::new(),
        agg_dists: Vec::new(),
        whr_scores: Vec::new(),
        whr_num_dists: Vec::new(),
        op_dists: Vec::new(),
        values: Vec::new(),
    };
    let alpha = bundle.alpha;
    for col in &schema.columns {
        let input = build_candidate_input(col, question);
        let tokens = tokenize(&input, &bundle.vocab, bundle.max_seq_len);
        let sel = predict_candidate(&bundle.sel, &tokens)?;
        let whr = predict_candidate(&bundle.whr, &tokens)?;
        let sw = predict_candidate(&bundle.sw, &tokens)?;

        let (mut sel_rank, mut sel_num, mut agg) =
            (sel.rank_p, sel.num_dist.clone(), sel.agg_dist.clone().unwrap_or_default());
        let (mut whr_rank, mut whr_num, mut op) =
            (whr.rank_p, whr.num_dist.clone(), whr.op_dist.clone().unwrap_or_default());
        if let Some(cm) = &bundle.cfcc {
            let sel_in = cfcc::couple(&sel.pooled, &sw.pooled);
            let whr_in = cfcc::couple(&whr.pooled, &sw.pooled);
            let es = cfcc::branch_predict(&cm.sel, &sel_in)?;
            let ew = cfcc::branch_predict(&cm.whr, &whr_in)?;
            sel_rank = alpha * es.rank_p + (1.0 - alpha) * sel_rank;
            whr_rank = alpha * ew.rank_p + (1.0 - alpha) * whr_rank;
            sel_num = cfcc::weighted_vote(&es.num_dist, &sel_num, alpha);
            whr_num = cfcc::weighted_vote(&ew.num_dist, &whr_num, alpha);
            agg = cfcc::weighted_vote(&es.class_dist, &agg, alpha);
            op = cfcc::weighted_vote(&ew.class_dist, &op, alpha);
        }
        c.sel_scores.push((col.index, sel_rank));
        c.sel_num_dists.push(sel_num);
        c.agg_dists.push(agg);
        c.whr_scores.push((col.index, whr_rank));
        c.whr_num_dists.push(whr_num);
        c.op_dists.push(op);
        c.values.push(extract_value(question, &whr, &tokens.question_spans));
    }
    let slots = build_slots(&c);
    Ok((c, slots))
}

fn top2(scores: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = scores.collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    v.truncate(2);
    v
}

fn build_slots(c: &SqlComponents) -> EgSlots {
    let sel_top = top2(c.sel_scores.iter().copied());
    let sel = sel_top
        .into_iter()
        .map(|(col, p)| {
            let pos = c.sel_scores.iter().position(|&(i, _)| i == col).unwrap();
            let aggs = top2(c.agg_dists[pos].iter().copied().enumerate());
            (col, p, aggs)
        })
        .collect();

    // relevance-weighted where-count vote, same rule assembly uses
    let rel: Vec<f64> = c.whr_scores.iter().map(|&(_, s)| s).collect();
    let k = c.whr_num_dists.first().map_or(0, |d| d.len());
    let mut count_scores = vec![0.0; k];
    for (dist, &r) in c.whr_num_dists.iter().zip(rel.iter()) {
        for (s, &p) in count_scores.iter_mut().zip(dist.iter()) {
            *s += r * p;
        }
    }
    let total: f64 = count_scores.iter().sum();
    let nums = top2(
        count_scores
            .iter()
            .enumerate()
            .map(|(n, &s)| (n, if total > 0.0 { s / total } else { 0.0 })),
    );

    let mut whr_ranked: Vec<(usize, f64, usize, String)> = c
        .whr_scores
        .iter()
        .enumerate()
        .map(|(pos, &(col, s))| {
            (col, s, mathx::argmax(&c.op_dists[pos]), c.values[pos].clone())
        })
        .collect();
    whr_ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    EgSlots { sel, nums, whr_ranked }
}

pub fn predict_example(
    bundle: &ModelBundle,
    schema: &TableSchema,
    question: &str,
) -> Result<Prediction, PipelineError> {
    let (components, slots) = predict_components(bundle, schema, question)?;
    let (query, warnings) = cfcc::assemble_sql(&components);
    Ok(Prediction { query, warnings, slots })
}

/// Joint candidates: Cartesian product of the top-2 select columns, top-2
/// aggregates, and top-2 where counts, ranked by the product of slot
/// probabilities and capped at `k`.
pub fn eg_candidates(pred: &Prediction, k: usize) -> Vec<(SqlQuery, f64)> {
    let mut out: Vec<(SqlQuery, f64)> = Vec::new();
    for &(col, p_col, ref aggs) in &pred.slots.sel {
        for &(agg_code, p_agg) in aggs {
            for &(n_w, p_n) in &pred.slots.nums {
                let n = n_w.min(pred.slots.whr_ranked.len()).min(MAX_WHERE_NUM);
                let mut conds: Vec<(usize, CondOp, String)> = pred.slots.whr_ranked[..n]
                    .iter()
                    .map(|&(c, _, op, ref v)| {
                        (c, CondOp::from_code(op as u8).unwrap_or(CondOp::Eq), v.clone())
                    })
                    .collect();
                conds.sort_by_key(|&(c, _, _)| c);
                let query = SqlQuery {
                    agg: AggOp::from_code(agg_code as u8).unwrap_or(AggOp::None),
                    sel_col: col,
                    conds,
                };
                out.push((query, p_col * p_agg * p_n));
            }
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    out.dedup_by(|a, b| a.0 == b.0);
    out.truncate(k);
    out
}

/// Predict with execution-guided decoding: among the joint candidates, take
/// the best-scoring one that executes to a non-empty result.
pub fn predict_with_eg(
    bundle: &ModelBundle,
    schema: &TableSchema,
    question: &str,
    k: usize,
) -> Result<Prediction, PipelineError> {
    let mut pred = predict_example(bundle, schema, question)?;
    let mut candidates = eg_candidates(&pred, k);
    // the plain assembly is always the fallback top-1 candidate
    candidates.insert(0, (pred.query.clone(), f64::INFINITY));
    candidates.dedup_by(|a, b| a.0 == b.0);
    candidates.truncate(k.max(1));
    if let Ok(choice) = sql::eg_decode(&candidates, schema, k.max(1)) {
        pred.query = choice;
    }
    Ok(pred)
}

/// One prediction record in the output JSONL.
#[derive(Serialize)]
pub struct PredictionRecord {
    pub query: String,
    pub sel: usize,
    pub agg: u8,
    pub conds: Vec<(usize, u8, String)>,
    pub scores: Vec<f64>,
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Examples where LF matched but EX did not (must stay zero).
    pub lf_without_ex: usize,
    /// EG candidates that failed to execute (must stay zero with EG on).
    pub eg_exec_failures: usize,
    pub records: Vec<PredictionRecord>,
}

pub fn evaluate_split(
    bundle: &ModelBundle,
    tables: &TableStore,
    examples: &[NlExample],
    eg: Option<usize>,
) -> Result<EvalOutcome, PipelineError> {
    struct Row {
        pred: SqlQuery,
        gold: SqlQuery,
        lf: bool,
        ex: bool,
        eg_failed: bool,
        record: PredictionRecord,
    }
    let rows: Vec<Result<Row, PipelineError>> = examples
        .par_iter()
        .map(|ex| {
            let schema = tables
                .get(&ex.table_id)
                .ok_or_else(|| PipelineError::UnknownTable(ex.table_id.clone()))?;
            let prediction = match eg {
                Some(k) => predict_with_eg(bundle, schema, &ex.question, k)?,
                None => predict_example(bundle, schema, &ex.question)?,
            };
            let pred = prediction.query;
            let gold = SqlQuery {
                agg: ex.label.agg,
                sel_col: ex.label.sel_col,
                conds: ex.label.conds.clone(),
            };
            let pred_result = sql::execute(&pred, schema);
            let gold_result = sql::execute(&gold, schema);
            let exec_ok = pred_result.is_ok();
            let ex_match = match (&pred_result, &gold_result) {
                (Ok(p), Ok(g)) => sql::exec_match(p, g),
                _ => false,
            };
            let lf = lf_match(&pred, &gold);
            let scores = prediction
                .slots
                .sel
                .iter()
                .map(|&(_, p, _)| p)
                .chain(prediction.slots.nums.iter().map(|&(_, p)| p))
                .collect();
            let record = PredictionRecord {
                query: sql::serialize(&pred, schema).unwrap_or_default(),
                sel: pred.sel_col,
                agg: pred.agg.code(),
                conds: pred
                    .conds
                    .iter()
                    .map(|(c, op, v)| (*c, op.code(), v.clone()))
                    .collect(),
                scores,
            };
            Ok(Row {
                pred,
                gold,
                lf,
                ex: ex_match,
                eg_failed: eg.is_some() && !exec_ok,
                record,
            })
        })
        .collect();

    let mut acc = MetricsAccumulator::default();
    let mut lf_without_ex = 0usize;
    let mut eg_exec_failures = 0usize;
    let mut records = Vec::with_capacity(examples.len());
    for row in rows {
        let row = row?;
        acc.add(&row.pred, &row.gold, row.ex);
        if row.lf && !row.ex {
            lf_without_ex += 1;
        }
        eg_exec_failures += row.eg_failed as usize;
        records.push(row.record);
    }
    Ok(EvalOutcome { report: acc.report(), lf_without_ex, eg_exec_failures, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prepare::build_dataset;
    use crate::train::{train_cfcc, train_role};
    use cfcdc_core::synth::synth_dataset;
    use cfcdc_core::ClauseRole;

    fn trained_bundle() -> (ModelBundle, crate::prepare::Dataset) {
        let (tables, train, dev) = synth_dataset(4, 40, 3);
        let mut cfg = crate::config::RunConfig { seed: 17, ..Default::default() };
        cfg.encoder.n_layers = 1;
        cfg.encoder.hidden_dim = 16;
        cfg.encoder.n_heads = 2;
        cfg.encoder.ffn_dim = 32;
        cfg.encoder.max_seq_len = 32;
        cfg.ifcd.lstm_dim = 8;
        cfg.optim.epochs = 2;
        let ds = build_dataset(tables, train, dev, cfg.encoder.max_seq_len);
        let sink = &mut std::io::sink();
        let sel = train_role(&ds, &cfg, ClauseRole::Select, true, sink).unwrap();
        let whr = train_role(&ds, &cfg, ClauseRole::Where, true, sink).unwrap();
        let sw = train_role(&ds, &cfg, ClauseRole::SelectWhere, true, sink).unwrap();
        let cfcc = train_cfcc(&ds, &cfg, [&sel, &whr, &sw], sink).unwrap();
        let bundle = ModelBundle {
            sel,
            whr,
            sw,
            cfcc: Some(cfcc),
            vocab: ds.vocab.clone(),
            max_seq_len: cfg.encoder.max_seq_len,
            alpha: 0.5,
        };
        (bundle, ds)
    }

    #[test]
    fn prediction_produces_valid_queries() {
        let (bundle, ds) = trained_bundle();
        for ex in ds.dev.iter().take(5) {
            let schema = &ds.tables[&ex.table_id];
            let pred = predict_example(&bundle, schema, &ex.question).unwrap();
            assert!(pred.query.sel_col < schema.columns.len());
            assert!(pred.query.conds.len() <= MAX_WHERE_NUM);
        }
    }

    #[test]
    fn eg_candidates_are_ranked_and_capped() {
        let (bundle, ds) = trained_bundle();
        let ex = &ds.dev[0];
        let pred = predict_example(&bundle, &ds.tables[&ex.table_id], &ex.question).unwrap();
        let cands = eg_candidates(&pred, 8);
        assert!(!cands.is_empty() && cands.len() <= 8);
        for w in cands.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn gold_predictions_score_perfectly() {
        // feed gold labels through the metric path: LF = EX = 1
        let (_, ds) = trained_bundle();
        let mut acc = MetricsAccumulator::default();
        for ex in &ds.dev {
            let gold = SqlQuery {
                agg: ex.label.agg,
                sel_col: ex.label.sel_col,
                conds: ex.label.conds.clone(),
            };
            let r = sql::execute(&gold, &ds.tables[&ex.table_id]).unwrap();
            acc.add(&gold, &gold, sql::exec_match(&r, &r));
        }
        let report = acc.report();
        assert_eq!(report.lf, 1.0);
        assert_eq!(report.ex, 1.0);
    }

    #[test]
    fn evaluation_invariants_hold() {
        let (bundle, ds) = trained_bundle();
        let out = evaluate_split(&bundle, &ds.tables, &ds.dev, None).unwrap();
        assert_eq!(out.lf_without_ex, 0, "an LF match must imply an EX match");
        assert!(out.report.ex >= out.report.lf);
        assert_eq!(out.records.len(), ds.dev.len());
        let out_eg = evaluate_split(&bundle, &ds.tables, &ds.dev, Some(8)).unwrap();
        assert_eq!(out_eg.eg_exec_failures, 0);
        assert!(out_eg.report.ex >= out.report.ex - 1e-12);
    }
}
