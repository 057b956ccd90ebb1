//! Coupling stage. The pooled states of the clause modules are paired into
//! two-token sequences (select+joint and where+joint), re-scored by a small
//! expert block with its own heads, and blended with the clause-module
//! distributions by weighted voting before the final query is assembled.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cfcd::Targets;
use crate::data::MAX_WHERE_NUM;
use crate::ifcd::{self, IfcdConfig, IfcdError, IfcdParams, TaskId};
use crate::mathx;
use crate::rng::Rng;
use crate::sql::{AggOp, CondOp, SqlQuery};
use crate::tensor;

/// Stack two pooled vectors into one coupled two-token sequence.
pub fn couple(pooled_a: &[f64], pooled_b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pooled_a.len() + pooled_b.len());
    out.extend_from_slice(pooled_a);
    out.extend_from_slice(pooled_b);
    out
}

fn task_dout(task: TaskId) -> usize {
    match task {
        TaskId::SelRank | TaskId::WhrRank | TaskId::SwRank => 1,
        TaskId::SelNum => 2,
        TaskId::WhrNum | TaskId::SwNum => MAX_WHERE_NUM + 1,
        TaskId::SelAgg => AggOp::ALL.len(),
        TaskId::WhrOp => CondOp::ALL.len(),
        TaskId::WhrValStart | TaskId::WhrValEnd => 0,
    }
}

/// One side of the coupling stage: an expert block over the coupled pair
/// plus linear heads. The select side re-scores rank/num/agg, the where
/// side rank/num/op; condition values stay with the where clause module.
#[derive(Clone, Debug)]
pub struct CfccBranch {
    pub ifcd: IfcdParams,
    pub heads: Vec<f64>,
}

const HEAD_INIT_STD: f64 = 0.05;

impl CfccBranch {
    pub fn init(input_dim: usize, lstm_dim: usize, tasks: Vec<TaskId>, rng: &mut Rng) -> Self {
        let ifcd = IfcdParams::init(IfcdConfig::new(input_dim, lstm_dim), tasks, rng);
        let feat = ifcd.cfg.feat_dim();
        let total: usize = ifcd.tasks.iter().map(|&t| feat * task_dout(t) + task_dout(t)).sum();
        let mut heads = vec![0.0; total];
        let mut off = 0;
        for &t in &ifcd.tasks {
            let dout = task_dout(t);
            for v in &mut heads[off..off + feat * dout] {
                *v = rng.normal_scaled(HEAD_INIT_STD);
            }
            off += feat * dout + dout;
        }
        CfccBranch { ifcd, heads }
    }

    /// (weight range, bias range, dout) per task.
    fn head_ranges(&self) -> Vec<(core::ops::Range<usize>, core::ops::Range<usize>, usize)> {
        let feat = self.ifcd.cfg.feat_dim();
        let mut off = 0;
        self.ifcd
            .tasks
            .iter()
            .map(|&t| {
                let dout = task_dout(t);
                let w = off..off + feat * dout;
                off += feat * dout;
                let b = off..off + dout;
                off += dout;
                (w, b, dout)
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.ifcd.flat.len() + self.heads.len()
    }
}

#[derive(Clone, Debug)]
pub struct CfccModule {
    pub sel: CfccBranch,
    pub whr: CfccBranch,
}

impl CfccModule {
    pub fn init(input_dim: usize, lstm_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, &[0xcc]);
        let sel = CfccBranch::init(
            input_dim,
            lstm_dim,
            vec![TaskId::SelRank, TaskId::SelNum, TaskId::SelAgg],
            &mut rng,
        );
        let whr = CfccBranch::init(
            input_dim,
            lstm_dim,
            vec![TaskId::WhrRank, TaskId::WhrNum, TaskId::WhrOp],
            &mut rng,
        );
        CfccModule { sel, whr }
    }

    pub fn n_params(&self) -> usize {
        self.sel.n_params() + self.whr.n_params()
    }
}

fn branch_logits(
    branch: &CfccBranch,
    coupled: &[f64],
) -> Result<(Vec<Vec<f64>>, ifcd::BlockOut), IfcdError> {
    let d = branch.ifcd.cfg.input_dim;
    debug_assert_eq!(coupled.len(), 2 * d);
    // both coupled tokens participate; the own-role token gates the mix
    let out = ifcd::block_forward(&branch.ifcd, coupled, 2, &[1, 1], &coupled[0..d])?;
    let logits = branch
        .head_ranges()
        .iter()
        .zip(out.feats.iter())
        .map(|((w, b, dout), feat)| {
            let l = tensor::linear_vec(feat, &branch.heads[w.clone()], &branch.heads[b.clone()], *dout);
            if *dout == 1 {
                vec![0.0, l[0]]
            } else {
                l
            }
        })
        .collect();
    Ok((logits, out))
}

/// Re-scored distributions for one candidate column on one side.
#[derive(Clone, Debug, Default)]
pub struct BranchPrediction {
    pub rank_p: f64,
    pub num_dist: Vec<f64>,
    /// Aggregate distribution on the select side, operator distribution on
    /// the where side.
    pub class_dist: Vec<f64>,
}

pub fn branch_predict(branch: &CfccBranch, coupled: &[f64]) -> Result<BranchPrediction, IfcdError> {
    let (logits, _) = branch_logits(branch, coupled)?;
    let mut pred = BranchPrediction::default();
    for (&task, l) in branch.ifcd.tasks.iter().zip(logits.iter()) {
        match task {
            TaskId::SelRank | TaskId::WhrRank | TaskId::SwRank => {
                pred.rank_p = mathx::sigmoid(l[1])
            }
            TaskId::SelNum | TaskId::WhrNum | TaskId::SwNum => pred.num_dist = mathx::softmax(l),
            _ => pred.class_dist = mathx::softmax(l),
        }
    }
    Ok(pred)
}

/// Gradients for one branch.
#[derive(Clone, Debug)]
pub struct BranchGrads {
    pub ifcd: Vec<f64>,
    pub heads: Vec<f64>,
}

impl BranchGrads {
    pub fn zeros(branch: &CfccBranch) -> Self {
        BranchGrads { ifcd: vec![0.0; branch.ifcd.flat.len()], heads: vec![0.0; branch.heads.len()] }
    }

    pub fn add(&mut self, other: &BranchGrads) {
        tensor::axpy(1.0, &other.ifcd, &mut self.ifcd);
        tensor::axpy(1.0, &other.heads, &mut self.heads);
    }
}

/// One auto-weighted cross-entropy step on frozen coupled inputs. Returns
/// the total loss; gradients never flow back into the clause modules.
pub fn branch_train(
    branch: &CfccBranch,
    coupled: &[f64],
    targets: &Targets,
    grads: &mut BranchGrads,
) -> Result<f64, IfcdError> {
    let (logits, block) = branch_logits(branch, coupled)?;
    let sigmas = branch.ifcd.sigmas();
    let ranges = branch.head_ranges();
    let feat_dim = branch.ifcd.cfg.feat_dim();
    let mut d_feats: Vec<Vec<f64>> = (0..branch.ifcd.tasks.len()).map(|_| vec![0.0; feat_dim]).collect();
    let mut rho_grads = vec![0.0; branch.ifcd.tasks.len()];
    let mut plain = 0.0;
    let mut awl = 0.0;
    for (ti, &task) in branch.ifcd.tasks.iter().enumerate() {
        let label = match task {
            TaskId::SelRank | TaskId::WhrRank | TaskId::SwRank => Some(targets.relevant as usize),
            TaskId::SelNum | TaskId::WhrNum | TaskId::SwNum => targets.num,
            TaskId::SelAgg => targets.agg,
            TaskId::WhrOp => targets.op,
            _ => None,
        };
        let Some(label) = label else { continue };
        let (ce, mut dl) = mathx::softmax_ce_grad(&logits[ti], label);
        let sig = sigmas[ti];
        plain += ce;
        awl += ce / (2.0 * sig * sig) + mathx::ln(1.0 + sig * sig);
        rho_grads[ti] = ifcd::awl_rho_grad(ce, sig);
        let weight = ifcd::awl_task_weight(sig);
        for v in dl.iter_mut() {
            *v *= weight;
        }
        let (w, b, dout) = &ranges[ti];
        let dl_head: Vec<f64> = if *dout == 1 { vec![dl[1]] } else { dl };
        let mut dw = vec![0.0; feat_dim * dout];
        let mut db = vec![0.0; *dout];
        let dfeat = tensor::linear_backward(
            &block.feats[ti], 1, feat_dim, &branch.heads[w.clone()], *dout, &dl_head, &mut dw,
            &mut db,
        );
        grads.heads[w.clone()].iter_mut().zip(dw.iter()).for_each(|(g, &v)| *g += v);
        grads.heads[b.clone()].iter_mut().zip(db.iter()).for_each(|(g, &v)| *g += v);
        tensor::axpy(1.0, &dfeat, &mut d_feats[ti]);
    }
    let d = branch.ifcd.cfg.input_dim;
    let mut d_hidden = vec![0.0; 2 * d];
    let mut d_gate = vec![0.0; d];
    ifcd::block_backward(
        &branch.ifcd, coupled, 2, &[1, 1], &coupled[0..d], &block, &d_feats, &mut grads.ifcd,
        &mut d_hidden, &mut d_gate,
    );
    let rho = branch.ifcd.layout().awl_rho;
    grads.ifcd[rho].iter_mut().zip(rho_grads.iter()).for_each(|(g, &v)| *g += v);
    Ok(0.5 * plain + 0.5 * awl)
}

// ---------------------------------------------------------------------------
// Voting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VotingConfig {
    /// Weight on the coupling-stage distribution; the clause-module
    /// distribution gets 1 − alpha.
    pub alpha: f64,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig { alpha: 0.5 }
    }
}

/// final_i = α·expert_i + (1 − α)·base_i.
pub fn weighted_vote(expert: &[f64], base: &[f64], alpha: f64) -> Vec<f64> {
    debug_assert_eq!(expert.len(), base.len());
    expert
        .iter()
        .zip(base.iter())
        .map(|(&e, &b)| alpha * e + (1.0 - alpha) * b)
        .collect()
}

// ---------------------------------------------------------------------------
// Query assembly
// ---------------------------------------------------------------------------

/// Final per-column scores and distributions after voting, ready for
/// assembly into a query.
#[derive(Clone, Debug, Default)]
pub struct SqlComponents {
    /// (column index, relevance) per select candidate.
    pub sel_scores: Vec<(usize, f64)>,
    pub sel_num_dists: Vec<Vec<f64>>,
    pub agg_dists: Vec<Vec<f64>>,
    /// (column index, relevance) per where candidate.
    pub whr_scores: Vec<(usize, f64)>,
    pub whr_num_dists: Vec<Vec<f64>>,
    pub op_dists: Vec<Vec<f64>>,
    /// Extracted condition value per where candidate.
    pub values: Vec<String>,
}

/// Assemble the final query:
/// 1. the select column count collapses to one,
/// 2. the top-ranked candidate becomes the select column and its aggregate
///    is the argmax of its voted distribution,
/// 3. the where count picks how many top-ranked where candidates survive,
/// 4. each surviving candidate contributes (column, argmax op, value).
/// Ties in rank break toward the smaller column index; impossible counts
/// are clamped with a warning.
pub fn assemble_sql(c: &SqlComponents) -> (SqlQuery, Vec<String>) {
    let mut warnings = Vec::new();

    let sel_rel: Vec<f64> = c.sel_scores.iter().map(|&(_, s)| s).collect();
    let n_s = if c.sel_num_dists.is_empty() {
        1
    } else {
        crate::cfcd::predict_num(&c.sel_num_dists, &sel_rel)
    };
    if n_s != 1 {
        warnings.push(format!("select count {n_s} clamped to 1"));
    }

    let mut sel_order: Vec<usize> = (0..c.sel_scores.len()).collect();
    sel_order.sort_by(|&a, &b| {
        c.sel_scores[b]
            .1
            .partial_cmp(&c.sel_scores[a].1)
            .unwrap()
            .then(c.sel_scores[a].0.cmp(&c.sel_scores[b].0))
    });
    let best = sel_order.first().copied().unwrap_or(0);
    let (sel_col, agg) = if c.sel_scores.is_empty() {
        (0, AggOp::None)
    } else {
        let code = mathx::argmax(&c.agg_dists[best]) as u8;
        (c.sel_scores[best].0, AggOp::from_code(code).unwrap_or(AggOp::None))
    };

    let whr_rel: Vec<f64> = c.whr_scores.iter().map(|&(_, s)| s).collect();
    let mut n_w = if c.whr_num_dists.is_empty() {
        0
    } else {
        crate::cfcd::predict_num(&c.whr_num_dists, &whr_rel)
    };
    if n_w > c.whr_scores.len() {
        warnings.push(format!(
            "where count {n_w} clamped to {} available candidates",
            c.whr_scores.len()
        ));
        n_w = c.whr_scores.len();
    }
    if n_w > MAX_WHERE_NUM {
        warnings.push(format!("where count {n_w} clamped to {MAX_WHERE_NUM}"));
        n_w = MAX_WHERE_NUM;
    }

    let mut whr_order: Vec<usize> = (0..c.whr_scores.len()).collect();
    whr_order.sort_by(|&a, &b| {
        c.whr_scores[b]
            .1
            .partial_cmp(&c.whr_scores[a].1)
            .unwrap()
            .then(c.whr_scores[a].0.cmp(&c.whr_scores[b].0))
    });
    let mut conds: Vec<(usize, CondOp, String)> = whr_order
        .into_iter()
        .take(n_w)
        .map(|i| {
            let op = CondOp::from_code(mathx::argmax(&c.op_dists[i]) as u8).unwrap_or(CondOp::Eq);
            (c.whr_scores[i].0, op, c.values[i].clone())
        })
        .collect();
    conds.sort_by(|a, b| a.0.cmp(&b.0));

    (SqlQuery { agg, sel_col, conds }, warnings)
}
