//! Clause-decoupled column modules. Each clause role owns a full encoder,
//! an optional expert block, and its classification heads, so the three
//! modules share no parameters. Training combines two-pass consistency
//! regularization with auto-weighted multi-task losses; an embedding-space
//! adversarial step can be layered on top per batch.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{TokenizedInput, MAX_WHERE_NUM};
use crate::encoder::{self, EncodedSequence, EncoderCache, EncoderConfig, EncoderError, EncoderParams, Mode};
use crate::ifcd::{self, IfcdConfig, IfcdError, IfcdParams, TaskId};
use crate::mathx;
use crate::rng::Rng;
use crate::sql::{AggOp, CondOp};
use crate::tensor;

/// Which clause a module ranks columns for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClauseRole {
    Select,
    Where,
    SelectWhere,
}

impl ClauseRole {
    pub fn tasks(self) -> &'static [TaskId] {
        match self {
            ClauseRole::Select => &[TaskId::SelRank, TaskId::SelNum, TaskId::SelAgg],
            ClauseRole::Where => &[
                TaskId::WhrRank,
                TaskId::WhrNum,
                TaskId::WhrOp,
                TaskId::WhrValStart,
                TaskId::WhrValEnd,
            ],
            ClauseRole::SelectWhere => &[TaskId::SwRank, TaskId::SwNum],
        }
    }

    /// Largest column count the num head predicts.
    pub fn max_num(self) -> usize {
        match self {
            ClauseRole::Select => 1,
            _ => MAX_WHERE_NUM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClauseRole::Select => "select",
            ClauseRole::Where => "where",
            ClauseRole::SelectWhere => "select_where",
        }
    }
}

#[derive(Debug)]
pub enum CfcdError {
    Encoder(EncoderError),
    Ifcd(IfcdError),
    MissingTarget(TaskId),
    BadSpan { start: usize, end: usize, n_question: usize },
}

impl core::fmt::Display for CfcdError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CfcdError::Encoder(e) => write!(f, "encoder: {e}"),
            CfcdError::Ifcd(e) => write!(f, "expert block: {e}"),
            CfcdError::MissingTarget(t) => write!(f, "missing target for task {t:?}"),
            CfcdError::BadSpan { start, end, n_question } => {
                write!(f, "span ({start}, {end}) outside question of {n_question} tokens")
            }
        }
    }
}

impl From<EncoderError> for CfcdError {
    fn from(e: EncoderError) -> Self {
        CfcdError::Encoder(e)
    }
}

impl From<IfcdError> for CfcdError {
    fn from(e: IfcdError) -> Self {
        CfcdError::Ifcd(e)
    }
}

/// Per-task head parameter offsets inside the flat head vector.
#[derive(Clone, Debug)]
pub enum TaskHeadLayout {
    Linear { w: Range<usize>, b: Range<usize>, dout: usize },
    Span { m: Range<usize>, u: Range<usize> },
}

#[derive(Clone, Debug)]
pub struct HeadLayout {
    pub per_task: Vec<TaskHeadLayout>,
    pub total: usize,
}

fn seg(off: &mut usize, len: usize) -> Range<usize> {
    let r = *off..*off + len;
    *off += len;
    r
}

impl HeadLayout {
    pub fn new(role: ClauseRole, feat_dim: usize, hidden_dim: usize) -> Self {
        let mut off = 0;
        let per_task = role
            .tasks()
            .iter()
            .map(|&t| match t {
                TaskId::SelRank | TaskId::WhrRank | TaskId::SwRank => TaskHeadLayout::Linear {
                    w: seg(&mut off, feat_dim),
                    b: seg(&mut off, 1),
                    dout: 1,
                },
                TaskId::SelNum | TaskId::WhrNum | TaskId::SwNum => {
                    let dout = role.max_num() + 1;
                    TaskHeadLayout::Linear {
                        w: seg(&mut off, feat_dim * dout),
                        b: seg(&mut off, dout),
                        dout,
                    }
                }
                TaskId::SelAgg => TaskHeadLayout::Linear {
                    w: seg(&mut off, feat_dim * AggOp::ALL.len()),
                    b: seg(&mut off, AggOp::ALL.len()),
                    dout: AggOp::ALL.len(),
                },
                TaskId::WhrOp => TaskHeadLayout::Linear {
                    w: seg(&mut off, feat_dim * CondOp::ALL.len()),
                    b: seg(&mut off, CondOp::ALL.len()),
                    dout: CondOp::ALL.len(),
                },
                TaskId::WhrValStart | TaskId::WhrValEnd => TaskHeadLayout::Span {
                    m: seg(&mut off, feat_dim * hidden_dim),
                    u: seg(&mut off, hidden_dim),
                },
            })
            .collect();
        HeadLayout { per_task, total: off }
    }
}

#[derive(Clone, Debug)]
pub struct CfcdModule {
    pub role: ClauseRole,
    pub encoder: EncoderParams,
    pub ifcd: Option<IfcdParams>,
    pub heads: Vec<f64>,
}

const HEAD_INIT_STD: f64 = 0.05;

impl CfcdModule {
    /// `lstm_dim = None` disables the expert block; heads then read the
    /// pooled encoder state directly.
    pub fn init(role: ClauseRole, enc_cfg: EncoderConfig, lstm_dim: Option<usize>, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, &[0x5f, role as u64]);
        let hidden = enc_cfg.hidden_dim;
        let encoder = EncoderParams::init(enc_cfg, &mut rng);
        let ifcd = lstm_dim.map(|h| {
            IfcdParams::init(IfcdConfig::new(hidden, h), role.tasks().to_vec(), &mut rng)
        });
        let feat_dim = ifcd.as_ref().map_or(hidden, |p| p.cfg.feat_dim());
        let layout = HeadLayout::new(role, feat_dim, hidden);
        let mut heads = vec![0.0; layout.total];
        for th in &layout.per_task {
            let w = match th {
                TaskHeadLayout::Linear { w, .. } => w,
                TaskHeadLayout::Span { m, .. } => m,
            };
            for v in &mut heads[w.clone()] {
                *v = rng.normal_scaled(HEAD_INIT_STD);
            }
        }
        CfcdModule { role, encoder, ifcd, heads }
    }

    pub fn feat_dim(&self) -> usize {
        self.ifcd.as_ref().map_or(self.encoder.cfg.hidden_dim, |p| p.cfg.feat_dim())
    }

    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout::new(self.role, self.feat_dim(), self.encoder.cfg.hidden_dim)
    }

    fn mask_constant(&self) -> f64 {
        self.ifcd.as_ref().map_or(ifcd::DEFAULT_MASK_CONSTANT, |p| p.cfg.mask_constant)
    }

    pub fn n_params(&self) -> usize {
        self.encoder.flat.len()
            + self.ifcd.as_ref().map_or(0, |p| p.flat.len())
            + self.heads.len()
    }
}

/// Gradient accumulators matching the three parameter vectors of a module.
#[derive(Clone, Debug)]
pub struct Grads {
    pub encoder: Vec<f64>,
    pub ifcd: Vec<f64>,
    pub heads: Vec<f64>,
}

impl Grads {
    pub fn zeros(module: &CfcdModule) -> Self {
        Grads {
            encoder: vec![0.0; module.encoder.flat.len()],
            ifcd: vec![0.0; module.ifcd.as_ref().map_or(0, |p| p.flat.len())],
            heads: vec![0.0; module.heads.len()],
        }
    }

    pub fn add(&mut self, other: &Grads) {
        tensor::axpy(1.0, &other.encoder, &mut self.encoder);
        tensor::axpy(1.0, &other.ifcd, &mut self.ifcd);
        tensor::axpy(1.0, &other.heads, &mut self.heads);
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .encoder
            .iter_mut()
            .chain(self.ifcd.iter_mut())
            .chain(self.heads.iter_mut())
        {
            *v *= s;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let sq: f64 = self
            .encoder
            .iter()
            .chain(self.ifcd.iter())
            .chain(self.heads.iter())
            .map(|&v| v * v)
            .sum();
        mathx::sqrt(sq)
    }
}

/// Per-candidate gold targets. `None` disables that task's loss for this
/// candidate (e.g. aggregate supervision only on the gold select column).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub relevant: bool,
    pub num: Option<usize>,
    pub agg: Option<usize>,
    pub op: Option<usize>,
    /// Inclusive question-token indices of the condition value.
    pub span: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Weight of the per-task two-pass consistency term.
    pub lambda: f64,
    /// Weight of the pooled-state consistency term.
    pub mu: f64,
    /// Use KL(p1 || p2) instead of the symmetric form.
    pub one_sided_kl: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { lambda: 0.5, mu: 0.5, one_sided_kl: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean cross-entropy over both dropout passes, summed over tasks.
    pub label: f64,
    /// λ-weighted per-task consistency.
    pub consistency: f64,
    /// μ-weighted pooled-state consistency.
    pub pooled_consistency: f64,
    /// Full optimized objective including the auto-weight regularizer.
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct Pass {
    enc: EncodedSequence,
    cache: EncoderCache,
    block: Option<ifcd::BlockOut>,
    /// Per-task feature vectors feeding the heads.
    feats: Vec<Vec<f64>>,
    /// Per-task logits. Rank logits are `[0, s]`; span logits cover every
    /// sequence position with non-question positions pinned to −c.
    logits: Vec<Vec<f64>>,
    /// Cached `feat · M` vectors for span heads.
    span_v: Vec<Option<Vec<f64>>>,
}

fn head_forward(
    module: &CfcdModule,
    layout: &TaskHeadLayout,
    feat: &[f64],
    enc: &EncodedSequence,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let d = module.encoder.cfg.hidden_dim;
    match layout {
        TaskHeadLayout::Linear { w, b, dout } => {
            let out = tensor::linear_vec(feat, &module.heads[w.clone()], &module.heads[b.clone()], *dout);
            if *dout == 1 {
                (vec![0.0, out[0]], None)
            } else {
                (out, None)
            }
        }
        TaskHeadLayout::Span { m, u } => {
            let v = tensor::linear_vec(feat, &module.heads[m.clone()], &vec![0.0; d], d);
            let uvec = &module.heads[u.clone()];
            let c = module.mask_constant();
            let n = enc.n_tokens;
            let mut logits = vec![-c; n];
            for i in 0..n {
                if enc.segment_mask[i] == 1 {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += (v[j] + uvec[j]) * enc.hidden[i * d + j];
                    }
                    logits[i] = s;
                }
            }
            (logits, Some(v))
        }
    }
}

fn pass_forward(module: &CfcdModule, tokens: &TokenizedInput, mode: Mode) -> Result<Pass, CfcdError> {
    let (enc, cache) = encoder::forward(&module.encoder, tokens, mode)?;
    let tasks = module.role.tasks();
    let (feats, block) = match &module.ifcd {
        Some(p) => {
            let out = ifcd::block_forward(p, &enc.hidden, enc.n_tokens, &enc.segment_mask, &enc.pooled)?;
            (out.feats.clone(), Some(out))
        }
        None => (tasks.iter().map(|_| enc.pooled.clone()).collect(), None),
    };
    let layout = module.head_layout();
    let mut logits = Vec::with_capacity(tasks.len());
    let mut span_v = Vec::with_capacity(tasks.len());
    for ti in 0..tasks.len() {
        let (l, v) = head_forward(module, &layout.per_task[ti], &feats[ti], &enc);
        logits.push(l);
        span_v.push(v);
    }
    Ok(Pass { enc, cache, block, feats, logits, span_v })
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

fn pass_backward(
    module: &CfcdModule,
    pass: &Pass,
    dlogits: &[Vec<f64>],
    d_pooled_extra: Option<&[f64]>,
    grads: &mut Grads,
) {
    let d = module.encoder.cfg.hidden_dim;
    let n = pass.enc.n_tokens;
    let feat_dim = module.feat_dim();
    let layout = module.head_layout();
    let tasks = module.role.tasks();
    let mut d_feats: Vec<Vec<f64>> = (0..tasks.len()).map(|_| vec![0.0; feat_dim]).collect();
    let mut d_hidden = vec![0.0; n * d];

    for ti in 0..tasks.len() {
        let dl = &dlogits[ti];
        if dl.is_empty() {
            continue;
        }
        match &layout.per_task[ti] {
            TaskHeadLayout::Linear { w, b, dout } => {
                // rank heads carry the fixed 0 logit in slot 0
                let dl_head: Vec<f64> = if *dout == 1 { vec![dl[1]] } else { dl.clone() };
                let mut dw = vec![0.0; feat_dim * dout];
                let mut db = vec![0.0; *dout];
                let dfeat = tensor::linear_backward(
                    &pass.feats[ti], 1, feat_dim, &module.heads[w.clone()], *dout, &dl_head,
                    &mut dw, &mut db,
                );
                grads.heads[w.clone()].iter_mut().zip(dw.iter()).for_each(|(g, &v)| *g += v);
                grads.heads[b.clone()].iter_mut().zip(db.iter()).for_each(|(g, &v)| *g += v);
                tensor::axpy(1.0, &dfeat, &mut d_feats[ti]);
            }
            TaskHeadLayout::Span { m, u } => {
                let v = pass.span_v[ti].as_ref().expect("span cache");
                let uvec = &module.heads[u.clone()];
                let mut dvpu = vec![0.0; d];
                for i in 0..n {
                    if pass.enc.segment_mask[i] != 1 {
                        continue;
                    }
                    let g = dl[i];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        dvpu[j] += g * pass.enc.hidden[i * d + j];
                        d_hidden[i * d + j] += g * (v[j] + uvec[j]);
                    }
                }
                grads.heads[u.clone()].iter_mut().zip(dvpu.iter()).for_each(|(g, &x)| *g += x);
                let mut dm = vec![0.0; feat_dim * d];
                let mut dbias = vec![0.0; d];
                let dfeat = tensor::linear_backward(
                    &pass.feats[ti], 1, feat_dim, &module.heads[m.clone()], d, &dvpu, &mut dm,
                    &mut dbias,
                );
                grads.heads[m.clone()].iter_mut().zip(dm.iter()).for_each(|(g, &x)| *g += x);
                tensor::axpy(1.0, &dfeat, &mut d_feats[ti]);
            }
        }
    }

    match (&module.ifcd, &pass.block) {
        (Some(p), Some(block)) => {
            let mut d_pooled = vec![0.0; d];
            ifcd::block_backward(
                p,
                &pass.enc.hidden,
                n,
                &pass.enc.segment_mask,
                &pass.enc.pooled,
                block,
                &d_feats,
                &mut grads.ifcd,
                &mut d_hidden,
                &mut d_pooled,
            );
            tensor::axpy(1.0, &d_pooled, &mut d_hidden[0..d]);
        }
        _ => {
            for df in &d_feats {
                tensor::axpy(1.0, df, &mut d_hidden[0..d]);
            }
        }
    }
    if let Some(dp) = d_pooled_extra {
        tensor::axpy(1.0, dp, &mut d_hidden[0..d]);
    }
    encoder::backward(&module.encoder, &pass.cache, &d_hidden, &mut grads.encoder);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn task_label(
    task: TaskId,
    targets: &Targets,
    question_start: usize,
    n_question: usize,
) -> Result<Option<usize>, CfcdError> {
    Ok(match task {
        TaskId::SelRank | TaskId::WhrRank | TaskId::SwRank => Some(targets.relevant as usize),
        TaskId::SelNum | TaskId::WhrNum | TaskId::SwNum => targets.num,
        TaskId::SelAgg => targets.agg,
        TaskId::WhrOp => targets.op,
        TaskId::WhrValStart | TaskId::WhrValEnd => match targets.span {
            None => None,
            Some((s, e)) => {
                if s > e || e >= n_question {
                    return Err(CfcdError::BadSpan { start: s, end: e, n_question });
                }
                let q = if task == TaskId::WhrValStart { s } else { e };
                Some(question_start + q)
            }
        },
    })
}

/// Two-pass consistency loss for one task:
///   l = ½(ce₁ + ce₂) + λ·KL(softmax l₁, softmax l₂)
/// with the symmetric KL by default. Returns (loss, dl₁, dl₂).
pub fn rdrop_loss(
    logits1: &[f64],
    logits2: &[f64],
    label: usize,
    lambda: f64,
    one_sided: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (ce1, mut dl1) = mathx::softmax_ce_grad(logits1, label);
    let (ce2, mut dl2) = mathx::softmax_ce_grad(logits2, label);
    for v in dl1.iter_mut().chain(dl2.iter_mut()) {
        *v *= 0.5;
    }
    let (kl, dk1, dk2) = if one_sided {
        mathx::kl_softmax_grads(logits1, logits2)
    } else {
        mathx::kl_sym_softmax_grads(logits1, logits2)
    };
    tensor::axpy(lambda, &dk1, &mut dl1);
    tensor::axpy(lambda, &dk2, &mut dl2);
    (0.5 * (ce1 + ce2) + lambda * kl, dl1, dl2)
}

struct LossOut {
    breakdown: LossBreakdown,
    dlogits1: Vec<Vec<f64>>,
    dlogits2: Vec<Vec<f64>>,
    d_pooled1: Vec<f64>,
    d_pooled2: Vec<f64>,
    rho_grads: Vec<f64>,
}

fn candidate_losses(
    module: &CfcdModule,
    pass1: &Pass,
    pass2: &Pass,
    tokens: &TokenizedInput,
    targets: &Targets,
    hyper: &Hyper,
) -> Result<LossOut, CfcdError> {
    let tasks = module.role.tasks();
    let sigmas = module.ifcd.as_ref().map(|p| p.sigmas());
    let nq = tokens.n_question_tokens();

    let mut breakdown = LossBreakdown::default();
    let mut dlogits1: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut dlogits2: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut rho_grads = vec![0.0; tasks.len()];
    let mut awl_total = 0.0;
    let mut plain_total = 0.0;

    for (ti, &task) in tasks.iter().enumerate() {
        let Some(label) = task_label(task, targets, tokens.question_start, nq)? else {
            continue;
        };
        let (ce1, mut dl1) = mathx::softmax_ce_grad(&pass1.logits[ti], label);
        let (ce2, mut dl2) = mathx::softmax_ce_grad(&pass2.logits[ti], label);
        for v in dl1.iter_mut().chain(dl2.iter_mut()) {
            *v *= 0.5;
        }
        let (kl, dk1, dk2) = if hyper.one_sided_kl {
            mathx::kl_softmax_grads(&pass1.logits[ti], &pass2.logits[ti])
        } else {
            mathx::kl_sym_softmax_grads(&pass1.logits[ti], &pass2.logits[ti])
        };
        tensor::axpy(hyper.lambda, &dk1, &mut dl1);
        tensor::axpy(hyper.lambda, &dk2, &mut dl2);
        let l_t = 0.5 * (ce1 + ce2) + hyper.lambda * kl;
        breakdown.label += 0.5 * (ce1 + ce2);
        breakdown.consistency += hyper.lambda * kl;
        plain_total += l_t;
        let weight = match &sigmas {
            Some(s) => {
                let sig = s[ti];
                awl_total += l_t / (2.0 * sig * sig) + mathx::ln(1.0 + sig * sig);
                rho_grads[ti] = ifcd::awl_rho_grad(l_t, sig);
                ifcd::awl_task_weight(sig)
            }
            None => 1.0,
        };
        for v in dl1.iter_mut().chain(dl2.iter_mut()) {
            *v *= weight;
        }
        dlogits1[ti] = dl1;
        dlogits2[ti] = dl2;
    }

    // pooled-state consistency between the two dropout passes
    let (klp, mut dp1, mut dp2) = if hyper.one_sided_kl {
        mathx::kl_softmax_grads(&pass1.enc.pooled, &pass2.enc.pooled)
    } else {
        mathx::kl_sym_softmax_grads(&pass1.enc.pooled, &pass2.enc.pooled)
    };
    for v in dp1.iter_mut().chain(dp2.iter_mut()) {
        *v *= hyper.mu;
    }
    breakdown.pooled_consistency = hyper.mu * klp;

    breakdown.total = if sigmas.is_some() {
        0.5 * plain_total + 0.5 * awl_total + hyper.mu * klp
    } else {
        plain_total + hyper.mu * klp
    };

    Ok(LossOut { breakdown, dlogits1, dlogits2, d_pooled1: dp1, d_pooled2: dp2, rho_grads })
}

/// Loss-only evaluation of the two-pass training objective (no gradients).
/// Dropout streams are consumed from the given generators, so callers can
/// reproduce the exact stochastic objective of a training step.
pub fn candidate_loss(
    module: &CfcdModule,
    tokens: &TokenizedInput,
    targets: &Targets,
    hyper: &Hyper,
    rng_a: &mut Rng,
    rng_b: &mut Rng,
) -> Result<LossBreakdown, CfcdError> {
    let pass1 = pass_forward(module, tokens, Mode::Train { rng: rng_a })?;
    let pass2 = pass_forward(module, tokens, Mode::Train { rng: rng_b })?;
    let out = candidate_losses(module, &pass1, &pass2, tokens, targets, hyper)?;
    Ok(out.breakdown)
}

/// One two-pass training step for a single candidate. Accumulates
/// gradients into `grads` and returns the loss terms.
pub fn train_candidate(
    module: &CfcdModule,
    tokens: &TokenizedInput,
    targets: &Targets,
    hyper: &Hyper,
    rng_a: &mut Rng,
    rng_b: &mut Rng,
    grads: &mut Grads,
) -> Result<LossBreakdown, CfcdError> {
    let pass1 = pass_forward(module, tokens, Mode::Train { rng: rng_a })?;
    let pass2 = pass_forward(module, tokens, Mode::Train { rng: rng_b })?;
    let out = candidate_losses(module, &pass1, &pass2, tokens, targets, hyper)?;
    pass_backward(module, &pass1, &out.dlogits1, Some(&out.d_pooled1), grads);
    pass_backward(module, &pass2, &out.dlogits2, Some(&out.d_pooled2), grads);
    if let Some(p) = &module.ifcd {
        let rho = p.layout().awl_rho;
        grads.ifcd[rho].iter_mut().zip(out.rho_grads.iter()).for_each(|(g, &v)| *g += v);
    }
    Ok(out.breakdown)
}

/// Single-pass cross-entropy step used while the token embeddings carry an
/// adversarial perturbation. Returns the (auto-weighted) label loss.
pub fn adversarial_candidate(
    module: &CfcdModule,
    tokens: &TokenizedInput,
    targets: &Targets,
    rng: &mut Rng,
    grads: &mut Grads,
) -> Result<f64, CfcdError> {
    let pass = pass_forward(module, tokens, Mode::Train { rng })?;
    let tasks = module.role.tasks();
    let sigmas = module.ifcd.as_ref().map(|p| p.sigmas());
    let nq = tokens.n_question_tokens();
    let mut dlogits: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut total = 0.0;
    for (ti, &task) in tasks.iter().enumerate() {
        let Some(label) = task_label(task, targets, tokens.question_start, nq)? else {
            continue;
        };
        let (ce, mut dl) = mathx::softmax_ce_grad(&pass.logits[ti], label);
        let weight = sigmas.as_ref().map_or(1.0, |s| ifcd::awl_task_weight(s[ti]));
        for v in dl.iter_mut() {
            *v *= weight;
        }
        total += weight * ce;
        dlogits[ti] = dl;
    }
    pass_backward(module, &pass, &dlogits, None, grads);
    Ok(total)
}

/// Adversarial perturbation r = ε·g/‖g‖₂ for the token-embedding table.
/// Returns `None` when the gradient is (numerically) zero.
pub fn fgm_perturbation(grad_tok_emb: &[f64], epsilon: f64) -> Option<Vec<f64>> {
    let norm = tensor::l2_norm(grad_tok_emb);
    if norm <= 1e-12 {
        return None;
    }
    Some(grad_tok_emb.iter().map(|&g| g * epsilon / norm).collect())
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Deterministic per-candidate predictions. Span distributions cover the
/// retained question tokens only.
#[derive(Clone, Debug)]
pub struct CandidatePrediction {
    pub column_index: usize,
    /// Relevance probability from the rank head.
    pub rank_p: f64,
    pub num_dist: Vec<f64>,
    pub agg_dist: Option<Vec<f64>>,
    pub op_dist: Option<Vec<f64>>,
    pub start_dist: Option<Vec<f64>>,
    pub end_dist: Option<Vec<f64>>,
    pub pooled: Vec<f64>,
}

pub fn predict_candidate(
    module: &CfcdModule,
    tokens: &TokenizedInput,
) -> Result<CandidatePrediction, CfcdError> {
    let pass = pass_forward(module, tokens, Mode::Eval)?;
    let tasks = module.role.tasks();
    let mut pred = CandidatePrediction {
        column_index: tokens.column_index,
        rank_p: 0.0,
        num_dist: Vec::new(),
        agg_dist: None,
        op_dist: None,
        start_dist: None,
        end_dist: None,
        pooled: pass.enc.pooled.clone(),
    };
    let qs = tokens.question_start;
    let nq = tokens.n_question_tokens();
    for (ti, &task) in tasks.iter().enumerate() {
        let logits = &pass.logits[ti];
        match task {
            TaskId::SelRank | TaskId::WhrRank | TaskId::SwRank => {
                pred.rank_p = mathx::sigmoid(logits[1]);
            }
            TaskId::SelNum | TaskId::WhrNum | TaskId::SwNum => {
                pred.num_dist = mathx::softmax(logits);
            }
            TaskId::SelAgg => pred.agg_dist = Some(mathx::softmax(logits)),
            TaskId::WhrOp => pred.op_dist = Some(mathx::softmax(logits)),
            TaskId::WhrValStart | TaskId::WhrValEnd => {
                let q = mathx::softmax(&logits[qs..qs + nq]);
                if task == TaskId::WhrValStart {
                    pred.start_dist = Some(q);
                } else {
                    pred.end_dist = Some(q);
                }
            }
        }
    }
    Ok(pred)
}

/// Relevance-weighted vote over per-candidate count distributions:
///   n̂ = argmax_n Σ_i relevance_i · dist_i[n], ties toward smaller n.
pub fn predict_num(num_dists: &[Vec<f64>], relevance: &[f64]) -> usize {
    debug_assert_eq!(num_dists.len(), relevance.len());
    if num_dists.is_empty() {
        return 0;
    }
    let k = num_dists[0].len();
    let mut scores = vec![0.0; k];
    for (dist, &rel) in num_dists.iter().zip(relevance.iter()) {
        for (s, &p) in scores.iter_mut().zip(dist.iter()) {
            *s += rel * p;
        }
    }
    mathx::argmax(&scores)
}
