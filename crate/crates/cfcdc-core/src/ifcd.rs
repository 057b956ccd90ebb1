//! Implicit feature correlation decoupling: a shared expert plus per-task
//! experts (Bi-LSTM with masked attention pooling) combined by per-task
//! gates, and the auto-weighted multi-task loss.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::mathx;
use crate::rng::Rng;
use crate::tensor;

pub const DEFAULT_MASK_CONSTANT: f64 = 1e4;
const INIT_STD: f64 = 0.05;

/// Sub-task identifiers across the three clause blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    SelRank,
    SelAgg,
    SelNum,
    WhrRank,
    WhrOp,
    WhrNum,
    WhrValStart,
    WhrValEnd,
    SwRank,
    SwNum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfcdConfig {
    pub input_dim: usize,
    pub lstm_dim: usize,
    pub mask_constant: f64,
}

impl IfcdConfig {
    pub fn new(input_dim: usize, lstm_dim: usize) -> Self {
        IfcdConfig { input_dim, lstm_dim, mask_constant: DEFAULT_MASK_CONSTANT }
    }

    /// Expert (and gate) output dimension.
    pub fn feat_dim(&self) -> usize {
        2 * self.lstm_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IfcdError {
    AllMasked,
    UnknownTask(TaskId),
    DimensionMismatch { got: usize, want: usize },
}

impl core::fmt::Display for IfcdError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            IfcdError::AllMasked => write!(f, "attention mask has no unmasked positions"),
            IfcdError::UnknownTask(t) => write!(f, "task {t:?} not in this block"),
            IfcdError::DimensionMismatch { got, want } => {
                write!(f, "dimension mismatch: got {got}, want {want}")
            }
        }
    }
}

/// Offsets of one expert inside a flat parameter vector.
#[derive(Clone, Debug)]
pub struct ExpertLayout {
    pub w_fwd: Range<usize>,
    pub u_fwd: Range<usize>,
    pub b_fwd: Range<usize>,
    pub w_bwd: Range<usize>,
    pub u_bwd: Range<usize>,
    pub b_bwd: Range<usize>,
    pub attn_w: Range<usize>,
    pub attn_theta: Range<usize>,
}

fn seg(off: &mut usize, len: usize) -> Range<usize> {
    let r = *off..*off + len;
    *off += len;
    r
}

impl ExpertLayout {
    fn new(off: &mut usize, d: usize, h: usize) -> Self {
        let z = 2 * h;
        ExpertLayout {
            w_fwd: seg(off, d * 4 * h),
            u_fwd: seg(off, h * 4 * h),
            b_fwd: seg(off, 4 * h),
            w_bwd: seg(off, d * 4 * h),
            u_bwd: seg(off, h * 4 * h),
            b_bwd: seg(off, 4 * h),
            attn_w: seg(off, z * z),
            attn_theta: seg(off, z),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GateLayout {
    pub w: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct IfcdLayout {
    pub shared: ExpertLayout,
    pub task_experts: Vec<ExpertLayout>,
    pub gates: Vec<GateLayout>,
    /// Per-task log-sigma parameters of the auto-weighted loss.
    pub awl_rho: Range<usize>,
    pub total: usize,
}

impl IfcdLayout {
    pub fn new(cfg: &IfcdConfig, n_tasks: usize) -> Self {
        let (d, h) = (cfg.input_dim, cfg.lstm_dim);
        let mut off = 0;
        let shared = ExpertLayout::new(&mut off, d, h);
        let task_experts = (0..n_tasks).map(|_| ExpertLayout::new(&mut off, d, h)).collect();
        let gates = (0..n_tasks)
            .map(|_| GateLayout { w: seg(&mut off, d * 2), b: seg(&mut off, 2) })
            .collect();
        let awl_rho = seg(&mut off, n_tasks);
        IfcdLayout { shared, task_experts, gates, awl_rho, total: off }
    }
}

#[derive(Clone, Debug)]
pub struct IfcdParams {
    pub cfg: IfcdConfig,
    pub tasks: Vec<TaskId>,
    pub flat: Vec<f64>,
}

impl IfcdParams {
    pub fn init(cfg: IfcdConfig, tasks: Vec<TaskId>, rng: &mut Rng) -> Self {
        let layout = IfcdLayout::new(&cfg, tasks.len());
        let mut flat = vec![0.0; layout.total];
        // weights random, biases zero, awl rho zero (sigma = 1)
        let mut experts: Vec<&ExpertLayout> = vec![&layout.shared];
        experts.extend(layout.task_experts.iter());
        for e in experts {
            for r in [&e.w_fwd, &e.u_fwd, &e.w_bwd, &e.u_bwd, &e.attn_w] {
                for v in &mut flat[r.clone().clone()] {
                    *v = rng.normal_scaled(INIT_STD);
                }
            }
        }
        for g in &layout.gates {
            for v in &mut flat[g.w.clone()] {
                *v = rng.normal_scaled(INIT_STD);
            }
        }
        IfcdParams { cfg, tasks, flat }
    }

    pub fn layout(&self) -> IfcdLayout {
        IfcdLayout::new(&self.cfg, self.tasks.len())
    }

    pub fn task_index(&self, task: TaskId) -> Result<usize, IfcdError> {
        self.tasks.iter().position(|&t| t == task).ok_or(IfcdError::UnknownTask(task))
    }

    /// Current sigma values of the auto-weighted loss.
    pub fn sigmas(&self) -> Vec<f64> {
        let layout = self.layout();
        self.flat[layout.awl_rho].iter().map(|&r| mathx::exp(r)).collect()
    }
}

// ---------------------------------------------------------------------------
// Bi-LSTM
// ---------------------------------------------------------------------------

struct LstmDirCache {
    /// per-step [i, f, g, o] post-activation, c, tanh(c), h
    gates: Vec<[f64; 4]>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// One LSTM direction over `order`ed steps. Returns h per (original) step.
fn lstm_dir(
    p: &[f64],
    w: &Range<usize>,
    u: &Range<usize>,
    b: &Range<usize>,
    x: &[f64],
    n: usize,
    d: usize,
    h_dim: usize,
    reverse: bool,
) -> (Vec<f64>, LstmDirCache) {
    let g4 = 4 * h_dim;
    let mut hs = vec![0.0; n * h_dim];
    let mut cache = LstmDirCache {
        gates: vec![[0.0; 4]; n * h_dim],
        c: vec![0.0; n * h_dim],
        tanh_c: vec![0.0; n * h_dim],
        h: vec![0.0; n * h_dim],
    };
    let mut h_prev = vec![0.0; h_dim];
    let mut c_prev = vec![0.0; h_dim];
    let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for &t in &steps {
        let xt = &x[t * d..(t + 1) * d];
        let mut pre = tensor::linear(xt, 1, d, &p[w.clone()], &p[b.clone()], g4);
        let uh = tensor::linear(&h_prev, 1, h_dim, &p[u.clone()], &vec![0.0; g4], g4);
        tensor::axpy(1.0, &uh, &mut pre);
        for j in 0..h_dim {
            let i_g = mathx::sigmoid(pre[j]);
            let f_g = mathx::sigmoid(pre[h_dim + j]);
            let g_g = mathx::tanh(pre[2 * h_dim + j]);
            let o_g = mathx::sigmoid(pre[3 * h_dim + j]);
            let c = f_g * c_prev[j] + i_g * g_g;
            let tc = mathx::tanh(c);
            let hv = o_g * tc;
            cache.gates[t * h_dim + j] = [i_g, f_g, g_g, o_g];
            cache.c[t * h_dim + j] = c;
            cache.tanh_c[t * h_dim + j] = tc;
            cache.h[t * h_dim + j] = hv;
            hs[t * h_dim + j] = hv;
        }
        h_prev.copy_from_slice(&cache.h[t * h_dim..(t + 1) * h_dim]);
        c_prev.copy_from_slice(&cache.c[t * h_dim..(t + 1) * h_dim]);
    }
    (hs, cache)
}

#[allow(clippy::too_many_arguments)]
fn lstm_dir_backward(
    p: &[f64],
    w: &Range<usize>,
    u: &Range<usize>,
    b: &Range<usize>,
    x: &[f64],
    n: usize,
    d: usize,
    h_dim: usize,
    reverse: bool,
    cache: &LstmDirCache,
    dh_out: &[f64],
    grad: &mut [f64],
    dx: &mut [f64],
) {
    let g4 = 4 * h_dim;
    let steps: Vec<usize> = if reverse { (0..n).collect() } else { (0..n).rev().collect() };
    let mut dh_next = vec![0.0; h_dim];
    let mut dc_next = vec![0.0; h_dim];
    for (si, &t) in steps.iter().enumerate() {
        // previous step in processing order
        let prev: Option<usize> = if reverse {
            if t + 1 < n { Some(t + 1) } else { None }
        } else if t > 0 {
            Some(t - 1)
        } else {
            None
        };
        let mut dgates_pre = vec![0.0; g4];
        for j in 0..h_dim {
            let [i_g, f_g, g_g, o_g] = cache.gates[t * h_dim + j];
            let tc = cache.tanh_c[t * h_dim + j];
            let c_prev = prev.map_or(0.0, |pt| cache.c[pt * h_dim + j]);
            let dh = dh_out[t * h_dim + j] + dh_next[j];
            let do_g = dh * tc;
            let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
            let di = dc * g_g;
            let df = dc * c_prev;
            let dg = dc * i_g;
            dc_next[j] = dc * f_g;
            dgates_pre[j] = di * i_g * (1.0 - i_g);
            dgates_pre[h_dim + j] = df * f_g * (1.0 - f_g);
            dgates_pre[2 * h_dim + j] = dg * (1.0 - g_g * g_g);
            dgates_pre[3 * h_dim + j] = do_g * o_g * (1.0 - o_g);
        }
        // pre = x_t W + h_prev U + b
        let xt = &x[t * d..(t + 1) * d];
        let mut dw = vec![0.0; d * g4];
        let mut db = vec![0.0; g4];
        let dxt =
            tensor::linear_backward(xt, 1, d, &p[w.clone()], g4, &dgates_pre, &mut dw, &mut db);
        grad[w.clone()].iter_mut().zip(dw.iter()).for_each(|(g, &v)| *g += v);
        grad[b.clone()].iter_mut().zip(db.iter()).for_each(|(g, &v)| *g += v);
        for c in 0..d {
            dx[t * d + c] += dxt[c];
        }
        let h_prev_vec: Vec<f64> = prev
            .map(|pt| cache.h[pt * h_dim..(pt + 1) * h_dim].to_vec())
            .unwrap_or_else(|| vec![0.0; h_dim]);
        let mut du = vec![0.0; h_dim * g4];
        let mut db2 = vec![0.0; g4];
        let dhp = tensor::linear_backward(
            &h_prev_vec, 1, h_dim, &p[u.clone()], g4, &dgates_pre, &mut du, &mut db2,
        );
        grad[u.clone()].iter_mut().zip(du.iter()).for_each(|(g, &v)| *g += v);
        dh_next = dhp;
        let _ = si;
    }
}

pub struct BilstmCache {
    fwd: LstmDirCache,
    bwd: LstmDirCache,
}

/// z_i = [h_fwd_i ; h_bwd_i] over the input sequence.
pub fn bilstm_forward(
    p: &[f64],
    layout: &ExpertLayout,
    x: &[f64],
    n: usize,
    d: usize,
    h_dim: usize,
) -> (Vec<f64>, BilstmCache) {
    let (hf, cf) = lstm_dir(p, &layout.w_fwd, &layout.u_fwd, &layout.b_fwd, x, n, d, h_dim, false);
    let (hb, cb) = lstm_dir(p, &layout.w_bwd, &layout.u_bwd, &layout.b_bwd, x, n, d, h_dim, true);
    let z2 = 2 * h_dim;
    let mut z = vec![0.0; n * z2];
    for t in 0..n {
        z[t * z2..t * z2 + h_dim].copy_from_slice(&hf[t * h_dim..(t + 1) * h_dim]);
        z[t * z2 + h_dim..(t + 1) * z2].copy_from_slice(&hb[t * h_dim..(t + 1) * h_dim]);
    }
    (z, BilstmCache { fwd: cf, bwd: cb })
}

#[allow(clippy::too_many_arguments)]
pub fn bilstm_backward(
    p: &[f64],
    layout: &ExpertLayout,
    x: &[f64],
    n: usize,
    d: usize,
    h_dim: usize,
    cache: &BilstmCache,
    dz: &[f64],
    grad: &mut [f64],
    dx: &mut [f64],
) {
    let z2 = 2 * h_dim;
    let mut dhf = vec![0.0; n * h_dim];
    let mut dhb = vec![0.0; n * h_dim];
    for t in 0..n {
        dhf[t * h_dim..(t + 1) * h_dim].copy_from_slice(&dz[t * z2..t * z2 + h_dim]);
        dhb[t * h_dim..(t + 1) * h_dim].copy_from_slice(&dz[t * z2 + h_dim..(t + 1) * z2]);
    }
    lstm_dir_backward(
        p, &layout.w_fwd, &layout.u_fwd, &layout.b_fwd, x, n, d, h_dim, false, &cache.fwd, &dhf,
        grad, dx,
    );
    lstm_dir_backward(
        p, &layout.w_bwd, &layout.u_bwd, &layout.b_bwd, x, n, d, h_dim, true, &cache.bwd, &dhb,
        grad, dx,
    );
}

// ---------------------------------------------------------------------------
// Attention pooling
// ---------------------------------------------------------------------------

pub struct AttnCache {
    query: Vec<f64>,
    weights: Vec<f64>,
}

impl AttnCache {
    /// Softmax attention weights over the sequence positions.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Masked attention pooling:
///   query_i = Wᵀ z_i + θ, key_i = tanh(query_i),
///   score_i = ⟨query_i, key_i⟩·mask_i − c·(1−mask_i),
///   a = softmax(score), h_c = Σ a_i z_i.
pub fn attention_pool(
    p: &[f64],
    layout: &ExpertLayout,
    z: &[f64],
    n: usize,
    z_dim: usize,
    mask: &[u8],
    mask_constant: f64,
) -> Result<(Vec<f64>, AttnCache), IfcdError> {
    if mask.iter().take(n).all(|&m| m == 0) {
        return Err(IfcdError::AllMasked);
    }
    let query = tensor::linear(z, n, z_dim, &p[layout.attn_w.clone()], &p[layout.attn_theta.clone()], z_dim);
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let qi = &query[i * z_dim..(i + 1) * z_dim];
        let qk: f64 = qi.iter().map(|&q| q * mathx::tanh(q)).sum();
        let m = mask[i] as f64;
        scores[i] = qk * m - mask_constant * (1.0 - m);
    }
    let weights = mathx::softmax(&scores);
    let mut pooled = vec![0.0; z_dim];
    for i in 0..n {
        tensor::axpy(weights[i], &z[i * z_dim..(i + 1) * z_dim], &mut pooled);
    }
    Ok((pooled, AttnCache { query, weights }))
}

#[allow(clippy::too_many_arguments)]
pub fn attention_pool_backward(
    p: &[f64],
    layout: &ExpertLayout,
    z: &[f64],
    n: usize,
    z_dim: usize,
    mask: &[u8],
    cache: &AttnCache,
    d_pooled: &[f64],
    grad: &mut [f64],
    dz: &mut [f64],
) {
    let a = &cache.weights;
    // h_c = Σ a_i z_i
    let mut da = vec![0.0; n];
    for i in 0..n {
        da[i] = tensor::dot(d_pooled, &z[i * z_dim..(i + 1) * z_dim]);
        for c in 0..z_dim {
            dz[i * z_dim + c] += a[i] * d_pooled[c];
        }
    }
    // softmax backward
    let dot_ad: f64 = (0..n).map(|i| a[i] * da[i]).sum();
    // score_i → query_i (masked positions have d score / d query = 0)
    let mut dquery = vec![0.0; n * z_dim];
    for i in 0..n {
        let ds = a[i] * (da[i] - dot_ad);
        if mask[i] == 0 {
            continue;
        }
        let qi = &cache.query[i * z_dim..(i + 1) * z_dim];
        for c in 0..z_dim {
            let t = mathx::tanh(qi[c]);
            // d(q·tanh(q))/dq = tanh(q) + q(1−tanh²(q))
            dquery[i * z_dim + c] = ds * (t + qi[c] * (1.0 - t * t));
        }
    }
    let mut dw = vec![0.0; z_dim * z_dim];
    let mut dtheta = vec![0.0; z_dim];
    let dz_lin = tensor::linear_backward(
        z, n, z_dim, &p[layout.attn_w.clone()], z_dim, &dquery, &mut dw, &mut dtheta,
    );
    grad[layout.attn_w.clone()].iter_mut().zip(dw.iter()).for_each(|(g, &v)| *g += v);
    grad[layout.attn_theta.clone()].iter_mut().zip(dtheta.iter()).for_each(|(g, &v)| *g += v);
    tensor::axpy(1.0, &dz_lin, dz);
}

// ---------------------------------------------------------------------------
// Expert = Bi-LSTM + attention pooling
// ---------------------------------------------------------------------------

pub struct ExpertCache {
    z: Vec<f64>,
    bilstm: BilstmCache,
    attn: AttnCache,
}

pub fn expert_forward(
    p: &[f64],
    layout: &ExpertLayout,
    cfg: &IfcdConfig,
    hidden: &[f64],
    n: usize,
    mask: &[u8],
) -> Result<(Vec<f64>, ExpertCache), IfcdError> {
    let (z, bilstm) = bilstm_forward(p, layout, hidden, n, cfg.input_dim, cfg.lstm_dim);
    let (pooled, attn) =
        attention_pool(p, layout, &z, n, cfg.feat_dim(), mask, cfg.mask_constant)?;
    Ok((pooled, ExpertCache { z, bilstm, attn }))
}

#[allow(clippy::too_many_arguments)]
pub fn expert_backward(
    p: &[f64],
    layout: &ExpertLayout,
    cfg: &IfcdConfig,
    hidden: &[f64],
    n: usize,
    mask: &[u8],
    cache: &ExpertCache,
    d_out: &[f64],
    grad: &mut [f64],
    d_hidden: &mut [f64],
) {
    let mut dz = vec![0.0; n * cfg.feat_dim()];
    attention_pool_backward(
        p, layout, &cache.z, n, cfg.feat_dim(), mask, &cache.attn, d_out, grad, &mut dz,
    );
    bilstm_backward(
        p, layout, hidden, n, cfg.input_dim, cfg.lstm_dim, &cache.bilstm, &dz, grad, d_hidden,
    );
}

// ---------------------------------------------------------------------------
// Gate
// ---------------------------------------------------------------------------

pub struct GateCache {
    weights: [f64; 2],
}

impl GateCache {
    /// Softmax gate weights (shared, task).
    pub fn weights(&self) -> [f64; 2] {
        self.weights
    }
}

/// Convex combination of the shared and task expert outputs with softmax
/// weights computed from `gate_input`.
pub fn gate_combine(
    p: &[f64],
    layout: &GateLayout,
    gate_input: &[f64],
    e_s: &[f64],
    e_t: &[f64],
) -> Result<(Vec<f64>, GateCache), IfcdError> {
    if e_s.len() != e_t.len() {
        return Err(IfcdError::DimensionMismatch { got: e_t.len(), want: e_s.len() });
    }
    let logits = tensor::linear_vec(gate_input, &p[layout.w.clone()], &p[layout.b.clone()], 2);
    let g = mathx::softmax(&logits);
    let out: Vec<f64> =
        e_s.iter().zip(e_t.iter()).map(|(&a, &b)| g[0] * a + g[1] * b).collect();
    Ok((out, GateCache { weights: [g[0], g[1]] }))
}

#[allow(clippy::too_many_arguments)]
pub fn gate_combine_backward(
    p: &[f64],
    layout: &GateLayout,
    gate_input: &[f64],
    e_s: &[f64],
    e_t: &[f64],
    cache: &GateCache,
    d_out: &[f64],
    grad: &mut [f64],
    d_gate_input: &mut [f64],
    d_e_s: &mut [f64],
    d_e_t: &mut [f64],
) {
    let g = cache.weights;
    let mut dg = [0.0; 2];
    for c in 0..d_out.len() {
        d_e_s[c] += g[0] * d_out[c];
        d_e_t[c] += g[1] * d_out[c];
        dg[0] += d_out[c] * e_s[c];
        dg[1] += d_out[c] * e_t[c];
    }
    // softmax backward for the two weights
    let dot: f64 = g[0] * dg[0] + g[1] * dg[1];
    let dlogits = [g[0] * (dg[0] - dot), g[1] * (dg[1] - dot)];
    let mut dw = vec![0.0; gate_input.len() * 2];
    let mut db = vec![0.0; 2];
    let dgi = tensor::linear_backward(
        gate_input, 1, gate_input.len(), &p[layout.w.clone()], 2, &dlogits, &mut dw, &mut db,
    );
    grad[layout.w.clone()].iter_mut().zip(dw.iter()).for_each(|(g, &v)| *g += v);
    grad[layout.b.clone()].iter_mut().zip(db.iter()).for_each(|(g, &v)| *g += v);
    tensor::axpy(1.0, &dgi, d_gate_input);
}

// ---------------------------------------------------------------------------
// Block forward/backward over all tasks
// ---------------------------------------------------------------------------

pub struct BlockCache {
    shared: ExpertCache,
    shared_out: Vec<f64>,
    tasks: Vec<(ExpertCache, Vec<f64>, GateCache)>,
}

pub struct BlockOut {
    /// One gated feature vector per task, in `params.tasks` order.
    pub feats: Vec<Vec<f64>>,
    pub cache: BlockCache,
}

/// Run shared expert, every task expert, and the gates for one candidate.
/// `gate_input` is the encoder pooled vector.
pub fn block_forward(
    params: &IfcdParams,
    hidden: &[f64],
    n: usize,
    mask: &[u8],
    gate_input: &[f64],
) -> Result<BlockOut, IfcdError> {
    let layout = params.layout();
    let p = &params.flat;
    let (shared_out, shared) = expert_forward(p, &layout.shared, &params.cfg, hidden, n, mask)?;
    let mut feats = Vec::with_capacity(params.tasks.len());
    let mut tasks = Vec::with_capacity(params.tasks.len());
    for ti in 0..params.tasks.len() {
        let (e_t, ec) =
            expert_forward(p, &layout.task_experts[ti], &params.cfg, hidden, n, mask)?;
        let (out, gc) = gate_combine(p, &layout.gates[ti], gate_input, &shared_out, &e_t)?;
        feats.push(out);
        tasks.push((ec, e_t, gc));
    }
    Ok(BlockOut { feats, cache: BlockCache { shared, shared_out, tasks } })
}

/// Single-task forward; the feature vector replaces the pooled encoder
/// state as the input to that task's classification head.
pub fn ifcd_forward(
    params: &IfcdParams,
    hidden: &[f64],
    n: usize,
    mask: &[u8],
    gate_input: &[f64],
    task: TaskId,
) -> Result<Vec<f64>, IfcdError> {
    let ti = params.task_index(task)?;
    let layout = params.layout();
    let p = &params.flat;
    let (shared_out, _) = expert_forward(p, &layout.shared, &params.cfg, hidden, n, mask)?;
    let (e_t, _) = expert_forward(p, &layout.task_experts[ti], &params.cfg, hidden, n, mask)?;
    let (out, _) = gate_combine(p, &layout.gates[ti], gate_input, &shared_out, &e_t)?;
    Ok(out)
}

/// Backward over all tasks given per-task feature gradients.
#[allow(clippy::too_many_arguments)]
pub fn block_backward(
    params: &IfcdParams,
    hidden: &[f64],
    n: usize,
    mask: &[u8],
    gate_input: &[f64],
    out: &BlockOut,
    d_feats: &[Vec<f64>],
    grad: &mut [f64],
    d_hidden: &mut [f64],
    d_gate_input: &mut [f64],
) {
    let layout = params.layout();
    let p = &params.flat;
    let feat = params.cfg.feat_dim();
    let mut d_shared_out = vec![0.0; feat];
    for ti in 0..params.tasks.len() {
        let (ec, e_t, gc) = &out.cache.tasks[ti];
        let mut d_e_t = vec![0.0; feat];
        gate_combine_backward(
            p,
            &layout.gates[ti],
            gate_input,
            &out.cache.shared_out,
            e_t,
            gc,
            &d_feats[ti],
            grad,
            d_gate_input,
            &mut d_shared_out,
            &mut d_e_t,
        );
        expert_backward(
            p, &layout.task_experts[ti], &params.cfg, hidden, n, mask, ec, &d_e_t, grad, d_hidden,
        );
    }
    expert_backward(
        p, &layout.shared, &params.cfg, hidden, n, mask, &out.cache.shared, &d_shared_out, grad,
        d_hidden,
    );
}

// ---------------------------------------------------------------------------
// Auto-weighted multi-task loss
// ---------------------------------------------------------------------------

/// total = 0.5·Σ l_i + 0.5·awl, awl = Σ [ l_i/(2σ_i²) + ln(1+σ_i²) ].
pub fn ifcd_loss(task_losses: &[f64], sigmas: &[f64]) -> f64 {
    debug_assert_eq!(task_losses.len(), sigmas.len());
    let plain: f64 = task_losses.iter().sum();
    let awl: f64 = task_losses
        .iter()
        .zip(sigmas.iter())
        .map(|(&l, &s)| l / (2.0 * s * s) + mathx::ln(1.0 + s * s))
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    0.5 * plain + 0.5 * awl
}

/// Effective weight each task loss receives in the total: 0.5 + 0.25/σ².
pub fn awl_task_weight(sigma: f64) -> f64 {
    0.5 + 0.25 / (sigma * sigma)
}

/// d total / d rho where σ = exp(rho):
///   0.5 · σ · ( −l/σ³ + 2σ/(1+σ²) ).
pub fn awl_rho_grad(task_loss: f64, sigma: f64) -> f64 {
    0.5 * sigma * (-task_loss / (sigma * sigma * sigma) + 2.0 * sigma / (1.0 + sigma * sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> IfcdConfig {
        IfcdConfig::new(6, 4)
    }

    fn params_with_tasks(seed: u64, tasks: Vec<TaskId>) -> IfcdParams {
        IfcdParams::init(cfg(), tasks, &mut Rng::new(seed))
    }

    #[test]
    fn bilstm_shapes_for_single_token() {
        let p = params_with_tasks(1, vec![TaskId::SelRank]);
        let layout = p.layout();
        let x = vec![0.3; 6];
        let (z, _) = bilstm_forward(&p.flat, &layout.shared, &x, 1, 6, 4);
        assert_eq!(z.len(), 8);
    }

    #[test]
    fn bilstm_zero_params_zero_input_gives_zero() {
        let mut p = params_with_tasks(1, vec![TaskId::SelRank]);
        for v in &mut p.flat {
            *v = 0.0;
        }
        let layout = p.layout();
        let x = vec![0.0; 3 * 6];
        let (z, _) = bilstm_forward(&p.flat, &layout.shared, &x, 3, 6, 4);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_reversal_swaps_direction_channels() {
        let p = params_with_tasks(3, vec![TaskId::SelRank]);
        let layout = p.layout();
        let x: Vec<f64> = (0..3 * 6).map(|i| (i as f64) * 0.1 - 0.8).collect();
        let mut x_rev = vec![0.0; 3 * 6];
        for t in 0..3 {
            x_rev[t * 6..(t + 1) * 6].copy_from_slice(&x[(2 - t) * 6..(3 - t) * 6]);
        }
        // swap the forward/backward weight blocks so the directions trade roles
        let mut p_swapped = p.flat.clone();
        for (a, b) in [
            (layout.shared.w_fwd.clone(), layout.shared.w_bwd.clone()),
            (layout.shared.u_fwd.clone(), layout.shared.u_bwd.clone()),
            (layout.shared.b_fwd.clone(), layout.shared.b_bwd.clone()),
        ] {
            for i in 0..a.len() {
                p_swapped.swap(a.start + i, b.start + i);
            }
        }
        let (z, _) = bilstm_forward(&p.flat, &layout.shared, &x, 3, 6, 4);
        let (z_rev, _) = bilstm_forward(&p_swapped, &layout.shared, &x_rev, 3, 6, 4);
        // forward channel of z at t equals backward channel of z_rev at n-1-t
        for t in 0..3 {
            for j in 0..4 {
                let fwd = z[t * 8 + j];
                let bwd_of_rev = z_rev[(2 - t) * 8 + 4 + j];
                assert!((fwd - bwd_of_rev).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_singleton_returns_that_token() {
        let p = params_with_tasks(2, vec![TaskId::SelRank]);
        let layout = p.layout();
        let z = vec![0.4, -0.2, 0.9, 0.1, -0.6, 0.3, 0.8, -0.1];
        let (pooled, cache) =
            attention_pool(&p.flat, &layout.shared, &z, 1, 8, &[1], 1e4).unwrap();
        assert_eq!(cache.weights, vec![1.0]);
        assert_eq!(pooled, z);
    }

    #[test]
    fn attention_identical_tokens_split_evenly() {
        let p = params_with_tasks(2, vec![TaskId::SelRank]);
        let layout = p.layout();
        let tok = [0.4, -0.2, 0.9, 0.1, -0.6, 0.3, 0.8, -0.1];
        let mut z = tok.to_vec();
        z.extend_from_slice(&tok);
        let (_, cache) = attention_pool(&p.flat, &layout.shared, &z, 2, 8, &[1, 1], 1e4).unwrap();
        assert!((cache.weights[0] - 0.5).abs() < 1e-12);
        assert!((cache.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_get_negligible_weight() {
        let p = params_with_tasks(2, vec![TaskId::SelRank]);
        let layout = p.layout();
        let z: Vec<f64> = (0..3 * 8).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.5).collect();
        let (_, cache) =
            attention_pool(&p.flat, &layout.shared, &z, 3, 8, &[1, 0, 1], 1e4).unwrap();
        assert!(cache.weights[1] < 1e-30);
        let s: f64 = cache.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_masked_is_an_error() {
        let p = params_with_tasks(2, vec![TaskId::SelRank]);
        let layout = p.layout();
        let z = vec![0.0; 16];
        assert!(matches!(
            attention_pool(&p.flat, &layout.shared, &z, 2, 8, &[0, 0], 1e4),
            Err(IfcdError::AllMasked)
        ));
    }

    #[test]
    fn gate_zero_params_gives_midpoint() {
        let mut p = params_with_tasks(1, vec![TaskId::SelRank]);
        for v in &mut p.flat {
            *v = 0.0;
        }
        let layout = p.layout();
        let e_s = vec![1.0, 3.0];
        let e_t = vec![3.0, -1.0];
        let (out, cache) =
            gate_combine(&p.flat, &layout.gates[0], &vec![0.5; 6], &e_s, &e_t).unwrap();
        assert_eq!(cache.weights, [0.5, 0.5]);
        assert_eq!(out, vec![2.0, 1.0]);
    }

    #[test]
    fn gate_saturation_selects_one_branch() {
        let mut p = params_with_tasks(1, vec![TaskId::SelRank]);
        let layout = p.layout();
        // force logits ≈ (100, -100) via the bias
        for v in &mut p.flat[layout.gates[0].w.clone()] {
            *v = 0.0;
        }
        p.flat[layout.gates[0].b.start] = 100.0;
        p.flat[layout.gates[0].b.start + 1] = -100.0;
        let e_s = vec![1.0, 3.0];
        let e_t = vec![-7.0, 2.0];
        let (out, _) = gate_combine(&p.flat, &layout.gates[0], &vec![0.5; 6], &e_s, &e_t).unwrap();
        for (o, e) in out.iter().zip(e_s.iter()) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_branches_make_gate_irrelevant() {
        let p = params_with_tasks(9, vec![TaskId::SelRank]);
        let layout = p.layout();
        let e = vec![0.3, -0.4];
        let (out, _) = gate_combine(&p.flat, &layout.gates[0], &vec![0.2; 6], &e, &e).unwrap();
        for (o, ev) in out.iter().zip(e.iter()) {
            assert!((o - ev).abs() < 1e-12);
        }
    }

    #[test]
    fn task_expert_copied_from_shared_ignores_gate() {
        let mut p = params_with_tasks(4, vec![TaskId::SelRank]);
        let layout = p.layout();
        // copy shared expert params into the task expert
        let shared: Vec<f64> = p.flat[layout.shared.w_fwd.start..layout.shared.attn_theta.end].to_vec();
        p.flat[layout.task_experts[0].w_fwd.start..layout.task_experts[0].attn_theta.end]
            .copy_from_slice(&shared);
        let hidden: Vec<f64> = (0..3 * 6).map(|i| (i as f64) * 0.07 - 0.5).collect();
        let mask = [1u8, 1, 0];
        let gi = vec![0.3; 6];
        let a = ifcd_forward(&p, &hidden, 3, &mask, &gi, TaskId::SelRank).unwrap();
        // change the gate and verify the output does not move
        p.flat[layout.gates[0].b.start] = 5.0;
        let b = ifcd_forward(&p, &hidden, 3, &mask, &gi, TaskId::SelRank).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_task_is_an_error() {
        let p = params_with_tasks(4, vec![TaskId::SelRank]);
        let hidden = vec![0.1; 2 * 6];
        assert!(matches!(
            ifcd_forward(&p, &hidden, 2, &[1, 1], &vec![0.0; 6], TaskId::WhrOp),
            Err(IfcdError::UnknownTask(TaskId::WhrOp))
        ));
    }

    #[test]
    fn awl_sigma_one_closed_form() {
        let losses = [0.7, 1.3, 0.2];
        let sigmas = [1.0, 1.0, 1.0];
        let total = ifcd_loss(&losses, &sigmas);
        let sum: f64 = losses.iter().sum();
        let expect = 0.5 * sum + 0.5 * (sum / 2.0 + 3.0 * mathx::ln(2.0));
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn awl_hand_computed_case() {
        // l = (1.0, 2.0), sigma = (1.0, 2.0):
        // awl = 0.5 + ln 2 + 0.25 + ln 5
        let awl_expect = 0.5 + 0.25 + mathx::ln(2.0) + mathx::ln(5.0);
        let total = ifcd_loss(&[1.0, 2.0], &[1.0, 2.0]);
        let expect = 0.5 * 3.0 + 0.5 * awl_expect;
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn awl_zero_losses_is_nonnegative() {
        let total = ifcd_loss(&[0.0, 0.0], &[0.7, 1.5]);
        assert!(total >= 0.0);
        let expect = 0.5 * (mathx::ln(1.0 + 0.49) + mathx::ln(1.0 + 2.25));
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn awl_monotone_in_each_loss() {
        let sig = [0.8, 1.3];
        let base = ifcd_loss(&[1.0, 2.0], &sig);
        assert!(ifcd_loss(&[1.5, 2.0], &sig) > base);
        assert!(ifcd_loss(&[1.0, 2.5], &sig) > base);
    }

    #[test]
    fn awl_rho_grad_matches_finite_differences() {
        let l = 1.7;
        for &rho in &[-0.5, 0.0, 0.8] {
            let f = |r: f64| {
                let s = mathx::exp(r);
                ifcd_loss(&[l], &[s])
            };
            let h = 1e-6;
            let fd = (f(rho + h) - f(rho - h)) / (2.0 * h);
            let an = awl_rho_grad(l, mathx::exp(rho));
            assert!((fd - an).abs() < 1e-8, "rho {rho}: {fd} vs {an}");
        }
    }

    #[test]
    fn full_expert_path_gradients_match_finite_differences() {
        // loss = sum(feature) through gate + both experts + bilstm + attention
        let tasks = vec![TaskId::SelRank, TaskId::SelAgg];
        let mut p = params_with_tasks(7, tasks);
        let n = 4;
        let hidden: Vec<f64> = (0..n * 6).map(|i| ((i * 13 % 17) as f64 - 8.0) * 0.1).collect();
        let mask = [1u8, 0, 1, 1];
        let gate_input: Vec<f64> = (0..6).map(|i| (i as f64) * 0.2 - 0.5).collect();

        let loss_fn = |p: &IfcdParams, hidden: &[f64], gate_input: &[f64]| -> f64 {
            let out = block_forward(p, hidden, n, &mask, gate_input).unwrap();
            out.feats.iter().flat_map(|f| f.iter()).sum()
        };

        let out = block_forward(&p, &hidden, n, &mask, &gate_input).unwrap();
        let d_feats: Vec<Vec<f64>> = out.feats.iter().map(|f| vec![1.0; f.len()]).collect();
        let mut grad = vec![0.0; p.flat.len()];
        let mut d_hidden = vec![0.0; hidden.len()];
        let mut d_gate_input = vec![0.0; gate_input.len()];
        block_backward(
            &p, &hidden, n, &mask, &gate_input, &out, &d_feats, &mut grad, &mut d_hidden,
            &mut d_gate_input,
        );

        let h = 1e-5;
        let step = (p.flat.len() / 83).max(1);
        for i in (0..p.flat.len()).step_by(step) {
            let orig = p.flat[i];
            p.flat[i] = orig + h;
            let lp = loss_fn(&p, &hidden, &gate_input);
            p.flat[i] = orig - h;
            let lm = loss_fn(&p, &hidden, &gate_input);
            p.flat[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let ok = (fd - grad[i]).abs() < 1e-7
                || (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()) < 1e-4;
            assert!(ok, "param {i}: fd {fd} vs {}", grad[i]);
        }
        // input gradients
        let mut hid = hidden.clone();
        for i in (0..hid.len()).step_by(3) {
            let orig = hid[i];
            hid[i] = orig + h;
            let lp = loss_fn(&p, &hid, &gate_input);
            hid[i] = orig - h;
            let lm = loss_fn(&p, &hid, &gate_input);
            hid[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let ok = (fd - d_hidden[i]).abs() < 1e-7
                || (fd - d_hidden[i]).abs() / fd.abs().max(d_hidden[i].abs()) < 1e-4;
            assert!(ok, "hidden {i}: fd {fd} vs {}", d_hidden[i]);
        }
        let mut gi = gate_input.clone();
        for i in 0..gi.len() {
            let orig = gi[i];
            gi[i] = orig + h;
            let lp = loss_fn(&p, &hidden, &gi);
            gi[i] = orig - h;
            let lm = loss_fn(&p, &hidden, &gi);
            gi[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let ok = (fd - d_gate_input[i]).abs() < 1e-7
                || (fd - d_gate_input[i]).abs() / fd.abs().max(d_gate_input[i].abs()) < 1e-4;
            assert!(ok, "gate input {i}: fd {fd} vs {}", d_gate_input[i]);
        }
    }
}
