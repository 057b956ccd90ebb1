//! Small pre-norm self-attention encoder trained from scratch.
//!
//! Parameters live in one flat `Vec<f64>` addressed through a `Layout`;
//! that keeps the optimizer, checkpointing, embedding perturbation, and
//! finite-difference verification trivial. Forward passes record the
//! intermediates needed for the hand-written backward pass.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::TokenizedInput;
use crate::mathx;
use crate::rng::Rng;
use crate::tensor;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn small(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 3,
            hidden_dim: 128,
            n_heads: 4,
            ffn_dim: 256,
            dropout_rate: 0.2,
            max_seq_len: 48,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden_dim % self.n_heads != 0 {
            return Err(EncoderError::BadConfig("hidden_dim not divisible by n_heads"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::BadConfig("dropout_rate must be in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderError {
    BadConfig(&'static str),
    TokenOutOfRange { id: u32, vocab_size: usize },
}

impl core::fmt::Display for EncoderError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EncoderError::BadConfig(s) => write!(f, "bad encoder config: {s}"),
            EncoderError::TokenOutOfRange { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocab size {vocab_size}")
            }
        }
    }
}

/// Offsets of one transformer layer inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub seg_emb: Range<usize>,
    pub match_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub total: usize,
}

fn seg(off: &mut usize, len: usize) -> Range<usize> {
    let r = *off..*off + len;
    *off += len;
    r
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let mut off = 0;
        let tok_emb = seg(&mut off, cfg.vocab_size * d);
        let pos_emb = seg(&mut off, cfg.max_seq_len * d);
        let seg_emb = seg(&mut off, 2 * d);
        let match_emb = seg(&mut off, 2 * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: seg(&mut off, d),
                ln1_b: seg(&mut off, d),
                wq: seg(&mut off, d * d),
                bq: seg(&mut off, d),
                wk: seg(&mut off, d * d),
                bk: seg(&mut off, d),
                wv: seg(&mut off, d * d),
                bv: seg(&mut off, d),
                wo: seg(&mut off, d * d),
                bo: seg(&mut off, d),
                ln2_g: seg(&mut off, d),
                ln2_b: seg(&mut off, d),
                w1: seg(&mut off, d * f),
                b1: seg(&mut off, f),
                w2: seg(&mut off, f * d),
                b2: seg(&mut off, d),
            })
            .collect();
        let lnf_g = seg(&mut off, d);
        let lnf_b = seg(&mut off, d);
        Layout { tok_emb, pos_emb, seg_emb, match_emb, layers, lnf_g, lnf_b, total: off }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub flat: Vec<f64>,
}

impl EncoderParams {
    pub fn init(cfg: EncoderConfig, rng: &mut Rng) -> Self {
        cfg.validate().expect("invalid encoder config");
        let layout = Layout::new(&cfg);
        let mut flat = vec![0.0; layout.total];
        for v in &mut flat[layout.tok_emb.clone()] {
            *v = rng.normal_scaled(INIT_STD);
        }
        for v in &mut flat[layout.pos_emb.clone()] {
            *v = rng.normal_scaled(INIT_STD);
        }
        for v in &mut flat[layout.seg_emb.clone()] {
            *v = rng.normal_scaled(INIT_STD);
        }
        for v in &mut flat[layout.match_emb.clone()] {
            *v = rng.normal_scaled(INIT_STD);
        }
        for l in &layout.layers {
            for r in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                for v in &mut flat[r.clone().clone()] {
                    *v = rng.normal_scaled(INIT_STD);
                }
            }
            for v in &mut flat[l.ln1_g.clone()] {
                *v = 1.0;
            }
            for v in &mut flat[l.ln2_g.clone()] {
                *v = 1.0;
            }
        }
        for v in &mut flat[layout.lnf_g.clone()] {
            *v = 1.0;
        }
        EncoderParams { cfg, flat }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }
}

/// Per-token hidden states plus the pooled (first-token) vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    /// Row-major [n x hidden_dim].
    pub hidden: Vec<f64>,
    pub n_tokens: usize,
    pub segment_mask: Vec<u8>,
    pub pooled: Vec<f64>,
}

impl EncodedSequence {
    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.pooled.len();
        &self.hidden[i * d..(i + 1) * d]
    }
}

pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut Rng },
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// softmax attention probabilities, [n_heads][n*n]
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    h2: Vec<f64>,
    u_pre: Vec<f64>,
    u_act: Vec<f64>,
    drop2: Option<Vec<f64>>,
}

pub struct EncoderCache {
    token_ids: Vec<u32>,
    seg_ids: Vec<u8>,
    match_ids: Vec<u8>,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / mathx::sqrt(var + LN_EPS);
        inv_std[r] = is;
        for c in 0..d {
            let xh = (row[c] - mean) * is;
            xhat[r * d + c] = xh;
            y[r * d + c] = g[c] * xh + b[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    cache: &LnCache,
    n: usize,
    d: usize,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[c];
        }
        let m1 = sum_dxhat / d as f64;
        let m2 = sum_dxhat_xhat / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[r * d + c] = is * (dxh - m1 - xh[c] * m2);
        }
    }
    dx
}

fn dropout(x: &mut [f64], rate: f64, mode: &mut Mode) -> Option<Vec<f64>> {
    match mode {
        Mode::Train { rng } if rate > 0.0 => {
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = x
                .iter_mut()
                .map(|v| {
                    if rng.uniform() < rate {
                        *v = 0.0;
                        0.0
                    } else {
                        *v *= scale;
                        scale
                    }
                })
                .collect();
            Some(mask)
        }
        _ => None,
    }
}

fn apply_mask(dy: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (g, &mv) in dy.iter_mut().zip(m.iter()) {
            *g *= mv;
        }
    }
}

/// Forward pass with cached intermediates for `backward`.
pub fn forward(
    params: &EncoderParams,
    tokens: &TokenizedInput,
    mut mode: Mode,
) -> Result<(EncodedSequence, EncoderCache), EncoderError> {
    let cfg = &params.cfg;
    let layout = params.layout();
    let d = cfg.hidden_dim;
    let n = tokens.len().min(cfg.max_seq_len);
    let p = &params.flat;

    let mut x = vec![0.0; n * d];
    for (i, ((&id, &segm), &matm)) in tokens
        .token_ids
        .iter()
        .zip(tokens.segment_mask.iter())
        .zip(tokens.match_mask.iter())
        .take(n)
        .enumerate()
    {
        if id as usize >= cfg.vocab_size {
            return Err(EncoderError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
        }
        let te = &p[layout.tok_emb.start + id as usize * d..layout.tok_emb.start + (id as usize + 1) * d];
        let pe = &p[layout.pos_emb.start + i * d..layout.pos_emb.start + (i + 1) * d];
        let se = &p[layout.seg_emb.start + segm as usize * d..layout.seg_emb.start + (segm as usize + 1) * d];
        let me = &p[layout.match_emb.start + matm as usize * d..layout.match_emb.start + (matm as usize + 1) * d];
        for c in 0..d {
            x[i * d + c] = te[c] + pe[c] + se[c] + me[c];
        }
    }
    let emb_drop = dropout(&mut x, cfg.dropout_rate, &mut mode);

    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / mathx::sqrt(dh as f64);
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);

    for ll in &layout.layers {
        let x_in = x.clone();
        let (h1, ln1) = layer_norm(&x, n, d, &p[ll.ln1_g.clone()], &p[ll.ln1_b.clone()]);
        let q = tensor::linear(&h1, n, d, &p[ll.wq.clone()], &p[ll.bq.clone()], d);
        let k = tensor::linear(&h1, n, d, &p[ll.wk.clone()], &p[ll.bk.clone()], d);
        let v = tensor::linear(&h1, n, d, &p[ll.wv.clone()], &p[ll.bv.clone()], d);

        let mut probs = Vec::with_capacity(n_heads);
        let mut ctx = vec![0.0; n * d];
        for h in 0..n_heads {
            let hs = h * dh;
            let mut ph = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q[i * d + hs..i * d + hs + dh];
                let mut row = vec![0.0; n];
                for j in 0..n {
                    row[j] = tensor::dot(qi, &k[j * d + hs..j * d + hs + dh]) * scale;
                }
                let sm = mathx::softmax(&row);
                for j in 0..n {
                    ph[i * n + j] = sm[j];
                    let vj = &v[j * d + hs..j * d + hs + dh];
                    for c in 0..dh {
                        ctx[i * d + hs + c] += sm[j] * vj[c];
                    }
                }
            }
            probs.push(ph);
        }

        let mut attn_out = tensor::linear(&ctx, n, d, &p[ll.wo.clone()], &p[ll.bo.clone()], d);
        let drop1 = dropout(&mut attn_out, cfg.dropout_rate, &mut mode);
        let mut x_mid = x_in.clone();
        tensor::axpy(1.0, &attn_out, &mut x_mid);

        let (h2, ln2) = layer_norm(&x_mid, n, d, &p[ll.ln2_g.clone()], &p[ll.ln2_b.clone()]);
        let u_pre = tensor::linear(&h2, n, d, &p[ll.w1.clone()], &p[ll.b1.clone()], cfg.ffn_dim);
        let u_act: Vec<f64> = u_pre.iter().map(|&u| mathx::gelu(u)).collect();
        let mut ffn_out = tensor::linear(&u_act, n, cfg.ffn_dim, &p[ll.w2.clone()], &p[ll.b2.clone()], d);
        let drop2 = dropout(&mut ffn_out, cfg.dropout_rate, &mut mode);
        let mut x_out = x_mid.clone();
        tensor::axpy(1.0, &ffn_out, &mut x_out);

        layer_caches.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            drop1,
            ln2,
            h2,
            u_pre,
            u_act,
            drop2,
        });
        x = x_out;
    }

    let (y, lnf) = layer_norm(&x, n, d, &p[layout.lnf_g.clone()], &p[layout.lnf_b.clone()]);
    let pooled = y[0..d].to_vec();
    let _ = mode.is_train();

    Ok((
        EncodedSequence {
            hidden: y,
            n_tokens: n,
            segment_mask: tokens.segment_mask[..n].to_vec(),
            pooled,
        },
        EncoderCache {
            token_ids: tokens.token_ids[..n].to_vec(),
            seg_ids: tokens.segment_mask[..n].to_vec(),
            match_ids: tokens.match_mask[..n].to_vec(),
            emb_drop,
            layers: layer_caches,
            lnf,
        },
    ))
}

/// Eval- or train-mode encoding without keeping the cache.
pub fn encode(
    params: &EncoderParams,
    tokens: &TokenizedInput,
    mode: Mode,
) -> Result<EncodedSequence, EncoderError> {
    forward(params, tokens, mode).map(|(e, _)| e)
}

/// Two independent dropout realizations of the same input, for the
/// consistency loss.
pub fn encode_twice(
    params: &EncoderParams,
    tokens: &TokenizedInput,
    rng_a: &mut Rng,
    rng_b: &mut Rng,
) -> Result<(EncodedSequence, EncodedSequence), EncoderError> {
    let a = encode(params, tokens, Mode::Train { rng: rng_a })?;
    let b = encode(params, tokens, Mode::Train { rng: rng_b })?;
    Ok((a, b))
}

/// Backward pass: accumulate parameter gradients into `grad` (same layout
/// as `params.flat`) given the loss gradient on the output hidden states.
pub fn backward(params: &EncoderParams, cache: &EncoderCache, d_hidden: &[f64], grad: &mut [f64]) {
    let cfg = &params.cfg;
    let layout = params.layout();
    let d = cfg.hidden_dim;
    let n = cache.token_ids.len();
    let p = &params.flat;
    debug_assert_eq!(d_hidden.len(), n * d);
    debug_assert_eq!(grad.len(), p.len());

    // final layer norm
    let (gslice, _) = (layout.lnf_g.clone(), ());
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut dx = layer_norm_backward(&cache.lnf, n, d, &p[gslice.clone()], d_hidden, &mut dg, &mut db);
    grad[layout.lnf_g.clone()].iter_mut().zip(dg.iter()).for_each(|(g, &v)| *g += v);
    grad[layout.lnf_b.clone()].iter_mut().zip(db.iter()).for_each(|(g, &v)| *g += v);

    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / mathx::sqrt(dh as f64);

    for (li, ll) in layout.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];

        // x_out = x_mid + drop2(ffn_out)
        let mut d_ffn_out = dx.clone();
        apply_mask(&mut d_ffn_out, &lc.drop2);

        // ffn_out = u_act @ w2 + b2
        let mut dw2 = vec![0.0; cfg.ffn_dim * d];
        let mut db2 = vec![0.0; d];
        let mut d_u_act = tensor::linear_backward(
            &lc.u_act, n, cfg.ffn_dim, &p[ll.w2.clone()], d, &d_ffn_out, &mut dw2, &mut db2,
        );
        grad[ll.w2.clone()].iter_mut().zip(dw2.iter()).for_each(|(g, &v)| *g += v);
        grad[ll.b2.clone()].iter_mut().zip(db2.iter()).for_each(|(g, &v)| *g += v);

        // u_act = gelu(u_pre)
        for (du, &u) in d_u_act.iter_mut().zip(lc.u_pre.iter()) {
            *du *= mathx::gelu_grad(u);
        }

        // u_pre = h2 @ w1 + b1
        let mut dw1 = vec![0.0; d * cfg.ffn_dim];
        let mut db1 = vec![0.0; cfg.ffn_dim];
        let d_h2 = tensor::linear_backward(
            &lc.h2, n, d, &p[ll.w1.clone()], cfg.ffn_dim, &d_u_act, &mut dw1, &mut db1,
        );
        grad[ll.w1.clone()].iter_mut().zip(dw1.iter()).for_each(|(g, &v)| *g += v);
        grad[ll.b1.clone()].iter_mut().zip(db1.iter()).for_each(|(g, &v)| *g += v);

        // h2 = ln2(x_mid); residual adds dx into d_x_mid as well
        let mut dg2 = vec![0.0; d];
        let mut db2n = vec![0.0; d];
        let d_x_mid_ln =
            layer_norm_backward(&lc.ln2, n, d, &p[ll.ln2_g.clone()], &d_h2, &mut dg2, &mut db2n);
        grad[ll.ln2_g.clone()].iter_mut().zip(dg2.iter()).for_each(|(g, &v)| *g += v);
        grad[ll.ln2_b.clone()].iter_mut().zip(db2n.iter()).for_each(|(g, &v)| *g += v);
        let mut d_x_mid = dx; // from residual
        tensor::axpy(1.0, &d_x_mid_ln, &mut d_x_mid);

        // x_mid = x_in + drop1(attn_out)
        let mut d_attn_out = d_x_mid.clone();
        apply_mask(&mut d_attn_out, &lc.drop1);

        // attn_out = ctx @ wo + bo
        let mut dwo = vec![0.0; d * d];
        let mut dbo = vec![0.0; d];
        let d_ctx = tensor::linear_backward(
            &lc.ctx, n, d, &p[ll.wo.clone()], d, &d_attn_out, &mut dwo, &mut dbo,
        );
        grad[ll.wo.clone()].iter_mut().zip(dwo.iter()).for_each(|(g, &v)| *g += v);
        grad[ll.bo.clone()].iter_mut().zip(dbo.iter()).for_each(|(g, &v)| *g += v);

        // attention
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for h in 0..n_heads {
            let hs = h * dh;
            let ph = &lc.probs[h];
            for i in 0..n {
                let dctx_i = &d_ctx[i * d + hs..i * d + hs + dh];
                // dprobs and dv
                let mut dprobs = vec![0.0; n];
                for j in 0..n {
                    let vj = &lc.v[j * d + hs..j * d + hs + dh];
                    dprobs[j] = tensor::dot(dctx_i, vj);
                    let pij = ph[i * n + j];
                    for c in 0..dh {
                        dv[j * d + hs + c] += pij * dctx_i[c];
                    }
                }
                // softmax backward
                let mut dot_pd = 0.0;
                for j in 0..n {
                    dot_pd += ph[i * n + j] * dprobs[j];
                }
                for j in 0..n {
                    let ds = ph[i * n + j] * (dprobs[j] - dot_pd) * scale;
                    let kj = &lc.k[j * d + hs..j * d + hs + dh];
                    let qi = &lc.q[i * d + hs..i * d + hs + dh];
                    for c in 0..dh {
                        dq[i * d + hs + c] += ds * kj[c];
                        dk[j * d + hs + c] += ds * qi[c];
                    }
                }
            }
        }

        // q/k/v projections
        let mut d_h1 = vec![0.0; n * d];
        for (w, b_range, dproj) in [(&ll.wq, &ll.bq, &dq), (&ll.wk, &ll.bk, &dk), (&ll.wv, &ll.bv, &dv)] {
            let mut dw = vec![0.0; d * d];
            let mut dbv = vec![0.0; d];
            let dh1 = tensor::linear_backward(&lc.h1, n, d, &p[w.clone().clone()], d, dproj, &mut dw, &mut dbv);
            grad[w.clone().clone()].iter_mut().zip(dw.iter()).for_each(|(g, &v)| *g += v);
            grad[b_range.clone().clone()].iter_mut().zip(dbv.iter()).for_each(|(g, &v)| *g += v);
            tensor::axpy(1.0, &dh1, &mut d_h1);
        }

        // h1 = ln1(x_in); residual adds d_x_mid into dx_in
        let mut dg1 = vec![0.0; d];
        let mut db1n = vec![0.0; d];
        let d_x_in_ln =
            layer_norm_backward(&lc.ln1, n, d, &p[ll.ln1_g.clone()], &d_h1, &mut dg1, &mut db1n);
        grad[ll.ln1_g.clone()].iter_mut().zip(dg1.iter()).for_each(|(g, &v)| *g += v);
        grad[ll.ln1_b.clone()].iter_mut().zip(db1n.iter()).for_each(|(g, &v)| *g += v);
        let mut d_x_in = d_x_mid;
        tensor::axpy(1.0, &d_x_in_ln, &mut d_x_in);
        dx = d_x_in;
    }

    // embeddings
    apply_mask(&mut dx, &cache.emb_drop);
    for i in 0..n {
        let id = cache.token_ids[i] as usize;
        let segm = cache.seg_ids[i] as usize;
        let drow = &dx[i * d..(i + 1) * d];
        let te = &mut grad[layout.tok_emb.start + id * d..layout.tok_emb.start + (id + 1) * d];
        for c in 0..d {
            te[c] += drow[c];
        }
        let pe = &mut grad[layout.pos_emb.start + i * d..layout.pos_emb.start + (i + 1) * d];
        for c in 0..d {
            pe[c] += drow[c];
        }
        let se = &mut grad[layout.seg_emb.start + segm * d..layout.seg_emb.start + (segm + 1) * d];
        for c in 0..d {
            se[c] += drow[c];
        }
        let matm = cache.match_ids[i] as usize;
        let me = &mut grad[layout.match_emb.start + matm * d..layout.match_emb.start + (matm + 1) * d];
        for c in 0..d {
            me[c] += drow[c];
        }
    }
}
