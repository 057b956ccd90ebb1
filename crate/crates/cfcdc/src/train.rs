//! Staged training. Each clause module trains on its own candidates with
//! the two-pass consistency objective; the coupling module then trains on
//! frozen pooled encodings. Batch gradients are accumulated over fixed
//! chunks in parallel and reduced in chunk order, so results do not depend
//! on thread scheduling.

use std::io::Write;

use cfcdc_core::cfcc::{self, BranchGrads, CfccBranch, CfccModule};
use cfcdc_core::cfcd::{
    self, adversarial_candidate, fgm_perturbation, predict_candidate, train_candidate, CfcdError,
    Grads, Hyper,
};
use cfcdc_core::encoder::Layout;
use cfcdc_core::ifcd::IfcdError;
use cfcdc_core::mathx;
use cfcdc_core::opt::{clip_grad_norm, AdamConfig, AdamState};
use cfcdc_core::rng::Rng;
use cfcdc_core::{CfcdModule, ClauseRole};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::prepare::Dataset;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at {role} epoch {epoch}")]
    Diverged { role: &'static str, epoch: usize },
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CfcdError> for TrainError {
    fn from(e: CfcdError) -> Self {
        TrainError::Model(format!("{e:?}"))
    }
}

impl From<IfcdError> for TrainError {
    fn from(e: IfcdError) -> Self {
        TrainError::Model(format!("{e:?}"))
    }
}

pub struct EpochStats {
    pub label_loss: f64,
    pub consistency: f64,
    pub pooled_consistency: f64,
    pub accuracy: f64,
}

/// Flattened (example index, candidate index) pairs for one split.
fn candidate_index(ds: &Dataset) -> Vec<(usize, usize)> {
    ds.train_prep
        .iter()
        .enumerate()
        .flat_map(|(e, p)| (0..p.candidates.len()).map(move |c| (e, c)))
        .collect()
}

fn role_id(role: ClauseRole) -> u64 {
    match role {
        ClauseRole::Select => 1,
        ClauseRole::Where => 2,
        ClauseRole::SelectWhere => 3,
    }
}

/// Chunked parallel map: deterministic because chunk boundaries are fixed
/// and partial results are folded in chunk order by the caller. The closure
/// receives each chunk and its start offset within `items`.
fn parallel_chunks<T, G: Send>(
    items: &[T],
    f: impl Fn(&[T], usize) -> Result<G, TrainError> + Sync,
) -> Result<Vec<G>, TrainError>
where
    T: Sync,
{
    let chunk = items.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    items
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, c)| f(c, ci * chunk))
        .collect()
}

struct CfcdOptimizer {
    encoder: AdamState,
    ifcd: Option<AdamState>,
    heads: AdamState,
    cfg: AdamConfig,
    clip: f64,
}

impl CfcdOptimizer {
    fn new(module: &CfcdModule, run: &RunConfig) -> Self {
        CfcdOptimizer {
            encoder: AdamState::new(module.encoder.flat.len()),
            ifcd: module.ifcd.as_ref().map(|p| AdamState::new(p.flat.len())),
            heads: AdamState::new(module.heads.len()),
            cfg: AdamConfig { lr: run.optim.lr, ..AdamConfig::default() },
            clip: run.optim.clip_norm,
        }
    }

    fn apply(&mut self, module: &mut CfcdModule, grads: &mut Grads) {
        clip_grad_norm(
            &mut [&mut grads.encoder, &mut grads.ifcd, &mut grads.heads],
            self.clip,
        );
        self.encoder.step(&self.cfg, &mut module.encoder.flat, &grads.encoder);
        if let (Some(state), Some(params)) = (self.ifcd.as_mut(), module.ifcd.as_mut()) {
            state.step(&self.cfg, &mut params.flat, &grads.ifcd);
        }
        self.heads.step(&self.cfg, &mut module.heads, &grads.heads);
    }
}

fn batch_grads(
    module: &CfcdModule,
    ds: &Dataset,
    batch: &[(usize, usize)],
    hyper: &Hyper,
    seed: u64,
    epoch: usize,
    batch_start: usize,
) -> Result<(Grads, cfcd::LossBreakdown), TrainError> {
    let role = module.role;
    let rid = role_id(role);
    let parts = parallel_chunks(batch, |items, chunk_start| {
        let mut g = Grads::zeros(module);
        let mut sums = [0.0f64; 4];
        for (offset, &(e, c)) in items.iter().enumerate() {
            // position in the shuffled epoch order keys the dropout streams
            let pos = batch_start + chunk_start + offset;
            let cand = &ds.train_prep[e].candidates[c];
            let mut rng_a = Rng::derive(seed, &[rid, epoch as u64, pos as u64, 1]);
            let mut rng_b = Rng::derive(seed, &[rid, epoch as u64, pos as u64, 2]);
            let b = train_candidate(
                module,
                &cand.tokens,
                cand.targets(role),
                hyper,
                &mut rng_a,
                &mut rng_b,
                &mut g,
            )?;
            sums[0] += b.label;
            sums[1] += b.consistency;
            sums[2] += b.pooled_consistency;
            sums[3] += b.total;
        }
        Ok((g, sums))
    })?;
    let mut grads = Grads::zeros(module);
    let mut totals = [0.0f64; 4];
    for (g, sums) in parts {
        grads.add(&g);
        for (t, v) in totals.iter_mut().zip(sums) {
            *t += v;
        }
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((
        grads,
        cfcd::LossBreakdown {
            label: totals[0] / n,
            consistency: totals[1] / n,
            pooled_consistency: totals[2] / n,
            total: totals[3] / n,
        },
    ))
}

fn fgm_batch(
    module: &mut CfcdModule,
    ds: &Dataset,
    batch: &[(usize, usize)],
    grads: &mut Grads,
    epsilon: f64,
    seed: u64,
    epoch: usize,
    batch_start: usize,
) -> Result<(), TrainError> {
    let layout = Layout::new(&module.encoder.cfg);
    let Some(r) = fgm_perturbation(&grads.encoder[layout.tok_emb.clone()], epsilon) else {
        return Ok(()); // zero-gradient batch: skip cleanly
    };
    let saved = module.encoder.flat[layout.tok_emb.clone()].to_vec();
    for (p, d) in module.encoder.flat[layout.tok_emb.clone()].iter_mut().zip(&r) {
        *p += d;
    }
    let role = module.role;
    let rid = role_id(role);
    let frozen: &CfcdModule = module;
    let result = parallel_chunks(batch, |items, chunk_start| {
        let mut g = Grads::zeros(frozen);
        for (offset, &(e, c)) in items.iter().enumerate() {
            let pos = batch_start + chunk_start + offset;
            let cand = &ds.train_prep[e].candidates[c];
            let mut rng = Rng::derive(seed, &[rid, epoch as u64, pos as u64, 3]);
            adversarial_candidate(frozen, &cand.tokens, cand.targets(role), &mut rng, &mut g)?;
        }
        Ok(g)
    });
    // restore bit-exactly before propagating any error
    module.encoder.flat[layout.tok_emb.clone()].copy_from_slice(&saved);
    let parts = result?;
    let mut adv = Grads::zeros(module);
    for p in &parts {
        adv.add(p);
    }
    adv.scale(1.0 / batch.len() as f64);
    grads.add(&adv);
    Ok(())
}

/// Candidate-level training accuracy on a deterministic subsample; used for
/// early stopping only.
fn role_accuracy(module: &CfcdModule, ds: &Dataset, limit: usize) -> Result<f64, TrainError> {
    let role = module.role;
    let n = ds.train_prep.len().min(limit);
    let results: Vec<Result<(usize, usize), TrainError>> = ds.train_prep[..n]
        .par_iter()
        .map(|prep| {
            let mut correct = 0usize;
            let mut total = 0usize;
            for cand in &prep.candidates {
                let pred = predict_candidate(module, &cand.tokens)?;
                let t = cand.targets(role);
                let mut ok = (pred.rank_p >= 0.5) == t.relevant;
                if let Some(num) = t.num {
                    ok &= mathx::argmax(&pred.num_dist) == num;
                }
                if t.relevant {
                    if let (Some(agg), Some(dist)) = (t.agg, &pred.agg_dist) {
                        ok &= mathx::argmax(dist) == agg;
                    }
                    if let (Some(op), Some(dist)) = (t.op, &pred.op_dist) {
                        ok &= mathx::argmax(dist) == op;
                    }
                    if let (Some((s, e)), Some(sd), Some(ed)) =
                        (t.span, &pred.start_dist, &pred.end_dist)
                    {
                        ok &= mathx::argmax(sd) == s && mathx::argmax(ed) == e;
                    }
                }
                correct += ok as usize;
                total += 1;
            }
            Ok((correct, total))
        })
        .collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in results {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

/// Train one clause module from scratch. Logs one line per epoch.
pub fn train_role(
    ds: &Dataset,
    cfg: &RunConfig,
    role: ClauseRole,
    use_ifcd: bool,
    log: &mut dyn Write,
) -> Result<CfcdModule, TrainError> {
    let enc_cfg = cfg.encoder.to_encoder_config(ds.vocab.size());
    let lstm_dim = use_ifcd.then_some(cfg.ifcd.lstm_dim);
    let mut module = CfcdModule::init(role, enc_cfg, lstm_dim, cfg.seed);
    let mut opt = CfcdOptimizer::new(&module, cfg);
    train_role_epochs(ds, cfg, &mut module, &mut opt, cfg.optim.epochs, log)?;
    Ok(module)
}

fn train_role_epochs(
    ds: &Dataset,
    cfg: &RunConfig,
    module: &mut CfcdModule,
    opt: &mut CfcdOptimizer,
    epochs: usize,
    log: &mut dyn Write,
) -> Result<(), TrainError> {
    let role = module.role;
    let rid = role_id(role);
    let hyper = Hyper {
        lambda: cfg.rdrop.lambda,
        mu: cfg.rdrop.mu,
        one_sided_kl: cfg.rdrop.one_sided,
    };
    let index = candidate_index(ds);
    for epoch in 0..epochs {
        let mut order = index.clone();
        let mut shuffle_rng = Rng::derive(cfg.seed, &[rid, 0x5e, epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        let mut sums = cfcd::LossBreakdown::default();
        let mut n_batches = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let end = (start + cfg.optim.batch_size).min(order.len());
            let batch = &order[start..end];
            let (mut grads, breakdown) =
                batch_grads(module, ds, batch, &hyper, cfg.seed, epoch, start)?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged { role: role.name(), epoch });
            }
            if cfg.fgm.enabled {
                fgm_batch(module, ds, batch, &mut grads, cfg.fgm.epsilon, cfg.seed, epoch, start)?;
            }
            opt.apply(module, &mut grads);
            sums.label += breakdown.label;
            sums.consistency += breakdown.consistency;
            sums.pooled_consistency += breakdown.pooled_consistency;
            sums.total += breakdown.total;
            n_batches += 1;
            start = end;
        }
        let nb = n_batches.max(1) as f64;
        let acc = role_accuracy(module, ds, 200)?;
        writeln!(
            log,
            "role={} epoch={} loss_1={:.4} loss_2={:.4} loss_3={:.4} total={:.4} acc={:.3}",
            role.name(),
            epoch,
            sums.label / nb,
            sums.consistency / nb,
            sums.pooled_consistency / nb,
            sums.total / nb,
            acc
        )?;
        if acc >= cfg.optim.early_stop_acc {
            break;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Coupling stage
// ---------------------------------------------------------------------------

/// Frozen pooled encodings for every (example, candidate), per clause module.
pub struct PooledCache {
    /// [example][candidate] -> pooled vector.
    pub sel: Vec<Vec<Vec<f64>>>,
    pub whr: Vec<Vec<Vec<f64>>>,
    pub sw: Vec<Vec<Vec<f64>>>,
}

pub fn pooled_cache(
    modules: [&CfcdModule; 3],
    ds: &Dataset,
    split: &[crate::prepare::PreparedExample],
) -> Result<PooledCache, TrainError> {
    let _ = ds;
    let run = |module: &CfcdModule| -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
        let rows: Vec<Result<Vec<Vec<f64>>, TrainError>> = split
            .par_iter()
            .map(|prep| {
                prep.candidates
                    .iter()
                    .map(|cand| Ok(predict_candidate(module, &cand.tokens)?.pooled))
                    .collect()
            })
            .collect();
        rows.into_iter().collect()
    };
    Ok(PooledCache { sel: run(modules[0])?, whr: run(modules[1])?, sw: run(modules[2])? })
}

/// Coupled inputs for one candidate: each branch sees its own clause
/// encoding first, then the select+where union encoding.
pub fn coupled_inputs(cache: &PooledCache, e: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    (
        cfcc::couple(&cache.sel[e][c], &cache.sw[e][c]),
        cfcc::couple(&cache.whr[e][c], &cache.sw[e][c]),
    )
}

struct BranchOptimizer {
    ifcd: AdamState,
    heads: AdamState,
    cfg: AdamConfig,
    clip: f64,
}

impl BranchOptimizer {
    fn new(branch: &CfccBranch, run: &RunConfig) -> Self {
        BranchOptimizer {
            ifcd: AdamState::new(branch.ifcd.flat.len()),
            heads: AdamState::new(branch.heads.len()),
            cfg: AdamConfig { lr: run.optim.lr, ..AdamConfig::default() },
            clip: run.optim.clip_norm,
        }
    }

    fn apply(&mut self, branch: &mut CfccBranch, grads: &mut BranchGrads) {
        clip_grad_norm(&mut [&mut grads.ifcd, &mut grads.heads], self.clip);
        self.ifcd.step(&self.cfg, &mut branch.ifcd.flat, &grads.ifcd);
        self.heads.step(&self.cfg, &mut branch.heads, &grads.heads);
    }
}

fn branch_accuracy(
    branch: &CfccBranch,
    ds: &Dataset,
    cache: &PooledCache,
    select_side: bool,
    limit: usize,
) -> Result<f64, TrainError> {
    let n = ds.train_prep.len().min(limit);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (e, prep) in ds.train_prep[..n].iter().enumerate() {
        for (c, cand) in prep.candidates.iter().enumerate() {
            let (sel_in, whr_in) = coupled_inputs(cache, e, c);
            let coupled = if select_side { sel_in } else { whr_in };
            let pred = cfcc::branch_predict(branch, &coupled)?;
            let t = if select_side { &cand.select } else { &cand.whr };
            let mut ok = (pred.rank_p >= 0.5) == t.relevant;
            if let Some(num) = t.num {
                ok &= mathx::argmax(&pred.num_dist) == num;
            }
            if t.relevant {
                if let Some(agg) = t.agg {
                    ok &= mathx::argmax(&pred.class_dist) == agg;
                }
                if let Some(op) = t.op {
                    ok &= mathx::argmax(&pred.class_dist) == op;
                }
            }
            correct += ok as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

/// Train the coupling module on frozen clause encodings.
pub fn train_cfcc(
    ds: &Dataset,
    cfg: &RunConfig,
    modules: [&CfcdModule; 3],
    log: &mut dyn Write,
) -> Result<CfccModule, TrainError> {
    let hidden = modules[0].encoder.cfg.hidden_dim;
    let mut cfcc_module = CfccModule::init(hidden, cfg.ifcd.lstm_dim.max(1), cfg.seed);
    let cache = pooled_cache(modules, ds, &ds.train_prep)?;
    let index = candidate_index(ds);
    let mut sel_opt = BranchOptimizer::new(&cfcc_module.sel, cfg);
    let mut whr_opt = BranchOptimizer::new(&cfcc_module.whr, cfg);
    for epoch in 0..cfg.optim.epochs {
        let mut order = index.clone();
        let mut shuffle_rng = Rng::derive(cfg.seed, &[0xcc, 0x5e, epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let end = (start + cfg.optim.batch_size).min(order.len());
            let batch = &order[start..end];
            let sel_ref = &cfcc_module.sel;
            let whr_ref = &cfcc_module.whr;
            let parts = parallel_chunks(batch, |items, _| {
                let mut gs = BranchGrads::zeros(sel_ref);
                let mut gw = BranchGrads::zeros(whr_ref);
                let mut l = 0.0;
                for &(e, c) in items {
                    let cand = &ds.train_prep[e].candidates[c];
                    let (sel_in, whr_in) = coupled_inputs(&cache, e, c);
                    l += cfcc::branch_train(sel_ref, &sel_in, &cand.select, &mut gs)?;
                    l += cfcc::branch_train(whr_ref, &whr_in, &cand.whr, &mut gw)?;
                }
                Ok((gs, gw, l))
            })?;
            let mut gs = BranchGrads::zeros(&cfcc_module.sel);
            let mut gw = BranchGrads::zeros(&cfcc_module.whr);
            let mut loss = 0.0;
            for (ps, pw, l) in &parts {
                gs.add(ps);
                gw.add(pw);
                loss += l;
            }
            if !loss.is_finite() {
                return Err(TrainError::Diverged { role: "couple", epoch });
            }
            let inv = 1.0 / batch.len() as f64;
            for v in gs.ifcd.iter_mut().chain(gs.heads.iter_mut()) {
                *v *= inv;
            }
            for v in gw.ifcd.iter_mut().chain(gw.heads.iter_mut()) {
                *v *= inv;
            }
            sel_opt.apply(&mut cfcc_module.sel, &mut gs);
            whr_opt.apply(&mut cfcc_module.whr, &mut gw);
            loss_sum += loss * inv;
            n_batches += 1;
            start = end;
        }
        let acc_s = branch_accuracy(&cfcc_module.sel, ds, &cache, true, 200)?;
        let acc_w = branch_accuracy(&cfcc_module.whr, ds, &cache, false, 200)?;
        writeln!(
            log,
            "role=couple epoch={} loss={:.4} sel_acc={:.3} whr_acc={:.3}",
            epoch,
            loss_sum / n_batches.max(1) as f64,
            acc_s,
            acc_w
        )?;
        if acc_s.min(acc_w) >= cfg.optim.early_stop_acc {
            break;
        }
    }
    Ok(cfcc_module)
}

/// Coupling stage with unfrozen encoders: alternates one clause-training
/// epoch per module with the coupling epochs, so the encoders keep moving
/// while the coupling heads fit.
pub fn train_cfcc_finetune_all(
    ds: &Dataset,
    cfg: &RunConfig,
    modules: [&mut CfcdModule; 3],
    log: &mut dyn Write,
) -> Result<CfccModule, TrainError> {
    let [sel, whr, sw] = modules;
    let mut opts = [
        CfcdOptimizer::new(sel, cfg),
        CfcdOptimizer::new(whr, cfg),
        CfcdOptimizer::new(sw, cfg),
    ];
    for (module, opt) in [&mut *sel, &mut *whr, &mut *sw].into_iter().zip(opts.iter_mut()) {
        train_role_epochs(ds, cfg, module, opt, 1, log)?;
    }
    train_cfcc(ds, cfg, [sel, whr, sw], log)
}
