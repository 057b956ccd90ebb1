//! Scalar math and distribution helpers shared across the model code.

use alloc::vec;
use alloc::vec::Vec;

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// GELU with the exact erf form; used by the encoder feed-forward.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// d gelu / dx.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = exp(-0.5 * x * x) / sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

pub fn logsumexp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = logits.iter().map(|&x| exp(x - m)).sum();
    m + ln(s)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| exp(x - m)).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Floor every probability at `eps` and renormalize; keeps KL finite.
pub fn floor_distribution(p: &[f64], eps: f64) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&x| x.max(eps)).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// KL(p || q) over two strictly positive distributions.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (ln(pi) - ln(qi)) } else { 0.0 })
        .sum()
}

/// Symmetric KL: 0.5 * (KL(p||q) + KL(q||p)).
pub fn kl_sym(p: &[f64], q: &[f64]) -> f64 {
    0.5 * (kl_div(p, q) + kl_div(q, p))
}

/// Cross-entropy -ln p[label].
pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -ln(p[label].max(1e-300))
}

/// Softmax cross-entropy from logits; returns (loss, d loss / d logits).
pub fn softmax_ce_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = cross_entropy(&p, label);
    let mut grad = p;
    grad[label] -= 1.0;
    (loss, grad)
}

/// Gradient of KL(softmax(a) || softmax(b)) with respect to logits a and b.
///
/// With p = softmax(a), q = softmax(b) and L_i = ln p_i - ln q_i:
///   dKL/da_j = p_j (L_j - KL),  dKL/db_j = q_j - p_j.
pub fn kl_softmax_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let p = softmax(a);
    let q = softmax(b);
    let kl = kl_div(&p, &q);
    let da: Vec<f64> = p
        .iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| pi * (ln(pi.max(1e-300)) - ln(qi.max(1e-300)) - kl))
        .collect();
    let db: Vec<f64> = p.iter().zip(q.iter()).map(|(&pi, &qi)| qi - pi).collect();
    (kl, da, db)
}

/// Symmetric KL between softmax(a) and softmax(b); returns (value, da, db).
pub fn kl_sym_softmax_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (k1, da1, db1) = kl_softmax_grads(a, b);
    let (k2, db2, da2) = kl_softmax_grads(b, a);
    let da: Vec<f64> = da1.iter().zip(da2.iter()).map(|(x, y)| 0.5 * (x + y)).collect();
    let db: Vec<f64> = db1.iter().zip(db2.iter()).map(|(x, y)| 0.5 * (x + y)).collect();
    (0.5 * (k1 + k2), da, db)
}

/// Argmax with ties broken toward the smaller index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Top-k indices by value descending, ties toward the smaller index.
pub fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Uniform distribution of length n.
pub fn uniform_dist(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
