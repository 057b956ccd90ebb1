//! Minimal dense linear algebra on flat `f64` slices.
//!
//! All model parameters live in flat vectors; these helpers interpret
//! row-major sub-slices as matrices. Dimensions here are small (sequence
//! lengths in the tens, hidden sizes in the low hundreds), so plain
//! loops are fine.

use alloc::vec;
use alloc::vec::Vec;

/// y[n x dout] = x[n x din] * w[din x dout] + b[dout]
pub fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * din);
    debug_assert_eq!(w.len(), din * dout);
    debug_assert_eq!(b.len(), dout);
    let mut y = vec![0.0; n * dout];
    for r in 0..n {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        yr.copy_from_slice(b);
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[k * dout..(k + 1) * dout];
            for (yv, &wv) in yr.iter_mut().zip(wrow.iter()) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Backward of `linear`. Accumulates into dw/db, returns dx.
pub fn linear_backward(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    debug_assert_eq!(dy.len(), n * dout);
    let mut dx = vec![0.0; n * din];
    for r in 0..n {
        let xr = &x[r * din..(r + 1) * din];
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (dbv, &dyv) in db.iter_mut().zip(dyr.iter()) {
            *dbv += dyv;
        }
        let dxr = &mut dx[r * din..(r + 1) * din];
        for k in 0..din {
            let wrow = &w[k * dout..(k + 1) * dout];
            let dwrow = &mut dw[k * dout..(k + 1) * dout];
            let xv = xr[k];
            let mut acc = 0.0;
            for j in 0..dout {
                acc += dyr[j] * wrow[j];
                dwrow[j] += xv * dyr[j];
            }
            dxr[k] = acc;
        }
    }
    dx
}

/// Single-vector linear: y[dout] = xᵀ w + b.
pub fn linear_vec(x: &[f64], w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    linear(x, 1, x.len(), w, b, dout)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    crate::mathx::sqrt(dot(a, a))
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv += alpha * xv;
    }
}
