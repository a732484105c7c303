//! Reference implementations written straight from the defining sums, kept
//! independent of the library's kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subgoal_core::{Matrix, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

pub fn random_tensor(rng: &mut ChaCha8Rng, d: usize, j: usize, l: usize) -> Tensor3 {
    Tensor3::from_fn(d, j, l, |_, _, _| rng.random::<f64>())
}

/// `X̃[d][t] = Σ_j Σ_ℓ O[d][j][ℓ] · H[j][t−ℓ]`.
pub fn conv_forward(o: &Tensor3, h: &Matrix) -> Vec<Vec<f64>> {
    let (d, j, l) = o.dims();
    let t = h.cols();
    let mut out = vec![vec![0.0; t]; d];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            for f in 0..j {
                for lag in 0..l {
                    if lag <= c {
                        *slot += o[(r, f, lag)] * h[(f, c - lag)];
                    }
                }
            }
        }
    }
    out
}

/// `(O ⋆ X)[j][t] = Σ_d Σ_ℓ O[d][j][ℓ] · X[d][t+ℓ]`.
pub fn conv_transpose(o: &Tensor3, x: &Matrix) -> Vec<Vec<f64>> {
    let (d, j, l) = o.dims();
    let t = x.cols();
    let mut out = vec![vec![0.0; t]; j];
    for (f, row) in out.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            for r in 0..d {
                for lag in 0..l {
                    if c + lag < t {
                        *slot += o[(r, f, lag)] * x[(r, c + lag)];
                    }
                }
            }
        }
    }
    out
}

fn mat(a: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(a).unwrap()
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| (0..cols).map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum()).collect())
        .collect()
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|c| a.iter().map(|r| r[c]).collect()).collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Classic Lee–Seung step for `X ≈ W H`:
/// `H ← H ∘ WᵀX / (WᵀWH + ε)`, `W ← W ∘ XHᵀ / (WHHᵀ + ε)` (with the new `H`).
pub fn lee_seung_step(x: &Matrix, w: &Matrix, h: &Matrix, eps: f64) -> (Matrix, Matrix) {
    let (x, w, h) = (rows(x), rows(w), rows(h));
    let wt = transpose(&w);
    let num = mul(&wt, &x);
    let den = mul(&mul(&wt, &w), &h);
    let h1: Vec<Vec<f64>> = h
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(c, v)| v * num[i][c] / (den[i][c] + eps))
                .collect()
        })
        .collect();
    let h1t = transpose(&h1);
    let num = mul(&x, &h1t);
    let den = mul(&mul(&w, &h1), &h1t);
    let w1: Vec<Vec<f64>> = w
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(c, v)| v * num[i][c] / (den[i][c] + eps))
                .collect()
        })
        .collect();
    (mat(&w1), mat(&h1))
}

/// Largest entrywise difference relative to the largest magnitude of `b`.
pub fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let scale = b
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

pub fn rel_err_m(a: &Matrix, b: &Matrix) -> f64 {
    rel_err(&rows(a), &rows(b))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    rows(m)
}

pub fn frob_sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}
