//! Regularized convolutional NMF.
//!
//! `X ≈ O ∗ H` with `O` a `D × J × L` bank of temporal patterns and `H` a
//! `J × T` activation matrix. Besides reconstruction, the objective pushes
//! `H` toward binary values (`R_bin`), penalizes activations of competing
//! factors (`R_1`), and penalizes overlap between factors within a window of
//! `L` steps (`R_sim`).

mod io;

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorKind;
use crate::error::{Error, Result};
use crate::tensorops::{conv_forward, conv_transpose, dot, smooth_rows, Matrix, Tensor3};

pub use io::{load_fit, save_fit, FIT_CONFIG_FILE, H_FILE, LOSS_TRACE_FILE, O_FILE};

/// Gradient used for the `R_1` term in the `H` update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum L1Gradient {
    /// `λ_1 (𝟙 − I) H`: each factor is pushed down by the others' activity.
    #[default]
    CrossFactor,
    /// `λ_1 𝟙`: the literal gradient of `‖H‖₁`.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqNmfConfig {
    pub j: usize,
    pub l: usize,
    pub lambda_bin: f64,
    pub lambda_1: f64,
    pub lambda_sim: f64,
    pub max_iter: usize,
    pub start_bin_loss_iter: usize,
    /// Convergence threshold on the per-iteration change of the total loss,
    /// relative to the initial total.
    pub tolerance: f64,
    pub epsilon_div: f64,
    pub l1_gradient: L1Gradient,
    pub seed: u64,
}

impl Default for SeqNmfConfig {
    fn default() -> Self {
        SeqNmfConfig {
            j: 3,
            l: 3,
            lambda_bin: 1e-2,
            lambda_1: 1e-3,
            lambda_sim: 1e-4,
            max_iter: 300,
            start_bin_loss_iter: 30,
            tolerance: 1e-7,
            epsilon_div: 1e-10,
            l1_gradient: L1Gradient::CrossFactor,
            seed: 0,
        }
    }
}

impl SeqNmfConfig {
    /// Defaults with the factor count and pattern length used for each dataset.
    pub fn for_generator(kind: GeneratorKind) -> Self {
        let (j, l) = match kind {
            GeneratorKind::Color3Simple | GeneratorKind::Color3Conditional => (3, 3),
            GeneratorKind::Color10 => (2, 10),
            GeneratorKind::Driving => (5, 40),
        };
        SeqNmfConfig {
            j,
            l,
            ..SeqNmfConfig::default()
        }
    }

    /// Same configuration with every penalty switched off.
    pub fn unregularized(&self) -> Self {
        SeqNmfConfig {
            lambda_bin: 0.0,
            lambda_1: 0.0,
            lambda_sim: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.l == 0 || self.max_iter == 0 {
            return Err(Error::invalid("J, L and max_iter must all be >= 1"));
        }
        for (name, v) in [
            ("lambda_bin", self.lambda_bin),
            ("lambda_1", self.lambda_1),
            ("lambda_sim", self.lambda_sim),
            ("tolerance", self.tolerance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon_div > 0.0 && self.epsilon_div.is_finite()) {
            return Err(Error::invalid("epsilon_div must be finite and > 0"));
        }
        Ok(())
    }

    fn bin_active(&self, iter: usize) -> bool {
        iter >= self.start_bin_loss_iter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub r_bin: f64,
    pub r_1: f64,
    pub r_sim: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub o: Tensor3,
    pub h: Matrix,
    /// Loss at initialization followed by one entry per iteration.
    pub loss_trace: Vec<LossBreakdown>,
    /// Unregularized loss after the final penalty-free update.
    pub final_loss: LossBreakdown,
    pub iterations_run: usize,
    pub converged: bool,
    /// Factors whose activations collapsed to zero.
    pub dead_factors: Vec<usize>,
}

/// Random strictly positive factors. Entries are `U(0,1]` scaled by
/// `2·sqrt(x_mean / (J·L))`, which makes the expected reconstruction mean
/// equal `x_mean` away from the left edge.
pub fn init_factors(d: usize, j: usize, l: usize, t: usize, x_mean: f64, seed: u64) -> Result<(Tensor3, Matrix)> {
    if d == 0 || j == 0 || l == 0 || t == 0 {
        return Err(Error::invalid("factor dimensions must be positive"));
    }
    if !(x_mean >= 0.0 && x_mean.is_finite()) {
        return Err(Error::invalid(format!("x_mean must be finite and >= 0, got {x_mean}")));
    }
    let scale = 2.0 * (x_mean.max(1e-6) / (j * l) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || scale * (1.0 - rng.random::<f64>());
    let o = Tensor3::from_fn(d, j, l, |_, _, _| draw());
    let h = Matrix::from_fn(j, t, |_, _| draw());
    Ok((o, h))
}

fn check_shapes(x: &Matrix, o: &Tensor3, h: &Matrix, mask: Option<&[bool]>) -> Result<()> {
    let (d, j, _) = o.dims();
    if x.rows() != d {
        return Err(Error::dims("seqnmf data rows", d, x.rows()));
    }
    if h.rows() != j {
        return Err(Error::dims("seqnmf activation rows", j, h.rows()));
    }
    if h.cols() != x.cols() {
        return Err(Error::dims("seqnmf time columns", x.cols(), h.cols()));
    }
    if let Some(m) = mask {
        if m.len() != x.cols() {
            return Err(Error::dims("seqnmf column mask", x.cols(), m.len()));
        }
    }
    Ok(())
}

/// Zeroes the columns the mask excludes.
fn apply_mask(m: &mut Matrix, mask: Option<&[bool]>) {
    let Some(mask) = mask else { return };
    let t = m.cols();
    for r in 0..m.rows() {
        for (v, &keep) in m.row_mut(r).iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        debug_assert_eq!(m.row(r).len(), t);
    }
}

/// `x` with the excluded columns zeroed, borrowed when nothing changes.
fn masked<'a>(x: &'a Matrix, mask: Option<&[bool]>) -> Cow<'a, Matrix> {
    match mask {
        Some(m) if m.iter().any(|&k| !k) => {
            let mut owned = x.clone();
            apply_mask(&mut owned, Some(m));
            Cow::Owned(owned)
        }
        _ => Cow::Borrowed(x),
    }
}

/// Sum over the other rows: `(𝟙 − I) M`.
fn others_sum(m: &Matrix) -> Matrix {
    let mut total = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        total.iter_mut().zip(m.row(r)).for_each(|(a, b)| *a += b);
    }
    Matrix::from_fn(m.rows(), m.cols(), |r, c| total[c] - m[(r, c)])
}

/// `r_sim / λ_sim = Σ_{i≠j} ((O ⋆ X) S Hᵀ)_{ij}`.
fn similarity(ox: &Matrix, h: &Matrix, l: usize) -> Result<f64> {
    let hs = smooth_rows(h, l);
    let c = ox.matmul_transposed(&hs)?;
    let mut s = 0.0;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            if i != j {
                s += c[(i, j)].abs();
            }
        }
    }
    Ok(s)
}

/// Objective value at `(O, H)` with the binary penalty counted as given in `cfg`.
pub fn loss(x: &Matrix, o: &Tensor3, h: &Matrix, cfg: &SeqNmfConfig) -> Result<LossBreakdown> {
    loss_masked(x, o, h, cfg, None)
}

/// Like [`loss`], with columns where `mask` is false left out of the
/// reconstruction term.
pub fn loss_masked(
    x: &Matrix,
    o: &Tensor3,
    h: &Matrix,
    cfg: &SeqNmfConfig,
    mask: Option<&[bool]>,
) -> Result<LossBreakdown> {
    check_shapes(x, o, h, mask)?;
    let x = masked(x, mask);
    let x = x.as_ref();
    let mut xt = conv_forward(o, h)?;
    apply_mask(&mut xt, mask);
    let reconstruction = crate::tensorops::frobenius_sq(x, &xt)?;
    let r_bin = cfg.lambda_bin * h.as_slice().iter().map(|&v| (v * (1.0 - v)).powi(2)).sum::<f64>();
    let r_1 = cfg.lambda_1 * h.as_slice().iter().map(|v| v.abs()).sum::<f64>();
    let r_sim = if cfg.lambda_sim > 0.0 && h.rows() > 1 {
        cfg.lambda_sim * similarity(&conv_transpose(o, x)?, h, cfg.l)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        reconstruction,
        r_bin,
        r_1,
        r_sim,
        total: reconstruction + r_bin + r_1 + r_sim,
    })
}

/// Regularizer gradient with respect to `H`, clipped below at zero. The
/// binary term is included only once `iter ≥ start_bin_loss_iter`.
pub fn grad_reg_h(x: &Matrix, o: &Tensor3, h: &Matrix, cfg: &SeqNmfConfig, iter: usize) -> Result<Matrix> {
    check_shapes(x, o, h, None)?;
    let ox = if cfg.lambda_sim > 0.0 && h.rows() > 1 {
        Some(conv_transpose(o, x)?)
    } else {
        None
    };
    grad_reg_h_with(ox.as_ref(), h, cfg, iter)
}

fn grad_reg_h_with(ox: Option<&Matrix>, h: &Matrix, cfg: &SeqNmfConfig, iter: usize) -> Result<Matrix> {
    let mut g = Matrix::zeros(h.rows(), h.cols());
    if cfg.lambda_bin > 0.0 && cfg.bin_active(iter) {
        let lb = cfg.lambda_bin;
        g = h.map(|v| {
            let t0 = 1.0 - v;
            lb * (v * t0 * t0 - v * v * t0)
        });
    }
    if cfg.lambda_1 > 0.0 {
        let l1 = match cfg.l1_gradient {
            L1Gradient::CrossFactor => others_sum(h).scale(cfg.lambda_1),
            L1Gradient::Ones => Matrix::filled(h.rows(), h.cols(), cfg.lambda_1),
        };
        g = g.zip_map(&l1, |a, b| a + b)?;
    }
    if let Some(ox) = ox {
        if cfg.lambda_sim > 0.0 && h.rows() > 1 {
            let sim = others_sum(&smooth_rows(ox, cfg.l)).scale(cfg.lambda_sim);
            g = g.zip_map(&sim, |a, b| a + b)?;
        }
    }
    Ok(g.map(|v| v.max(0.0)))
}

/// `Σ_t A_{r, t+lag} · B_{c, t}` for every row pair: `shift(A, −lag) · Bᵀ`.
fn lagged_cross(a: &Matrix, b: &Matrix, lag: usize) -> Matrix {
    let t = a.cols();
    Matrix::from_fn(a.rows(), b.rows(), |r, c| {
        if lag >= t {
            0.0
        } else {
            dot(&a.row(r)[lag..], &b.row(c)[..t - lag])
        }
    })
}

/// Regularizer gradient with respect to the lag-`lag` slice of `O`:
/// `λ_sim · shift(X, −ℓ) · (H S)ᵀ · (𝟙 − I)`, the exact derivative of
/// `r_sim`. The binary and `L1` penalties do not depend on `O`.
pub fn grad_reg_o(x: &Matrix, h: &Matrix, cfg: &SeqNmfConfig, lag: usize) -> Result<Matrix> {
    if lag >= cfg.l {
        return Err(Error::invalid(format!("lag {lag} out of range for L = {}", cfg.l)));
    }
    if h.cols() != x.cols() {
        return Err(Error::dims("grad_reg_o time columns", x.cols(), h.cols()));
    }
    if cfg.lambda_sim == 0.0 || h.rows() < 2 {
        return Ok(Matrix::zeros(x.rows(), h.rows()));
    }
    let hs = smooth_rows(h, cfg.l);
    Ok(grad_reg_o_with(x, &hs, cfg, lag))
}

fn grad_reg_o_with(x: &Matrix, hs: &Matrix, cfg: &SeqNmfConfig, lag: usize) -> Matrix {
    let a = lagged_cross(x, hs, lag);
    // (A (𝟙 − I))_{dj} = Σ_{i≠j} A_{di}
    let row_totals: Vec<f64> = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
    Matrix::from_fn(a.rows(), a.cols(), |r, c| cfg.lambda_sim * (row_totals[r] - a[(r, c)]))
}

/// Multiplicative update of `H`.
pub fn update_h(x: &Matrix, o: &Tensor3, h: &Matrix, cfg: &SeqNmfConfig, iter: usize) -> Result<Matrix> {
    update_h_masked(x, o, h, cfg, iter, None)
}

pub fn update_h_masked(
    x: &Matrix,
    o: &Tensor3,
    h: &Matrix,
    cfg: &SeqNmfConfig,
    iter: usize,
    mask: Option<&[bool]>,
) -> Result<Matrix> {
    check_shapes(x, o, h, mask)?;
    let x = masked(x, mask);
    let ox = conv_transpose(o, &x)?;
    let mut xt = conv_forward(o, h)?;
    apply_mask(&mut xt, mask);
    let oxt = conv_transpose(o, &xt)?;
    let reg = grad_reg_h_with(Some(&ox), h, cfg, iter)?;
    let eps = cfg.epsilon_div;
    let data: Vec<f64> = h
        .as_slice()
        .iter()
        .zip(ox.as_slice())
        .zip(oxt.as_slice().iter().zip(reg.as_slice()))
        .map(|((&hv, &num), (&den, &g))| hv * num / (den + g + eps))
        .collect();
    finite_matrix(h.rows(), h.cols(), data, iter, "H")
}

/// Multiplicative update of every lag slice of `O`, all from the same
/// reconstruction.
pub fn update_o(x: &Matrix, o: &Tensor3, h: &Matrix, cfg: &SeqNmfConfig) -> Result<Tensor3> {
    update_o_masked(x, o, h, cfg, None, 0)
}

pub fn update_o_masked(
    x: &Matrix,
    o: &Tensor3,
    h: &Matrix,
    cfg: &SeqNmfConfig,
    mask: Option<&[bool]>,
    iter: usize,
) -> Result<Tensor3> {
    check_shapes(x, o, h, mask)?;
    let x = masked(x, mask);
    let x = x.as_ref();
    let (d, j, l) = o.dims();
    let mut xt = conv_forward(o, h)?;
    apply_mask(&mut xt, mask);
    let hs = (cfg.lambda_sim > 0.0 && j > 1).then(|| smooth_rows(h, cfg.l));
    let eps = cfg.epsilon_div;
    let mut out = Tensor3::zeros(d, j, l);
    for lag in 0..l {
        let num = lagged_cross(x, h, lag);
        let den = lagged_cross(&xt, h, lag);
        let reg = match &hs {
            Some(hs) if lag < cfg.l => grad_reg_o_with(x, hs, cfg, lag),
            _ => Matrix::zeros(d, j),
        };
        let slice = o.lag_slice(lag);
        let data: Vec<f64> = (0..d * j)
            .map(|k| slice.as_slice()[k] * num.as_slice()[k] / (den.as_slice()[k] + reg.as_slice()[k] + eps))
            .collect();
        let updated = finite_matrix(d, j, data, iter, "O")?;
        out.set_lag_slice(lag, &updated);
    }
    Ok(out)
}

fn finite_matrix(rows: usize, cols: usize, data: Vec<f64>, iter: usize, what: &str) -> Result<Matrix> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            iteration: iter,
            detail: format!(
                "{what} update produced {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            ),
        });
    }
    Matrix::from_vec(rows, cols, data)
}

/// Rescales every nonzero row of `H` to max 1 and moves the scale into the
/// matching factor of `O`. Returns the indices of all-zero rows, which are
/// left untouched.
pub fn renormalize(o: &mut Tensor3, h: &mut Matrix) -> Vec<usize> {
    let mut dead = Vec::new();
    for j in 0..h.rows() {
        let m = h.row(j).iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            h.row_mut(j).iter_mut().for_each(|v| *v /= m);
            o.scale_factor(j, m);
        } else {
            dead.push(j);
        }
    }
    dead
}

/// Fits `X ≈ O ∗ H`. `X` must lie in `[0, 1]`.
pub fn fit(x: &Matrix, cfg: &SeqNmfConfig) -> Result<FitResult> {
    fit_masked(x, None, cfg)
}

/// Like [`fit`], with columns where `mask` is false (trajectory separators)
/// left out of the reconstruction.
pub fn fit_masked(x: &Matrix, mask: Option<&[bool]>, cfg: &SeqNmfConfig) -> Result<FitResult> {
    cfg.validate()?;
    if !x.is_finite() || x.min() < 0.0 || x.max() > 1.0 {
        return Err(Error::invalid(format!(
            "data must be normalized into [0, 1] (found range [{}, {}])",
            x.min(),
            x.max()
        )));
    }
    let (d, t) = x.shape();
    let x_mean = match mask {
        Some(m) => {
            let kept = m.iter().filter(|&&k| k).count().max(1);
            let s: f64 = (0..d)
                .map(|r| x.row(r).iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| v).sum::<f64>())
                .sum();
            s / (kept * d) as f64
        }
        None => x.mean(),
    };
    let (mut o, mut h) = init_factors(d, cfg.j, cfg.l, t, x_mean, cfg.seed)?;
    check_shapes(x, &o, &h, mask)?;

    let mut trace = vec![loss_masked(x, &o, &h, &effective(cfg, 0), mask)?];
    let initial_total = trace[0].total;
    let mut converged = false;
    let mut iterations_run = 0;
    for iter in 1..=cfg.max_iter {
        h = update_h_masked(x, &o, &h, cfg, iter, mask)?;
        renormalize(&mut o, &mut h);
        o = update_o_masked(x, &o, &h, cfg, mask, iter)?;
        debug_assert!(
            o.min() >= 0.0 && h.min() >= 0.0,
            "negative factor entry at iteration {iter}"
        );
        let current = loss_masked(x, &o, &h, &effective(cfg, iter), mask)?;
        if !current.total.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: iter,
                detail: "loss is not finite".into(),
            });
        }
        let previous = trace.last().expect("trace starts non-empty").total;
        trace.push(current);
        iterations_run = iter;
        // Both losses must include the binary penalty for the change to mean anything.
        if iter > cfg.start_bin_loss_iter && (previous - current.total).abs() < cfg.tolerance * initial_total {
            converged = true;
            break;
        }
    }

    let plain = cfg.unregularized();
    h = update_h_masked(x, &o, &h, &plain, iterations_run + 1, mask)?;
    let dead_factors = renormalize(&mut o, &mut h);
    o = update_o_masked(x, &o, &h, &plain, mask, iterations_run + 1)?;
    let final_loss = loss_masked(x, &o, &h, &plain, mask)?;
    Ok(FitResult {
        o,
        h,
        loss_trace: trace,
        final_loss,
        iterations_run,
        converged,
        dead_factors,
    })
}

/// The configuration in force at `iter`: the binary penalty stays off until
/// it is activated.
fn effective(cfg: &SeqNmfConfig, iter: usize) -> SeqNmfConfig {
    if cfg.bin_active(iter) {
        *cfg
    } else {
        SeqNmfConfig {
            lambda_bin: 0.0,
            ..*cfg
        }
    }
}
