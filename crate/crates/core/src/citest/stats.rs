//! Gaussian conditional-independence backend: Fisher-z partial correlation
//! for continuous conditioning sets, stratification plus Fisher's method for
//! a discrete conditioning variable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Relative residual energy below which a variable counts as an exact
/// linear function of the conditioning set.
const DETERMINED_RATIO: f64 = 1e-20;
/// Relative norm below which a design column counts as linearly dependent.
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialCorr {
    pub r: f64,
    pub z: f64,
    pub p_value: f64,
    pub n: usize,
    pub k: usize,
    /// One of the variables is an exact function of the conditioning set, so
    /// the independence holds trivially and `p_value` is 1.
    pub determined: bool,
}

/// Orthonormal basis of `[1, Z]`, built column by column with re-orthogonalized
/// Gram-Schmidt.
struct Basis {
    q: Vec<Vec<f64>>,
}

impl Basis {
    fn new(n: usize, z: &[Vec<f64>], drop_dependent: bool) -> Result<(Basis, usize)> {
        let mut q: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
        let mut kept = 0;
        for (ci, col) in z.iter().enumerate() {
            if col.len() != n {
                return Err(Error::dims("partial correlation conditioning column", n, col.len()));
            }
            let norm0 = norm(col);
            let mut v = col.clone();
            for _ in 0..2 {
                for b in &q {
                    let c = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
                }
            }
            let nv = norm(&v);
            if norm0 == 0.0 || nv <= COLLINEAR_TOL * norm0.max(1.0) {
                if drop_dependent {
                    continue;
                }
                return Err(Error::SingularDesign(format!(
                    "conditioning column {ci} is constant or a linear combination of earlier columns"
                )));
            }
            v.iter_mut().for_each(|vi| *vi /= nv);
            q.push(v);
            kept += 1;
        }
        Ok((Basis { q }, kept))
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for _ in 0..2 {
            for b in &self.q {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
            }
        }
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn centered_ss(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Two-sided p-value of `H0: x ⊥ y | Z` via the Fisher z-transform of the
/// sample partial correlation. `z` holds conditioning columns, each of length
/// `n`; an intercept is always included.
pub fn partial_corr_pvalue(x: &[f64], y: &[f64], z: &[Vec<f64>]) -> Result<f64> {
    partial_corr(x, y, z).map(|pc| pc.p_value)
}

pub fn partial_corr(x: &[f64], y: &[f64], z: &[Vec<f64>]) -> Result<PartialCorr> {
    partial_corr_impl(x, y, z, false)
}

/// Like [`partial_corr`], but conditioning columns that are constant or
/// collinear with earlier ones are dropped instead of rejected; `k` reports
/// the columns kept.
pub fn partial_corr_reduced(x: &[f64], y: &[f64], z: &[Vec<f64>]) -> Result<PartialCorr> {
    partial_corr_impl(x, y, z, true)
}

fn partial_corr_impl(x: &[f64], y: &[f64], z: &[Vec<f64>], drop_dependent: bool) -> Result<PartialCorr> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::dims("partial correlation", n, y.len()));
    }
    let k_req = z.len();
    if n < k_req + 4 {
        return Err(Error::invalid(format!(
            "{n} samples are too few for {k_req} conditioning columns (need at least {})",
            k_req + 4
        )));
    }
    let (basis, k) = Basis::new(n, z, drop_dependent)?;

    let (ssx, ssy) = (centered_ss(x), centered_ss(y));
    if ssx == 0.0 || ssy == 0.0 {
        return Err(Error::Degenerate(format!(
            "{} has no variation",
            if ssx == 0.0 { "x" } else { "y" }
        )));
    }
    let rx = basis.residual(x);
    let ry = basis.residual(y);
    let (rxx, ryy) = (dot(&rx, &rx), dot(&ry, &ry));
    if rxx <= DETERMINED_RATIO * ssx || ryy <= DETERMINED_RATIO * ssy {
        return Ok(PartialCorr {
            r: 0.0,
            z: 0.0,
            p_value: 1.0,
            n,
            k,
            determined: true,
        });
    }
    let limit = 1.0 - 1e-15;
    let r = (dot(&rx, &ry) / (rxx * ryy).sqrt()).clamp(-limit, limit);
    let zstat = r.atanh() * ((n - k - 3) as f64).sqrt();
    let p = erfc(zstat.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(PartialCorr {
        r,
        z: zstat,
        p_value: p,
        n,
        k,
        determined: false,
    })
}

/// Fisher's method: `−2 Σ ln p_i ~ χ²(2m)` under the joint null.
pub fn fisher_combine(pvalues: &[f64]) -> Result<f64> {
    match pvalues {
        [] => Err(Error::invalid("no p-values to combine")),
        [p] => Ok(*p),
        _ => {
            let stat: f64 = pvalues.iter().map(|&p| -2.0 * p.max(f64::MIN_POSITIVE).ln()).sum();
            let chi = ChiSquared::new(2.0 * pvalues.len() as f64).map_err(|e| Error::invalid(e.to_string()))?;
            Ok(chi.sf(stat).clamp(0.0, 1.0))
        }
    }
}

/// Why a stratum did not contribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStratum {
    pub label: usize,
    pub size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedResult {
    pub p_value: f64,
    /// `(label, p)` for each stratum that was tested.
    pub strata: Vec<(usize, f64)>,
    pub skipped: Vec<SkippedStratum>,
}

/// Tests `x ⊥ y | g, Z` for discrete `g`: a partial-correlation test inside
/// each stratum of `g`, combined with Fisher's method. Strata below
/// `k + 4` samples, or where `x` or `y` does not vary, are skipped and
/// reported.
pub fn stratified_ci(x: &[f64], y: &[f64], g: &[usize], extra_z: &[Vec<f64>]) -> Result<StratifiedResult> {
    let n = x.len();
    if y.len() != n || g.len() != n || extra_z.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("stratified test inputs must share one sample count"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in g.iter().enumerate() {
        groups.entry(label).or_default().push(i);
    }
    let k = extra_z.len();
    let mut strata = Vec::new();
    let mut skipped = Vec::new();
    for (label, idx) in groups {
        if idx.len() < k + 4 {
            skipped.push(SkippedStratum {
                label,
                size: idx.len(),
                reason: format!("fewer than {} samples", k + 4),
            });
            continue;
        }
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let zs: Vec<Vec<f64>> = extra_z.iter().map(|c| pick(c)).collect();
        match partial_corr_reduced(&pick(x), &pick(y), &zs) {
            Ok(pc) => strata.push((label, pc.p_value)),
            Err(e @ (Error::Degenerate(_) | Error::SingularDesign(_) | Error::InvalidInput(_))) => {
                skipped.push(SkippedStratum {
                    label,
                    size: idx.len(),
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    if strata.is_empty() {
        return Err(Error::Degenerate(format!(
            "no testable stratum among {} strata",
            skipped.len()
        )));
    }
    let ps: Vec<f64> = strata.iter().map(|&(_, p)| p).collect();
    Ok(StratifiedResult {
        p_value: fisher_combine(&ps)?,
        strata,
        skipped,
    })
}

/// p-value form of [`stratified_ci`].
pub fn stratified_ci_pvalue(x: &[f64], y: &[f64], g: &[usize], extra_z: &[Vec<f64>]) -> Result<f64> {
    stratified_ci(x, y, g, extra_z).map(|r| r.p_value)
}
