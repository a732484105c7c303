//! Conditional-independence checks for whether a labelled latent `g` behaves
//! like a selection variable (`s → g ← a`) rather than a confounder.
//!
//! 1. `s_t ⊥ a_t | g_t` must fail (conditioning on a collider couples its parents);
//! 2. `g_t ⊥ a_{t+1} | g_{t+1}` must fail;
//! 3. `s_{t+1} ⊥ g_t | s_t, a_t` must hold (a confounder would break it).

mod stats;

use std::fmt::{self, Write as _};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};

pub use stats::{
    fisher_combine, partial_corr, partial_corr_pvalue, partial_corr_reduced, stratified_ci, stratified_ci_pvalue,
    PartialCorr, SkippedStratum, StratifiedResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One test per time index across trajectories.
    SingleStep,
    /// All `(trajectory, t)` pairs pooled, tested on random subsets.
    MultiStep,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::SingleStep, Protocol::MultiStep];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::SingleStep => "single_step",
            Protocol::MultiStep => "multi_step",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Dependent,
    Independent,
    Inconclusive,
}

impl Verdict {
    pub fn classify(mean_p: f64, alpha: f64, independence_floor: f64) -> Verdict {
        if mean_p < alpha {
            Verdict::Dependent
        } else if mean_p > independence_floor {
            Verdict::Independent
        } else {
            Verdict::Inconclusive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiConfig {
    pub alpha: f64,
    pub independence_floor: f64,
    /// Number of random subsets in the multi-step protocol.
    pub subsets: usize,
    /// Fraction of the pooled sample drawn per subset.
    pub subset_fraction: f64,
    pub seed: u64,
}

impl Default for CiConfig {
    fn default() -> Self {
        CiConfig {
            alpha: 0.01,
            independence_floor: 0.1,
            subsets: 20,
            subset_fraction: 0.3,
            seed: 0,
        }
    }
}

impl CiConfig {
    fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.independence_floor >= self.alpha && self.independence_floor < 1.0) {
            return Err(Error::invalid("independence_floor must lie in [alpha, 1)"));
        }
        if self.subsets == 0 || !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid(
                "multi-step protocol needs subsets >= 1 and a fraction in (0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRecord {
    pub condition: u8,
    pub protocol: Protocol,
    pub mean_p: f64,
    pub var_p: f64,
    pub verdict: Verdict,
    /// Sub-tests that produced a p-value.
    pub n_tests: usize,
    /// Sub-tests with no testable stratum or no variation (excluded from the mean).
    pub n_failed: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolVerdict {
    pub protocol: Protocol,
    pub selection_confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTestReport {
    pub alpha: f64,
    pub independence_floor: f64,
    pub seed: u64,
    pub records: Vec<CiRecord>,
    pub per_protocol: Vec<ProtocolVerdict>,
    /// Conditions 1 and 2 dependent and condition 3 independent, under every protocol.
    pub selection_confirmed: bool,
}

impl CiTestReport {
    pub fn record(&self, condition: u8, protocol: Protocol) -> Option<&CiRecord> {
        self.records
            .iter()
            .find(|r| r.condition == condition && r.protocol == protocol)
    }

    /// Plain-text table: one row per condition, one column per protocol.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<34} {:>22} {:>22}", "Condition", "Single-step", "Multi-step");
        let labels = [
            "(1) s_t ⊥ a_t | g_t",
            "(2) g_t ⊥ a_t+1 | g_t+1",
            "(3) s_t+1 ⊥ g_t | s_t, a_t",
        ];
        for (c, label) in (1u8..=3).zip(labels) {
            let cell = |p: Protocol| match self.record(c, p) {
                Some(r) => format!("{:.3e} ({:.1e}) {}", r.mean_p, r.var_p, verdict_mark(r.verdict)),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<34} {:>22} {:>22}",
                label,
                cell(Protocol::SingleStep),
                cell(Protocol::MultiStep)
            );
        }
        let _ = writeln!(
            out,
            "alpha = {}, independence floor = {}; selection {}",
            self.alpha,
            self.independence_floor,
            if self.selection_confirmed {
                "confirmed"
            } else {
                "not confirmed"
            }
        );
        out
    }
}

fn verdict_mark(v: Verdict) -> &'static str {
    match v {
        Verdict::Dependent => "D",
        Verdict::Independent => "I",
        Verdict::Inconclusive => "?",
    }
}

/// One pooled sample set for a condition: every test variable is a column
/// over the same `n` samples.
struct Samples {
    /// Candidate `x` variables (Bonferroni over `x × y` pairs).
    xs: Vec<Vec<f64>>,
    /// Indices into `z` of the conditioning columns used with each `x`.
    x_z: Vec<Vec<usize>>,
    ys: Vec<Vec<f64>>,
    strata: Option<Vec<usize>>,
    z: Vec<Vec<f64>>,
    /// Time index of each sample, used by the single-step protocol.
    time: Vec<usize>,
}

impl Samples {
    fn new(nx: usize, ny: usize, nz: usize, stratified: bool) -> Self {
        Samples {
            xs: vec![Vec::new(); nx],
            x_z: vec![(0..nz).collect(); nx],
            ys: vec![Vec::new(); ny],
            strata: stratified.then(Vec::new),
            z: vec![Vec::new(); nz],
            time: Vec::new(),
        }
    }

    fn push(&mut self, t: usize, x: &[f64], y: &[f64], stratum: Option<usize>, z: &[f64]) {
        self.xs.iter_mut().zip(x).for_each(|(c, v)| c.push(*v));
        self.ys.iter_mut().zip(y).for_each(|(c, v)| c.push(*v));
        if let (Some(s), Some(g)) = (self.strata.as_mut(), stratum) {
            s.push(g);
        }
        self.z.iter_mut().zip(z).for_each(|(c, v)| c.push(*v));
        self.time.push(t);
    }

    fn len(&self) -> usize {
        self.time.len()
    }

    /// Bonferroni-corrected minimum p over all `(x, y)` pairs that could be
    /// tested on the samples `idx`.
    fn pvalue(&self, idx: &[usize]) -> Result<f64> {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let z_all: Vec<Vec<f64>> = self.z.iter().map(|c| pick(c)).collect();
        let strata: Option<Vec<usize>> = self.strata.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect());
        let mut ps = Vec::new();
        let mut last_err = None;
        for (x, zi) in self.xs.iter().zip(&self.x_z) {
            let x = pick(x);
            let z: Vec<Vec<f64>> = zi.iter().map(|&c| z_all[c].clone()).collect();
            for y in &self.ys {
                let y = pick(y);
                let res = match &strata {
                    Some(g) => stratified_ci_pvalue(&x, &y, g, &z),
                    None => partial_corr_reduced(&x, &y, &z).map(|pc| pc.p_value),
                };
                match res {
                    Ok(p) => ps.push(p),
                    Err(e @ (Error::Degenerate(_) | Error::InvalidInput(_) | Error::SingularDesign(_))) => {
                        last_err = Some(e)
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if ps.is_empty() {
            return Err(last_err.unwrap_or_else(|| Error::Degenerate("no variable pairs".into())));
        }
        let min = ps.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((min * ps.len() as f64).min(1.0))
    }
}

/// Conditioning features of a state: angular dimensions enter as
/// `(θ, cos θ, sin θ)` so that kinematics driven by the heading stay linear.
fn state_features(s: &[f64], angular: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.len() + 2 * angular.len());
    for (d, &v) in s.iter().enumerate() {
        out.push(v);
        if angular.contains(&d) {
            out.push(v.cos());
            out.push(v.sin());
        }
    }
    out
}

/// State dimension each entry of [`state_features`] derives from.
fn feature_owner(state_dim: usize, angular: &[usize]) -> Vec<usize> {
    (0..state_dim)
        .flat_map(|d| std::iter::repeat_n(d, if angular.contains(&d) { 3 } else { 1 }))
        .collect()
}

fn collect(ds: &Dataset, condition: u8) -> Result<Samples> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset has no trajectories"));
    }
    let (sd, ad) = (ds.meta.state_dim, ds.meta.action_dim);
    let angular = &ds.meta.angular_state_dims;
    let n_features = sd + 2 * angular.len();
    let mut samples = match condition {
        // Each state dimension is tested given the remaining ones, which
        // separates the tracking deviation from position along the course.
        1 => {
            let mut smp = Samples::new(sd, ad, n_features, true);
            let owner = feature_owner(sd, angular);
            smp.x_z = (0..sd)
                .map(|d| (0..n_features).filter(|&f| owner[f] != d).collect())
                .collect();
            smp
        }
        2 => Samples::new(1, ad, 0, true),
        3 => Samples::new(sd, 1, n_features + ad, false),
        _ => return Err(Error::invalid(format!("unknown condition {condition}"))),
    };
    for tr in &ds.trajectories {
        for t in 0..tr.len() {
            let g = tr.subgoal_labels[t];
            match condition {
                1 => samples.push(
                    t,
                    &tr.states[t],
                    &tr.actions[t],
                    Some(g),
                    &state_features(&tr.states[t], angular),
                ),
                2 if t + 1 < tr.len() => {
                    samples.push(t, &[g as f64], &tr.actions[t + 1], Some(tr.subgoal_labels[t + 1]), &[])
                }
                3 if t + 1 < tr.len() => {
                    let mut z = state_features(&tr.states[t], angular);
                    z.extend(&tr.actions[t]);
                    samples.push(t, &tr.states[t + 1], &[g as f64], None, &z);
                }
                _ => {}
            }
        }
    }
    Ok(samples)
}

fn mean_var(ps: &[f64]) -> (f64, f64) {
    let n = ps.len() as f64;
    let mean = ps.iter().sum::<f64>() / n;
    let var = ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Runs one condition under one protocol.
pub fn test_condition(ds: &Dataset, condition: u8, protocol: Protocol, cfg: &CiConfig) -> Result<CiRecord> {
    cfg.check()?;
    let samples = collect(ds, condition)?;
    let n = samples.len();
    let mut ps = Vec::new();
    let mut failed = 0;
    let mut tally = |res: Result<f64>| -> Result<()> {
        match res {
            Ok(p) => ps.push(p),
            Err(Error::Degenerate(_) | Error::InvalidInput(_) | Error::SingularDesign(_)) => failed += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    };
    match protocol {
        Protocol::SingleStep => {
            let t_max = samples.time.iter().copied().max().unwrap_or(0);
            let mut by_time = vec![Vec::new(); t_max + 1];
            for (i, &t) in samples.time.iter().enumerate() {
                by_time[t].push(i);
            }
            for idx in by_time.iter().filter(|idx| !idx.is_empty()) {
                tally(samples.pvalue(idx))?;
            }
        }
        Protocol::MultiStep => {
            let m = ((n as f64 * cfg.subset_fraction).round() as usize).clamp(1, n.max(1));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(condition).wrapping_mul(0x9E37_79B9));
            for _ in 0..cfg.subsets {
                let mut idx = index::sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                tally(samples.pvalue(&idx))?;
            }
        }
    }
    if ps.is_empty() {
        return Err(Error::Degenerate(format!(
            "condition {condition} ({protocol}): all {failed} sub-tests were untestable"
        )));
    }
    let (mean_p, var_p) = mean_var(&ps);
    Ok(CiRecord {
        condition,
        protocol,
        mean_p,
        var_p,
        verdict: Verdict::classify(mean_p, cfg.alpha, cfg.independence_floor),
        n_tests: ps.len(),
        n_failed: failed,
        alpha: cfg.alpha,
        seed: cfg.seed,
    })
}

/// `s_t ⊥ a_t | g_t`.
pub fn test_condition_1(ds: &Dataset, protocol: Protocol, cfg: &CiConfig) -> Result<CiRecord> {
    test_condition(ds, 1, protocol, cfg)
}

/// `g_t ⊥ a_{t+1} | g_{t+1}`.
pub fn test_condition_2(ds: &Dataset, protocol: Protocol, cfg: &CiConfig) -> Result<CiRecord> {
    test_condition(ds, 2, protocol, cfg)
}

/// `s_{t+1} ⊥ g_t | s_t, a_t`.
pub fn test_condition_3(ds: &Dataset, protocol: Protocol, cfg: &CiConfig) -> Result<CiRecord> {
    test_condition(ds, 3, protocol, cfg)
}

/// All three conditions under both protocols. A condition that cannot be
/// tested at all is recorded as inconclusive with `mean_p = NaN`-free
/// placeholder values (p = 1, zero tests).
pub fn run_ci_suite(ds: &Dataset, cfg: &CiConfig) -> Result<CiTestReport> {
    cfg.check()?;
    ds.validate()?;
    let mut records = Vec::with_capacity(6);
    for protocol in Protocol::ALL {
        for condition in 1u8..=3 {
            let rec = match test_condition(ds, condition, protocol, cfg) {
                Ok(r) => r,
                Err(Error::Degenerate(_)) => CiRecord {
                    condition,
                    protocol,
                    mean_p: 1.0,
                    var_p: 0.0,
                    verdict: Verdict::Inconclusive,
                    n_tests: 0,
                    n_failed: 0,
                    alpha: cfg.alpha,
                    seed: cfg.seed,
                },
                Err(e) => return Err(e),
            };
            records.push(rec);
        }
    }
    let per_protocol: Vec<ProtocolVerdict> = Protocol::ALL
        .iter()
        .map(|&protocol| {
            let v = |c: u8| {
                records
                    .iter()
                    .find(|r| r.condition == c && r.protocol == protocol)
                    .map(|r| r.verdict)
            };
            ProtocolVerdict {
                protocol,
                selection_confirmed: v(1) == Some(Verdict::Dependent)
                    && v(2) == Some(Verdict::Dependent)
                    && v(3) == Some(Verdict::Independent),
            }
        })
        .collect();
    Ok(CiTestReport {
        alpha: cfg.alpha,
        independence_floor: cfg.independence_floor,
        seed: cfg.seed,
        selection_confirmed: per_protocol.iter().all(|p| p.selection_confirmed),
        per_protocol,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_color3, ColorMode, DatasetMeta, GeneratorKind, Trajectory};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_dataset(rows: Vec<Vec<(f64, f64, usize)>>, n_labels: usize) -> Dataset {
        Dataset {
            trajectories: rows
                .into_iter()
                .map(|r| Trajectory {
                    states: r.iter().map(|&(s, _, _)| vec![s]).collect(),
                    actions: r.iter().map(|&(_, a, _)| vec![a]).collect(),
                    subgoal_labels: r.iter().map(|&(_, _, g)| g).collect(),
                    boundaries: vec![],
                    task_id: 0,
                })
                .collect(),
            meta: DatasetMeta {
                generator: GeneratorKind::Color3Simple,
                params: serde_json::Value::Null,
                seed: 0,
                state_dim: 1,
                action_dim: 1,
                n_labels,
                angular_state_dims: vec![],
            },
        }
    }

    #[test]
    fn verdict_thresholds() {
        assert_eq!(Verdict::classify(0.001, 0.01, 0.1), Verdict::Dependent);
        assert_eq!(Verdict::classify(0.05, 0.01, 0.1), Verdict::Inconclusive);
        assert_eq!(Verdict::classify(0.5, 0.01, 0.1), Verdict::Independent);
    }

    #[test]
    fn state_features_expand_angles() {
        assert_eq!(state_features(&[1.0, 2.0], &[]), vec![1.0, 2.0]);
        let f = state_features(&[1.0, 0.0], &[1]);
        assert_eq!(f, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn collider_is_detected_and_shuffle_removes_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<(f64, f64, usize)>> = (0..40)
            .map(|_| {
                (0..30)
                    .map(|_| {
                        let s: f64 = StandardNormal.sample(&mut rng);
                        let a: f64 = StandardNormal.sample(&mut rng);
                        (s, a, usize::from(s + a > 0.0))
                    })
                    .collect()
            })
            .collect();
        let ds = scalar_dataset(rows.clone(), 2);
        let cfg = CiConfig::default();
        let rec = test_condition_1(&ds, Protocol::MultiStep, &cfg).unwrap();
        assert_eq!(rec.verdict, Verdict::Dependent);
        let shuffled: Vec<Vec<(f64, f64, usize)>> = rows
            .into_iter()
            .map(|r| r.into_iter().map(|(s, a, _)| (s, a, rng.random_range(0..2))).collect())
            .collect();
        let rec = test_condition_1(&scalar_dataset(shuffled, 2), Protocol::MultiStep, &cfg).unwrap();
        assert_ne!(rec.verdict, Verdict::Dependent);
    }

    #[test]
    fn color3_suite_confirms_selection() {
        let ds = gen_color3(ColorMode::Simple, 100, 30, 0.1, 7).unwrap();
        let report = run_ci_suite(&ds, &CiConfig::default()).unwrap();
        for r in &report.records {
            assert!((0.0..=1.0).contains(&r.mean_p));
        }
        assert!(report.selection_confirmed, "{}", report.table());
    }

    #[test]
    fn suite_is_deterministic() {
        let ds = gen_color3(ColorMode::Conditional, 30, 30, 0.1, 1).unwrap();
        let cfg = CiConfig {
            seed: 4,
            ..CiConfig::default()
        };
        assert_eq!(run_ci_suite(&ds, &cfg).unwrap(), run_ci_suite(&ds, &cfg).unwrap());
    }

    #[test]
    fn bad_config_rejected() {
        let ds = gen_color3(ColorMode::Simple, 5, 30, 0.1, 1).unwrap();
        let cfg = CiConfig {
            alpha: 0.0,
            ..CiConfig::default()
        };
        assert!(run_ci_suite(&ds, &cfg).is_err());
    }
}
