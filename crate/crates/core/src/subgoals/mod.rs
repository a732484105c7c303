//! From fitted factors to per-step subgoal weights, segmentations and
//! boundary scores.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::datagen::{Color, DataMatrix, Dataset, GeneratorKind, NormalizationInfo};
use crate::error::{Error, Result};
use crate::tensorops::{Matrix, Tensor3};

/// Per-step energy share of each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalMatrix {
    /// `J × T`; every column with nonzero energy sums to 1.
    pub g: Matrix,
    /// Columns where no factor contributes any energy (left all-zero).
    pub zero_energy: Vec<usize>,
}

impl SubgoalMatrix {
    pub fn factors(&self) -> usize {
        self.g.rows()
    }

    pub fn len(&self) -> usize {
        self.g.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.g.cols() == 0
    }

    /// Restriction to the columns `range`, with zero-energy flags re-based.
    pub fn slice(&self, range: Range<usize>) -> SubgoalMatrix {
        SubgoalMatrix {
            g: self.g.columns(range.start, range.end),
            zero_energy: self
                .zero_energy
                .iter()
                .filter(|&&c| range.contains(&c))
                .map(|&c| c - range.start)
                .collect(),
        }
    }
}

/// Energy of each factor at each step: `e_{jt} = Σ_d Σ_ℓ O_{djℓ} H_{j,t−ℓ}`.
pub fn factor_energy(o: &Tensor3, h: &Matrix) -> Result<Matrix> {
    let (d, j, l) = o.dims();
    if h.rows() != j {
        return Err(Error::dims("factor_energy (factors)", j, h.rows()));
    }
    let t = h.cols();
    let weights: Vec<Vec<f64>> = (0..j)
        .map(|f| (0..l).map(|lag| (0..d).map(|r| o[(r, f, lag)]).sum()).collect())
        .collect();
    Ok(Matrix::from_fn(j, t, |f, c| {
        (0..l.min(c + 1)).map(|lag| weights[f][lag] * h[(f, c - lag)]).sum()
    }))
}

pub fn to_subgoal_matrix(o: &Tensor3, h: &Matrix) -> Result<SubgoalMatrix> {
    let mut g = factor_energy(o, h)?;
    let (j, t) = g.shape();
    let mut zero_energy = Vec::new();
    for c in 0..t {
        let total: f64 = (0..j).map(|f| g[(f, c)]).sum();
        if total > 0.0 {
            (0..j).for_each(|f| g[(f, c)] /= total);
        } else {
            zero_energy.push(c);
            (0..j).for_each(|f| g[(f, c)] = 0.0);
        }
    }
    Ok(SubgoalMatrix { g, zero_energy })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Dominant factor per step, `None` where no factor is dominant enough.
    pub labels: Vec<Option<usize>>,
    /// Steps `t ≥ 1` whose label differs from the label at `t − 1`.
    pub boundaries: Vec<usize>,
}

impl Segmentation {
    pub fn from_labels(labels: Vec<Option<usize>>) -> Self {
        let boundaries = (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).collect();
        Segmentation { labels, boundaries }
    }

    /// Maximal runs of equal labels as `(label, start, end)`.
    pub fn runs(&self) -> Vec<(Option<usize>, usize, usize)> {
        let mut runs = Vec::new();
        let mut start = 0;
        for t in 1..=self.labels.len() {
            if t == self.labels.len() || self.labels[t] != self.labels[start] {
                runs.push((self.labels[start], start, t));
                start = t;
            }
        }
        runs
    }

    /// Runs that carry a factor label.
    pub fn labeled_runs(&self) -> Vec<(usize, usize, usize)> {
        self.runs()
            .into_iter()
            .filter_map(|(l, s, e)| l.map(|l| (l, s, e)))
            .collect()
    }
}

/// Labels each step with its dominant factor. Ties go to the smaller index;
/// unassigned gaps shorter than `l / 2` between two runs of the same label
/// are filled with that label.
pub fn segment(g: &SubgoalMatrix, min_weight: f64, l: usize) -> Segmentation {
    let (j, t) = g.g.shape();
    let mut labels: Vec<Option<usize>> = (0..t)
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for f in 0..j {
                let v = g.g[(f, c)];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((f, v));
                }
            }
            best.filter(|&(_, v)| v > 0.0 && v >= min_weight).map(|(f, _)| f)
        })
        .collect();
    let mut c = 0;
    while c < t {
        if labels[c].is_some() {
            c += 1;
            continue;
        }
        let start = c;
        while c < t && labels[c].is_none() {
            c += 1;
        }
        let len = c - start;
        if start > 0 && c < t && 2 * len < l && labels[start - 1] == labels[c] {
            let fill = labels[c];
            labels[start..c].iter_mut().for_each(|v| *v = fill);
        }
    }
    Segmentation::from_labels(labels)
}

/// Steps where a new pattern instance starts: local maxima of the summed
/// activations `Σ_j H_{jt}` that reach `threshold`, with non-maximum
/// suppression over `±window` steps. Step 0 is never reported.
pub fn activation_onsets(h: &Matrix, threshold: f64, window: usize) -> Vec<usize> {
    let t = h.cols();
    let total: Vec<f64> = (0..t).map(|c| (0..h.rows()).map(|r| h[(r, c)]).sum()).collect();
    let mut onsets = Vec::new();
    for c in 1..t {
        if total[c] < threshold {
            continue;
        }
        let lo = c.saturating_sub(window);
        let hi = (c + window + 1).min(t);
        // Earliest position wins among equal peaks.
        let is_peak = (lo..hi).all(|k| total[k] < total[c] || (total[k] == total[c] && k >= c));
        if is_peak {
            onsets.push(c);
        }
    }
    onsets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Matched `(predicted, true)` pairs.
    pub matched: Vec<(usize, usize)>,
    pub n_pred: usize,
    pub n_truth: usize,
}

impl BoundaryMetrics {
    /// Pools several per-trajectory results by summing counts.
    pub fn pooled(parts: &[BoundaryMetrics]) -> BoundaryMetrics {
        let n_pred: usize = parts.iter().map(|m| m.n_pred).sum();
        let n_truth: usize = parts.iter().map(|m| m.n_truth).sum();
        let matches: usize = parts.iter().map(|m| m.matched.len()).sum();
        let (precision, recall, f1) = scores(matches, n_pred, n_truth);
        BoundaryMetrics {
            precision,
            recall,
            f1,
            matched: Vec::new(),
            n_pred,
            n_truth,
        }
    }
}

fn scores(matches: usize, n_pred: usize, n_truth: usize) -> (f64, f64, f64) {
    if n_pred == 0 && n_truth == 0 {
        return (1.0, 1.0, 1.0);
    }
    let ratio = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
    let (p, r) = (ratio(matches, n_pred), ratio(matches, n_truth));
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Greedy closest-first one-to-one matching within `|Δt| ≤ tol`.
pub fn boundary_metrics(pred: &[usize], truth: &[usize], tol: usize) -> BoundaryMetrics {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        for (k, &q) in truth.iter().enumerate() {
            let dist = p.abs_diff(q);
            if dist <= tol {
                pairs.push((dist, i, k));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_pred = vec![false; pred.len()];
    let mut used_truth = vec![false; truth.len()];
    let mut matched = Vec::new();
    for (_, i, k) in pairs {
        if !used_pred[i] && !used_truth[k] {
            used_pred[i] = true;
            used_truth[k] = true;
            matched.push((pred[i], truth[k]));
        }
    }
    matched.sort_unstable();
    let (precision, recall, f1) = scores(matched.len(), pred.len(), truth.len());
    BoundaryMetrics {
        precision,
        recall,
        f1,
        matched,
        n_pred: pred.len(),
        n_truth: truth.len(),
    }
}

/// How predicted boundaries are read off a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundaryRule {
    /// Pattern-instance starts from [`activation_onsets`].
    Onsets { threshold: f64, window: usize },
    /// Label changes of [`segment`].
    Segments { min_weight: f64 },
}

impl BoundaryRule {
    /// Onsets for the color data, where every pattern instance is a subtask;
    /// label changes for driving, where one subtask spans several instances.
    pub fn for_generator(kind: GeneratorKind, l: usize) -> Self {
        if kind.is_color() {
            BoundaryRule::Onsets {
                threshold: 0.5,
                window: l.div_ceil(2),
            }
        } else {
            BoundaryRule::Segments { min_weight: 0.5 }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub predicted: Vec<usize>,
    pub metrics: BoundaryMetrics,
    /// Labeled runs of the argmax segmentation.
    pub labeled_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEval {
    pub rule: BoundaryRule,
    pub tol: usize,
    pub pooled: BoundaryMetrics,
    pub trajectories: Vec<TrajectoryEval>,
}

impl FitEval {
    /// Histogram of predicted boundary counts per trajectory.
    pub fn boundary_count_histogram(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut hist = std::collections::BTreeMap::new();
        for t in &self.trajectories {
            *hist.entry(t.predicted.len()).or_insert(0) += 1;
        }
        hist
    }

    pub fn fraction_with_runs(&self, runs: usize) -> f64 {
        let n = self.trajectories.iter().filter(|t| t.labeled_runs == runs).count();
        n as f64 / self.trajectories.len().max(1) as f64
    }
}

/// Scores a fit of `dm` against the ground-truth boundaries of `ds`.
pub fn evaluate_fit(
    ds: &Dataset,
    dm: &DataMatrix,
    o: &Tensor3,
    h: &Matrix,
    rule: BoundaryRule,
    tol: usize,
) -> Result<FitEval> {
    if h.cols() != dm.x.cols() {
        return Err(Error::dims("evaluate_fit columns", dm.x.cols(), h.cols()));
    }
    let g = to_subgoal_matrix(o, h)?;
    let min_weight = match rule {
        BoundaryRule::Segments { min_weight } => min_weight,
        BoundaryRule::Onsets { .. } => 0.0,
    };
    let mut trajectories = Vec::with_capacity(ds.len());
    for (tr, range) in ds.trajectories.iter().zip(dm.trajectory_ranges()) {
        let seg = segment(&g.slice(range.clone()), min_weight, o.lags());
        let predicted = match rule {
            BoundaryRule::Onsets { threshold, window } => {
                activation_onsets(&h.columns(range.start, range.end), threshold, window)
            }
            BoundaryRule::Segments { .. } => seg.boundaries.clone(),
        };
        trajectories.push(TrajectoryEval {
            metrics: boundary_metrics(&predicted, &tr.boundaries, tol),
            predicted,
            labeled_runs: seg.labeled_runs().len(),
        });
    }
    let parts: Vec<BoundaryMetrics> = trajectories.iter().map(|t| t.metrics.clone()).collect();
    Ok(FitEval {
        rule,
        tol,
        pooled: BoundaryMetrics::pooled(&parts),
        trajectories,
    })
}

/// Steps covered by blocks (spans between consecutive cut points, with 0 and
/// `len` as the outer cuts) whose length is within `slack` of `target`.
pub fn block_coverage(boundaries: &[usize], len: usize, target: usize, slack: usize) -> usize {
    let mut cuts = vec![0];
    cuts.extend(boundaries.iter().copied().filter(|&b| b > 0 && b < len));
    cuts.push(len);
    cuts.windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&n| n.abs_diff(target) <= slack)
        .sum()
}

/// Color order of one factor's pattern: the state row of each lag is
/// mapped back to raw units, snapped to the nearest color, and runs shorter
/// than `min_run` are dropped before consecutive repeats are merged.
pub fn color_signature(o: &Tensor3, factor: usize, norm: &NormalizationInfo, min_run: usize) -> Vec<Color> {
    let colors: Vec<Color> = (0..o.lags())
        .map(|lag| Color::nearest(norm.unscale(0, o[(0, factor, lag)])))
        .collect();
    let mut runs: Vec<(Color, usize)> = Vec::new();
    for c in colors {
        match runs.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    let mut sig: Vec<Color> = Vec::new();
    for (c, n) in runs {
        if n >= min_run && sig.last() != Some(&c) {
            sig.push(c);
        }
    }
    sig
}

/// Writes `t, label, g_1..g_J` rows; unassigned steps get an empty label.
pub fn write_segmentation_csv<W: Write>(g: &SubgoalMatrix, seg: &Segmentation, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string(), "label".to_string()];
    header.extend((1..=g.factors()).map(|j| format!("g{j}")));
    wtr.write_record(&header)?;
    for t in 0..g.len() {
        let mut rec = vec![t.to_string(), seg.labels[t].map(|l| l.to_string()).unwrap_or_default()];
        rec.extend((0..g.factors()).map(|j| format!("{}", g.g[(j, t)])));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
