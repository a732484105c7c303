//! Trajectory datasets with ground-truth subgoals, and their aggregation into
//! a normalized data matrix.

mod color;
mod driving;
mod io;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorops::Matrix;

pub use color::{gen_color10, gen_color3, Color, ColorMode, COLOR10_TEMPLATES};
pub use driving::{gen_driving, gen_driving_with, Course, DrivingParams, PurePursuit, TaskPath};
pub use io::{load_dataset, save_dataset, MANIFEST_FILE};

/// One episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Ground-truth subgoal `g_t` per step, in `[0, n_labels)`.
    pub subgoal_labels: Vec<usize>,
    /// Steps at which the ground-truth subtask changes, strictly increasing,
    /// each in `[1, len)`.
    pub boundaries: Vec<usize>,
    pub task_id: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::invalid("empty trajectory"));
        }
        if self.actions.len() != n || self.subgoal_labels.len() != n {
            return Err(Error::invalid(format!(
                "trajectory lengths disagree: states {n}, actions {}, labels {}",
                self.actions.len(),
                self.subgoal_labels.len()
            )));
        }
        if !self.boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("boundaries not strictly increasing"));
        }
        if self.boundaries.iter().any(|&b| b == 0 || b >= n) {
            return Err(Error::invalid(format!("boundary outside [1, {n})")));
        }
        Ok(())
    }
}

/// Which generator produced a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Color3Simple,
    Color3Conditional,
    Color10,
    Driving,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] = [
        GeneratorKind::Color3Simple,
        GeneratorKind::Color3Conditional,
        GeneratorKind::Color10,
        GeneratorKind::Driving,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Color3Simple => "color3-simple",
            GeneratorKind::Color3Conditional => "color3-conditional",
            GeneratorKind::Color10 => "color10",
            GeneratorKind::Driving => "driving",
        }
    }

    pub fn is_color(self) -> bool {
        !matches!(self, GeneratorKind::Driving)
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown generator `{s}` (expected one of color3-simple, color3-conditional, color10, driving)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorKind,
    pub params: serde_json::Value,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Number of distinct ground-truth subgoal labels.
    pub n_labels: usize,
    /// State dimensions holding angles (radians).
    #[serde(default)]
    pub angular_state_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, tr) in self.trajectories.iter().enumerate() {
            tr.validate()
                .map_err(|e| Error::invalid(format!("trajectory {i}: {e}")))?;
            let bad_dim = tr.states.iter().any(|s| s.len() != self.meta.state_dim)
                || tr.actions.iter().any(|a| a.len() != self.meta.action_dim);
            if bad_dim {
                return Err(Error::invalid(format!(
                    "trajectory {i}: state/action dimension differs from dataset"
                )));
            }
            if tr.subgoal_labels.iter().any(|&g| g >= self.meta.n_labels) {
                return Err(Error::invalid(format!("trajectory {i}: label out of range")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Per-row min/max of the raw data matrix, for scaling to `[0, 1]` and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationInfo {
    /// Identity scaling over `dims` rows.
    pub fn identity(dims: usize) -> Self {
        NormalizationInfo {
            min: vec![0.0; dims],
            max: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    fn range(&self, row: usize) -> f64 {
        self.max[row] - self.min[row]
    }

    /// Raw value to `[0, 1]`; constant rows map to 0.
    pub fn scale(&self, row: usize, v: f64) -> f64 {
        let r = self.range(row);
        if r > 0.0 {
            (v - self.min[row]) / r
        } else {
            0.0
        }
    }

    pub fn unscale(&self, row: usize, v: f64) -> f64 {
        self.min[row] + v * self.range(row)
    }

    /// Scales a slice whose element `i` belongs to row `offset + i`.
    pub fn scale_slice(&self, offset: usize, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.scale(offset + i, v))
            .collect()
    }

    pub fn unscale_slice(&self, offset: usize, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.unscale(offset + i, v))
            .collect()
    }

    pub fn unscale_matrix(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| self.unscale(r, m[(r, c)]))
    }
}

/// Where a data-matrix column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSource {
    Step { trajectory: usize, step: usize },
    Separator,
}

/// Normalized `D × T` data matrix with bookkeeping for inversion.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    pub x: Matrix,
    pub norm: NormalizationInfo,
    pub column_map: Vec<ColumnSource>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DataMatrix {
    /// `true` for data columns, `false` for separators.
    pub fn mask(&self) -> Vec<bool> {
        self.column_map
            .iter()
            .map(|c| matches!(c, ColumnSource::Step { .. }))
            .collect()
    }

    /// Column range of each trajectory, in dataset order.
    pub fn trajectory_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        for (col, src) in self.column_map.iter().enumerate() {
            if let ColumnSource::Step { trajectory, .. } = *src {
                if trajectory == ranges.len() {
                    ranges.push(col..col + 1);
                } else {
                    ranges[trajectory].end = col + 1;
                }
            }
        }
        ranges
    }

    pub fn state_rows(&self) -> Range<usize> {
        0..self.state_dim
    }

    pub fn action_rows(&self) -> Range<usize> {
        self.state_dim..self.state_dim + self.action_dim
    }
}

/// Stacks `x_t = (s_t; a_t)` for every step of every trajectory, with one
/// zero column between consecutive trajectories, and min-max scales each row
/// to `[0, 1]` over the data columns.
pub fn build_data_matrix(ds: &Dataset) -> Result<DataMatrix> {
    if ds.trajectories.is_empty() || ds.total_steps() == 0 {
        return Err(Error::invalid("cannot build a data matrix from an empty dataset"));
    }
    let (ds_dim, da_dim) = (ds.meta.state_dim, ds.meta.action_dim);
    let rows = ds_dim + da_dim;
    let ncols = ds.total_steps() + ds.trajectories.len() - 1;

    let mut column_map = Vec::with_capacity(ncols);
    let mut raw = Matrix::zeros(rows, ncols);
    let mut col = 0;
    for (ti, tr) in ds.trajectories.iter().enumerate() {
        if ti > 0 {
            column_map.push(ColumnSource::Separator);
            col += 1;
        }
        for (step, (s, a)) in tr.states.iter().zip(&tr.actions).enumerate() {
            if s.len() != ds_dim || a.len() != da_dim {
                return Err(Error::dims("build_data_matrix", rows, s.len() + a.len()));
            }
            for (r, v) in s.iter().chain(a).enumerate() {
                raw[(r, col)] = *v;
            }
            column_map.push(ColumnSource::Step { trajectory: ti, step });
            col += 1;
        }
    }

    let mut norm = NormalizationInfo {
        min: vec![f64::INFINITY; rows],
        max: vec![f64::NEG_INFINITY; rows],
    };
    for (c, src) in column_map.iter().enumerate() {
        if matches!(src, ColumnSource::Step { .. }) {
            for r in 0..rows {
                norm.min[r] = norm.min[r].min(raw[(r, c)]);
                norm.max[r] = norm.max[r].max(raw[(r, c)]);
            }
        }
    }
    if norm.min.iter().chain(&norm.max).any(|v| !v.is_finite()) {
        return Err(Error::invalid("dataset contains non-finite values"));
    }

    let mut x = Matrix::zeros(rows, ncols);
    for (c, src) in column_map.iter().enumerate() {
        if matches!(src, ColumnSource::Step { .. }) {
            for r in 0..rows {
                x[(r, c)] = norm.scale(r, raw[(r, c)]).clamp(0.0, 1.0);
            }
        }
    }

    Ok(DataMatrix {
        x,
        norm,
        column_map,
        state_dim: ds_dim,
        action_dim: da_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(trajs: Vec<Trajectory>) -> Dataset {
        Dataset {
            trajectories: trajs,
            meta: DatasetMeta {
                generator: GeneratorKind::Color3Simple,
                params: serde_json::json!({}),
                seed: 0,
                state_dim: 1,
                action_dim: 1,
                n_labels: 3,
                angular_state_dims: vec![],
            },
        }
    }

    fn traj(states: &[f64], actions: &[f64]) -> Trajectory {
        Trajectory {
            states: states.iter().map(|&s| vec![s]).collect(),
            actions: actions.iter().map(|&a| vec![a]).collect(),
            subgoal_labels: vec![0; states.len()],
            boundaries: vec![],
            task_id: 0,
        }
    }

    #[test]
    fn single_step_dataset_is_one_zero_column() {
        let dm = build_data_matrix(&tiny_dataset(vec![traj(&[2.5], &[-1.0])])).unwrap();
        assert_eq!(dm.x.shape(), (2, 1));
        assert_eq!(dm.x.as_slice(), &[0.0, 0.0]);
        assert_eq!(dm.norm.unscale(0, 0.0), 2.5);
    }

    #[test]
    fn separators_and_column_map() {
        let ds = tiny_dataset(vec![traj(&[1.0, 2.0], &[0.0, 1.0]), traj(&[3.0], &[-1.0])]);
        let dm = build_data_matrix(&ds).unwrap();
        assert_eq!(dm.x.shape(), (2, 4));
        assert_eq!(dm.column_map[2], ColumnSource::Separator);
        assert_eq!(dm.x.column(2), vec![0.0, 0.0]);
        assert_eq!(dm.mask(), vec![true, true, false, true]);
        assert_eq!(dm.trajectory_ranges(), vec![0..2, 3..4]);
        assert_eq!(dm.x.row(0), &[0.0, 0.5, 0.0, 1.0]);
        assert_eq!(dm.x.row(1), &[0.5, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(build_data_matrix(&tiny_dataset(vec![])).is_err());
    }

    #[test]
    fn trajectory_validation() {
        let mut t = traj(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]);
        t.boundaries = vec![1, 2];
        assert!(t.validate().is_ok());
        t.boundaries = vec![2, 1];
        assert!(t.validate().is_err());
        t.boundaries = vec![0];
        assert!(t.validate().is_err());
        t.boundaries = vec![3];
        assert!(t.validate().is_err());
    }

    #[test]
    fn generator_names_round_trip() {
        for g in GeneratorKind::ALL {
            assert_eq!(g.name().parse::<GeneratorKind>().unwrap(), g);
        }
        assert!("kitchen".parse::<GeneratorKind>().is_err());
    }
}
