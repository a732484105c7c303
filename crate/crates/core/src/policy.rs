//! Subgoal-conditioned execution by pattern playback.
//!
//! A fitted pattern tensor stands in for a trained low-level policy: the
//! controller picks the factor whose opening state is nearest to the current
//! state, replays that factor's action rows lag by lag, and re-selects once
//! the state comes within `ε` of the factor's closing state or the lags run
//! out.

use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::datagen::Course;
use crate::datagen::NormalizationInfo;
use crate::error::{Error, Result};
use crate::tensorops::Tensor3;

/// Lag columns whose energy is below this fraction of the factor's largest
/// column count as empty.
const ENERGY_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionConfig {
    /// Termination radius, measured in normalized state units.
    pub epsilon: f64,
    pub max_steps: usize,
    pub max_subtask_steps: usize,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig {
            epsilon: 0.05,
            max_steps: 200,
            max_subtask_steps: 80,
        }
    }
}

impl ExecutionConfig {
    /// Defaults with the subtask budget set to twice the pattern length.
    pub fn for_pattern_length(l: usize) -> Self {
        ExecutionConfig {
            max_subtask_steps: 2 * l.max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_steps == 0 || self.max_subtask_steps == 0 {
            return Err(Error::invalid("step budgets must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `steps + 1` states, starting with the initial one.
    pub states: Vec<[f64; 3]>,
    pub actions: Vec<f64>,
    /// Factor played at each step.
    pub subgoals: Vec<usize>,
    pub terminated: bool,
    pub steps: usize,
}

impl Rollout {
    /// Number of times the played factor changes.
    pub fn switches(&self) -> usize {
        self.subgoals.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn summary(&self) -> RolloutSummary {
        RolloutSummary {
            terminated: self.terminated,
            steps: self.steps,
            switches: self.switches(),
            final_state: *self.states.last().expect("a rollout holds its start state"),
        }
    }

    /// Columns `t, x, y, theta, dtheta, subgoal`; the final row carries the
    /// end state with empty action and subgoal.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "x", "y", "theta", "dtheta", "subgoal"])?;
        for (t, s) in self.states.iter().enumerate() {
            let (a, g) = match (self.actions.get(t), self.subgoals.get(t)) {
                (Some(a), Some(g)) => (a.to_string(), g.to_string()),
                _ => (String::new(), String::new()),
            };
            wtr.write_record([
                t.to_string(),
                s[0].to_string(),
                s[1].to_string(),
                s[2].to_string(),
                a,
                g,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub terminated: bool,
    pub steps: usize,
    pub switches: usize,
    pub final_state: [f64; 3],
}

fn column_energy(o: &Tensor3, j: usize, lag: usize) -> f64 {
    (0..o.data_dim()).map(|d| o[(d, j, lag)].powi(2)).sum()
}

/// Lags of factor `j` from its first to its last non-empty column, or
/// `None` for a dead factor.
pub fn active_lags(o: &Tensor3, j: usize) -> Option<RangeInclusive<usize>> {
    let energy: Vec<f64> = (0..o.lags()).map(|l| column_energy(o, j, l)).collect();
    let peak = energy.iter().copied().fold(0.0, f64::max);
    if peak.is_nan() || peak <= 0.0 {
        return None;
    }
    let live = |e: &f64| *e > ENERGY_FLOOR * peak;
    let first = energy.iter().position(live)?;
    let last = energy.iter().rposition(live)?;
    Some(first..=last)
}

fn state_distance(normalized: &[f64], o: &Tensor3, j: usize, lag: usize) -> f64 {
    normalized
        .iter()
        .enumerate()
        .map(|(d, v)| (v - o[(d, j, lag)]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_model(o: &Tensor3, norm: &NormalizationInfo, state_dim: usize) -> Result<()> {
    if norm.dims() != o.data_dim() {
        return Err(Error::dims("policy normalization rows", o.data_dim(), norm.dims()));
    }
    if state_dim == 0 || state_dim >= o.data_dim() {
        return Err(Error::invalid(format!(
            "state dimension {state_dim} leaves no action rows in a {}-row pattern",
            o.data_dim()
        )));
    }
    Ok(())
}

/// Factor whose first non-empty lag column is nearest (Euclidean, normalized
/// units) to `s`. Ties go to the smaller index.
pub fn select_subgoal(s: &[f64], o: &Tensor3, norm: &NormalizationInfo) -> Result<usize> {
    check_model(o, norm, s.len())?;
    let normalized = norm.scale_slice(0, s);
    let mut best: Option<(usize, f64)> = None;
    for j in 0..o.factors() {
        let Some(lags) = active_lags(o, j) else { continue };
        let dist = state_distance(&normalized, o, j, *lags.start());
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((j, dist));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::invalid("pattern tensor has no non-empty factor"))
}

/// Action rows of `O` at `(j, lag)` in environment units. `None` once `lag`
/// passes the factor's last non-empty column, which ends the subtask.
pub fn playback_action(
    o: &Tensor3,
    j: usize,
    lag: usize,
    norm: &NormalizationInfo,
    state_dim: usize,
) -> Result<Option<Vec<f64>>> {
    check_model(o, norm, state_dim)?;
    if j >= o.factors() {
        return Err(Error::invalid(format!(
            "factor {j} out of range for J = {}",
            o.factors()
        )));
    }
    match active_lags(o, j) {
        Some(lags) if lag <= *lags.end() => {
            let raw: Vec<f64> = (state_dim..o.data_dim()).map(|d| o[(d, j, lag)]).collect();
            Ok(Some(norm.unscale_slice(state_dim, &raw)))
        }
        _ => Ok(None),
    }
}

/// Drives `course` from `start` by alternating subgoal selection and
/// pattern playback until the right edge or `max_steps`.
pub fn execute_task(
    start: [f64; 3],
    o: &Tensor3,
    norm: &NormalizationInfo,
    course: &Course,
    cfg: &ExecutionConfig,
) -> Result<Rollout> {
    cfg.validate()?;
    check_model(o, norm, 3)?;
    let mut rollout = Rollout {
        states: vec![start],
        actions: Vec::new(),
        subgoals: Vec::new(),
        terminated: course.reached_end(&start),
        steps: 0,
    };
    let mut state = start;
    while !rollout.terminated && rollout.steps < cfg.max_steps {
        let j = select_subgoal(&state, o, norm)?;
        let lags = active_lags(o, j).expect("selected factors are non-empty");
        let goal = *lags.end();
        let mut played = 0;
        for lag in lags {
            let action = playback_action(o, j, lag, norm, 3)?.expect("lag inside the active range");
            state = Course::step(&state, action[0]);
            rollout.states.push(state);
            rollout.actions.push(action[0]);
            rollout.subgoals.push(j);
            rollout.steps += 1;
            played += 1;
            if course.reached_end(&state) {
                rollout.terminated = true;
                break;
            }
            let near_goal = state_distance(&norm.scale_slice(0, &state), o, j, goal) <= cfg.epsilon;
            if near_goal || played >= cfg.max_subtask_steps || rollout.steps >= cfg.max_steps {
                break;
            }
        }
    }
    Ok(rollout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TaskPath;

    fn identity_norm(d: usize) -> NormalizationInfo {
        NormalizationInfo::identity(d)
    }

    #[test]
    fn selects_zero_distance_factor() {
        // Three factors with distinct opening states; factor 2 matches.
        let o = Tensor3::from_fn(
            4,
            3,
            2,
            |d, j, l| if d < 3 && l == 0 { 0.1 * (j + 1) as f64 } else { 0.5 },
        );
        let norm = NormalizationInfo {
            min: vec![-1.0, 0.0, 2.0, -0.5],
            max: vec![1.0, 10.0, 4.0, 0.5],
        };
        let s = norm.unscale_slice(0, &[0.3, 0.3, 0.3]);
        assert_eq!(select_subgoal(&s, &o, &norm).unwrap(), 2);
    }

    #[test]
    fn single_factor_always_selected() {
        let o = Tensor3::from_fn(4, 1, 3, |_, _, _| 0.4);
        for s in [[0.0, 0.0, 0.0], [9.0, -3.0, 1.0]] {
            assert_eq!(select_subgoal(&s, &o, &identity_norm(4)).unwrap(), 0);
        }
    }

    #[test]
    fn skips_leading_empty_lags_and_dead_factors() {
        let mut o = Tensor3::zeros(4, 2, 3);
        for d in 0..4 {
            o[(d, 1, 1)] = 0.9;
            o[(d, 1, 2)] = 0.2;
        }
        assert_eq!(active_lags(&o, 0), None);
        assert_eq!(active_lags(&o, 1), Some(1..=2));
        assert_eq!(select_subgoal(&[0.0; 3], &o, &identity_norm(4)).unwrap(), 1);
        assert!(select_subgoal(&[0.0; 3], &Tensor3::zeros(4, 2, 3), &identity_norm(4)).is_err());
    }

    #[test]
    fn playback_identity_and_round_trip() {
        let o = Tensor3::from_fn(4, 2, 3, |d, j, l| 0.1 * (d + j + l) as f64 + 0.05);
        let a = playback_action(&o, 1, 2, &identity_norm(4), 3).unwrap().unwrap();
        assert_eq!(a, vec![o[(3, 1, 2)]]);

        let norm = NormalizationInfo {
            min: vec![0.0, -20.0, -1.0, -0.3],
            max: vec![100.0, 20.0, 1.0, 0.2],
        };
        let a = playback_action(&o, 0, 1, &norm, 3).unwrap().unwrap();
        assert!((norm.scale(3, a[0]) - o[(3, 0, 1)]).abs() < 1e-12);
        assert_eq!(playback_action(&o, 0, 3, &norm, 3).unwrap(), None);
        assert!(playback_action(&o, 2, 0, &norm, 3).is_err());
    }

    #[test]
    fn zero_action_row_drives_straight() {
        let o = Tensor3::from_fn(4, 1, 5, |d, _, _| if d == 3 { 0.0 } else { 0.5 });
        let norm = identity_norm(4);
        for lag in 0..5 {
            assert_eq!(playback_action(&o, 0, lag, &norm, 3).unwrap(), Some(vec![0.0]));
        }
        let course = Course::default();
        let cfg = ExecutionConfig {
            epsilon: 1e-6,
            max_steps: 300,
            ..ExecutionConfig::default()
        };
        let r = execute_task([0.0, 0.0, 0.0], &o, &norm, &course, &cfg).unwrap();
        assert!(r.terminated);
        assert_eq!(r.steps, 100);
        assert!(r.subgoals.iter().all(|&g| g == 0));
        assert_eq!(r.switches(), 0);
    }

    #[test]
    fn start_at_end_terminates_immediately() {
        let o = Tensor3::from_fn(4, 2, 3, |_, _, _| 0.5);
        let course = Course::default();
        let r = execute_task(
            [course.width, 0.0, 0.0],
            &o,
            &identity_norm(4),
            &course,
            &ExecutionConfig::default(),
        )
        .unwrap();
        assert!(r.terminated);
        assert_eq!(r.steps, 0);
        assert_eq!(r.states.len(), 1);
    }

    #[test]
    fn budget_exhaustion_reports_unterminated() {
        let o = Tensor3::from_fn(4, 1, 4, |d, _, _| if d == 3 { 0.0 } else { 0.5 });
        let cfg = ExecutionConfig {
            max_steps: 10,
            ..ExecutionConfig::default()
        };
        let course = Course::default();
        let r = execute_task(
            course.start_state(TaskPath::Yellow),
            &o,
            &identity_norm(4),
            &course,
            &cfg,
        )
        .unwrap();
        assert!(!r.terminated);
        assert_eq!(r.steps, 10);
        assert_eq!(r.states.len(), 11);
        assert_eq!(r.actions.len(), 10);
    }

    #[test]
    fn states_follow_kinematics() {
        let o = Tensor3::from_fn(4, 2, 6, |d, j, l| {
            if d == 3 {
                0.1 * j as f64 + 0.02 * l as f64
            } else {
                0.3 * j as f64
            }
        });
        let norm = NormalizationInfo {
            min: vec![0.0, -20.0, -1.0, -0.1],
            max: vec![100.0, 20.0, 1.0, 0.1],
        };
        let course = Course::default();
        let cfg = ExecutionConfig::default();
        let r = execute_task(course.start_state(TaskPath::Blue), &o, &norm, &course, &cfg).unwrap();
        for t in 0..r.steps {
            assert_eq!(r.states[t + 1], Course::step(&r.states[t], r.actions[t]));
        }
        assert_eq!(
            r,
            execute_task(course.start_state(TaskPath::Blue), &o, &norm, &course, &cfg).unwrap()
        );
    }

    #[test]
    fn huge_epsilon_ends_every_subtask_after_one_step() {
        let o = Tensor3::from_fn(4, 2, 6, |d, j, _| if d == 3 { 0.5 } else { 0.2 + 0.5 * j as f64 });
        let cfg = ExecutionConfig {
            epsilon: 1e9,
            max_steps: 12,
            ..ExecutionConfig::default()
        };
        let course = Course::default();
        let r = execute_task(
            course.start_state(TaskPath::Yellow),
            &o,
            &identity_norm(4),
            &course,
            &cfg,
        )
        .unwrap();
        // Every step re-selects and so restarts at the factor's first lag.
        let first = |j| *active_lags(&o, j).unwrap().start();
        for (t, &g) in r.subgoals.iter().enumerate() {
            let expected = playback_action(&o, g, first(g), &identity_norm(4), 3).unwrap().unwrap();
            assert_eq!(r.actions[t], expected[0]);
        }
    }

    #[test]
    fn csv_has_one_row_per_state() {
        let o = Tensor3::from_fn(4, 1, 3, |d, _, _| if d == 3 { 0.0 } else { 0.5 });
        let cfg = ExecutionConfig {
            max_steps: 4,
            ..ExecutionConfig::default()
        };
        let r = execute_task([0.0; 3], &o, &identity_norm(4), &Course::default(), &cfg).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        assert!(text.lines().last().unwrap().ends_with(",,"));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = ExecutionConfig {
            epsilon: 0.0,
            ..ExecutionConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ExecutionConfig::for_pattern_length(40).max_subtask_steps, 80);
    }
}
