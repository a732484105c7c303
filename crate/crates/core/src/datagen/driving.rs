//! Two-task driving course with a unit-speed unicycle car.
//!
//! State is `(x, y, θ)`, the action is the heading change `Δθ`, and
//! `x' = x + cos θ`, `y' = y + sin θ`, `θ' = θ + Δθ`. Both reference paths
//! start at the left edge, cross each other exactly twice (at one and two
//! thirds of the course width), and end at the right edge. The demonstrator
//! is a pure-pursuit tracker whose lookahead never passes the end of the
//! subtask it is currently pursuing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, GeneratorKind, Trajectory};
use crate::error::{Error, Result};

/// Which reference path a task follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskPath {
    /// Task 0: starts low, facing up.
    Yellow,
    /// Task 1: starts high, facing down.
    Blue,
}

impl TaskPath {
    pub fn from_task(task: usize) -> Option<TaskPath> {
        match task {
            0 => Some(TaskPath::Yellow),
            1 => Some(TaskPath::Blue),
            _ => None,
        }
    }

    pub fn task_id(self) -> usize {
        match self {
            TaskPath::Yellow => 0,
            TaskPath::Blue => 1,
        }
    }

    fn sign(self) -> f64 {
        match self {
            TaskPath::Yellow => -1.0,
            TaskPath::Blue => 1.0,
        }
    }
}

/// Course geometry. The blue path is `y = A·sin(ωx + φ) + A/√2` with
/// `ω = 1.5π/W`, `φ = 0.75π`; the yellow path is its mirror image `y → −y`.
/// The two meet where `y = 0`, i.e. at `x = W/3` and `x = 2W/3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub width: f64,
    pub amplitude: f64,
}

impl Default for Course {
    fn default() -> Self {
        Course {
            width: 100.0,
            amplitude: 15.0,
        }
    }
}

impl Course {
    fn omega(&self) -> f64 {
        1.5 * PI / self.width
    }

    const PHASE: f64 = 0.75 * PI;

    /// Lateral position of a reference path at `x`.
    pub fn path_y(&self, path: TaskPath, x: f64) -> f64 {
        let a = self.amplitude;
        path.sign() * (a * (self.omega() * x + Self::PHASE).sin() + a * std::f64::consts::FRAC_1_SQRT_2)
    }

    /// Tangent heading of a reference path at `x`.
    pub fn path_heading(&self, path: TaskPath, x: f64) -> f64 {
        let slope = path.sign() * self.amplitude * self.omega() * (self.omega() * x + Self::PHASE).cos();
        slope.atan()
    }

    pub fn crossings(&self) -> [f64; 2] {
        [self.width / 3.0, 2.0 * self.width / 3.0]
    }

    /// Number of crossings already passed at `x`: the subtask index.
    pub fn segment_of(&self, x: f64) -> usize {
        self.crossings().iter().filter(|&&c| x >= c).count()
    }

    pub fn start_state(&self, path: TaskPath) -> [f64; 3] {
        [0.0, self.path_y(path, 0.0), self.path_heading(path, 0.0)]
    }

    pub fn reached_end(&self, state: &[f64]) -> bool {
        state[0] >= self.width
    }

    /// One kinematic step at unit speed.
    pub fn step(state: &[f64], dtheta: f64) -> [f64; 3] {
        let (x, y, th) = (state[0], state[1], state[2]);
        [x + th.cos(), y + th.sin(), th + dtheta]
    }
}

/// Pure-pursuit tracker of one reference path.
#[derive(Debug, Clone)]
pub struct PurePursuit {
    course: Course,
    path: TaskPath,
    lookahead: f64,
    subgoal_gain: f64,
    max_turn: f64,
    // Dense samples of the path: (x, y, cumulative arc length).
    samples: Vec<(f64, f64, f64)>,
}

impl PurePursuit {
    const RESOLUTION: f64 = 0.05;

    pub fn new(course: Course, path: TaskPath, lookahead: f64) -> Self {
        Self::with_subgoal_gain(course, path, lookahead, 0.0)
    }

    /// Tracker that additionally turns toward the end point of the subtask it
    /// is pursuing, with weight `subgoal_gain` (faded out within one
    /// lookahead of that point).
    pub fn with_subgoal_gain(course: Course, path: TaskPath, lookahead: f64, subgoal_gain: f64) -> Self {
        let n = (course.width * 1.5 / Self::RESOLUTION).ceil() as usize;
        let mut samples = Vec::with_capacity(n + 1);
        let mut arc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=n {
            let x = i as f64 * Self::RESOLUTION;
            let y = course.path_y(path, x);
            if let Some((px, py)) = prev {
                arc += ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            }
            samples.push((x, y, arc));
            prev = Some((x, y));
        }
        PurePursuit {
            course,
            path,
            lookahead,
            subgoal_gain,
            max_turn: 0.5,
            samples,
        }
    }

    fn nearest_index(&self, x: f64, y: f64) -> usize {
        let center = ((x / Self::RESOLUTION).round().max(0.0) as usize).min(self.samples.len() - 1);
        let span = (8.0 / Self::RESOLUTION) as usize;
        let lo = center.saturating_sub(span);
        let hi = (center + span).min(self.samples.len() - 1);
        (lo..=hi)
            .min_by(|&a, &b| {
                let da = (self.samples[a].0 - x).powi(2) + (self.samples[a].1 - y).powi(2);
                let db = (self.samples[b].0 - x).powi(2) + (self.samples[b].1 - y).powi(2);
                da.total_cmp(&db)
            })
            .expect("non-empty search window")
    }

    /// End point of the subtask that contains `x`: the next crossing, or the
    /// right edge of the course.
    pub fn subgoal_point(&self, x: f64) -> (f64, f64) {
        let end = self
            .course
            .crossings()
            .get(self.course.segment_of(x))
            .copied()
            .unwrap_or(self.course.width);
        (end, self.course.path_y(self.path, end))
    }

    /// Noise-free steering command toward the lookahead point, which is
    /// clamped to the end of the current subtask.
    pub fn steer(&self, state: &[f64]) -> f64 {
        let (x, y, th) = (state[0], state[1], state[2]);
        let near = self.nearest_index(x, y);
        let target_arc = self.samples[near].2 + self.lookahead;
        let mut idx = near;
        while idx + 1 < self.samples.len() && self.samples[idx].2 < target_arc {
            idx += 1;
        }
        let (mut tx, mut ty) = (self.samples[idx].0, self.samples[idx].1);
        let segment = self.course.segment_of(x);
        if let Some(&end) = self.course.crossings().get(segment) {
            if tx > end {
                tx = end;
                ty = self.course.path_y(self.path, end);
            }
        }
        let dist = ((tx - x).powi(2) + (ty - y).powi(2)).sqrt().max(self.lookahead);
        let alpha = wrap_angle((ty - y).atan2(tx - x) - th);
        let mut turn = 2.0 * alpha.sin() / dist;
        if self.subgoal_gain > 0.0 {
            let (gx, gy) = self.subgoal_point(x);
            let gdist = ((gx - x).powi(2) + (gy - y).powi(2)).sqrt();
            let fade = (gdist / self.lookahead).min(1.0);
            turn += self.subgoal_gain * fade * wrap_angle((gy - y).atan2(gx - x) - th);
        }
        turn.clamp(-self.max_turn, self.max_turn)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingParams {
    pub course: Course,
    pub lookahead: f64,
    /// Weight of the turn toward the current subtask's end point.
    pub subgoal_gain: f64,
    pub heading_noise_sd: f64,
    /// Start `x` is drawn from `U(0, start_x_jitter)`.
    pub start_x_jitter: f64,
    /// Standard deviations of the lateral and heading offsets of the start.
    pub start_y_sd: f64,
    pub start_heading_sd: f64,
    pub max_steps: usize,
}

impl Default for DrivingParams {
    fn default() -> Self {
        DrivingParams {
            course: Course::default(),
            lookahead: 3.0,
            subgoal_gain: 0.7,
            heading_noise_sd: 0.02,
            start_x_jitter: 4.0,
            start_y_sd: 0.5,
            start_heading_sd: 0.05,
            max_steps: 400,
        }
    }
}

/// `n_per_task` demonstrations of each task (task 0 first), each starting
/// near the left edge of its reference path. Subgoal labels
/// are `3·task + subtask`, so each trajectory carries three labels and two
/// boundaries.
pub fn gen_driving(n_per_task: usize, seed: u64) -> Result<Dataset> {
    gen_driving_with(n_per_task, seed, DrivingParams::default())
}

pub fn gen_driving_with(n_per_task: usize, seed: u64, params: DrivingParams) -> Result<Dataset> {
    if n_per_task == 0 {
        return Err(Error::invalid("n_per_task must be >= 1"));
    }
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()));
    let noise = normal(params.heading_noise_sd)?;
    let start_y = normal(params.start_y_sd)?;
    let start_heading = normal(params.start_heading_sd)?;
    if !(params.start_x_jitter >= 0.0 && params.start_x_jitter < params.course.width / 3.0) {
        return Err(Error::invalid("start_x_jitter must lie in [0, width/3)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let course = params.course;
    let mut trajectories = Vec::with_capacity(2 * n_per_task);
    for path in [TaskPath::Yellow, TaskPath::Blue] {
        let tracker = PurePursuit::with_subgoal_gain(course, path, params.lookahead, params.subgoal_gain);
        for _ in 0..n_per_task {
            // Jittered starts spread the crossing times across demonstrations.
            let x0 = params.start_x_jitter * rng.random::<f64>();
            let mut state = [
                x0,
                course.path_y(path, x0) + start_y.sample(&mut rng),
                course.path_heading(path, x0) + start_heading.sample(&mut rng),
            ];
            let mut tr = Trajectory {
                states: Vec::new(),
                actions: Vec::new(),
                subgoal_labels: Vec::new(),
                boundaries: Vec::new(),
                task_id: path.task_id(),
            };
            while !course.reached_end(&state) {
                if tr.states.len() >= params.max_steps {
                    return Err(Error::invalid("demonstration did not reach the course end"));
                }
                let label = 3 * path.task_id() + course.segment_of(state[0]);
                if tr.subgoal_labels.last().is_some_and(|&prev| prev != label) {
                    tr.boundaries.push(tr.states.len());
                }
                let dtheta = tracker.steer(&state) + noise.sample(&mut rng);
                tr.states.push(state.to_vec());
                tr.actions.push(vec![dtheta]);
                tr.subgoal_labels.push(label);
                state = Course::step(&state, dtheta);
            }
            trajectories.push(tr);
        }
    }
    Ok(Dataset {
        trajectories,
        meta: DatasetMeta {
            generator: GeneratorKind::Driving,
            params: serde_json::json!({ "n_per_task": n_per_task, "driving": params }),
            seed,
            state_dim: 3,
            action_dim: 1,
            n_labels: 6,
            angular_state_dims: vec![2],
        },
    })
}
