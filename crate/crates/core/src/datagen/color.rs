//! Synthetic color-sequence datasets.
//!
//! A scalar state hovers around the mean of the color currently pursued.
//! The subgoal `g_t` is the target color; the action `a_t = g_t − s_t` moves
//! the state onto the target and `s_{t+1} = s_t + a_t + ε`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, GeneratorKind, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Yellow,
    Blue,
    Purple,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Yellow, Color::Blue, Color::Purple];

    /// Label index used as the ground-truth subgoal.
    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Color> {
        Color::ALL.get(label).copied()
    }

    /// State mean of the color: 1, 2, 3, 4 for red, yellow, blue, purple.
    pub fn mean(self) -> f64 {
        (self.label() + 1) as f64
    }

    /// Color whose mean is nearest to `value`.
    pub fn nearest(value: f64) -> Color {
        let idx = (value.round() as i64 - 1).clamp(0, 3) as usize;
        Color::ALL[idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    Simple,
    Conditional,
}

/// Two ten-step templates: red³ yellow³ blue⁴ and blue³ yellow³ red⁴.
pub const COLOR10_TEMPLATES: [[Color; 10]; 2] = {
    use Color::*;
    [
        [Red, Red, Red, Yellow, Yellow, Yellow, Blue, Blue, Blue, Blue],
        [Blue, Blue, Blue, Yellow, Yellow, Yellow, Red, Red, Red, Red],
    ]
};

const BLOCK3: usize = 3;
const BLOCK10: usize = 10;

/// Color-3 sequences: runs of length-3 color blocks. In conditional mode a
/// yellow block whose predecessor was yellow or blue is re-colored purple.
pub fn gen_color3(mode: ColorMode, n_seq: usize, t: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    check_args(t, BLOCK3, noise_sd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [Color::Red, Color::Yellow, Color::Blue];
    let mut trajectories = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let simple: Vec<Color> = (0..t / BLOCK3)
            .map(|_| *base.choose(&mut rng).expect("non-empty palette"))
            .collect();
        let blocks: Vec<Color> = match mode {
            ColorMode::Simple => simple,
            ColorMode::Conditional => simple
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let recolor = i > 0 && c == Color::Yellow && matches!(simple[i - 1], Color::Yellow | Color::Blue);
                    if recolor {
                        Color::Purple
                    } else {
                        c
                    }
                })
                .collect(),
        };
        let targets: Vec<Color> = blocks.iter().flat_map(|&c| std::iter::repeat_n(c, BLOCK3)).collect();
        trajectories.push(roll_out(&targets, BLOCK3, noise_sd, &mut rng)?);
    }
    let (generator, n_labels) = match mode {
        ColorMode::Simple => (GeneratorKind::Color3Simple, 3),
        ColorMode::Conditional => (GeneratorKind::Color3Conditional, 4),
    };
    Ok(Dataset {
        trajectories,
        meta: DatasetMeta {
            generator,
            params: serde_json::json!({ "n_seq": n_seq, "t": t, "noise_sd": noise_sd, "mode": mode }),
            seed,
            state_dim: 1,
            action_dim: 1,
            n_labels,
            angular_state_dims: vec![],
        },
    })
}

/// Color-10 sequences: uniformly random concatenations of the two
/// [`COLOR10_TEMPLATES`]. Ground-truth boundaries sit at template starts.
pub fn gen_color10(n_seq: usize, t: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    check_args(t, BLOCK10, noise_sd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let targets: Vec<Color> = (0..t / BLOCK10)
            .flat_map(|_| COLOR10_TEMPLATES[rng.random_range(0..2)])
            .collect();
        trajectories.push(roll_out(&targets, BLOCK10, noise_sd, &mut rng)?);
    }
    Ok(Dataset {
        trajectories,
        meta: DatasetMeta {
            generator: GeneratorKind::Color10,
            params: serde_json::json!({ "n_seq": n_seq, "t": t, "noise_sd": noise_sd }),
            seed,
            state_dim: 1,
            action_dim: 1,
            n_labels: 3,
            angular_state_dims: vec![],
        },
    })
}

fn check_args(t: usize, block: usize, noise_sd: f64) -> Result<()> {
    if t == 0 || !t.is_multiple_of(block) {
        return Err(Error::invalid(format!(
            "sequence length {t} must be a positive multiple of {block}"
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!(
            "noise_sd must be finite and >= 0, got {noise_sd}"
        )));
    }
    Ok(())
}

fn roll_out(targets: &[Color], block: usize, noise_sd: f64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let n = targets.len();
    let mut states = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut s = targets[0].mean() + noise.sample(rng);
    for target in targets {
        let a = target.mean() - s;
        states.push(vec![s]);
        actions.push(vec![a]);
        s = s + a + noise.sample(rng);
    }
    Ok(Trajectory {
        states,
        actions,
        subgoal_labels: targets.iter().map(|c| c.label()).collect(),
        boundaries: (1..n / block).map(|k| k * block).collect(),
        task_id: 0,
    })
}
