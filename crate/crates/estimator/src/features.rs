//! Window features, label transform, normalization and the trajectory split.

use etank_core::{PowerTrace, SkillProfile};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative pose (6) and desired velocity (6).
pub const VARIANT_CHANNELS: usize = 12;
pub const INVARIANT_DIM: usize = 6;
/// Shift inside the label log transform.
pub const LABEL_SHIFT: f64 = 3.0;
/// Added to z-scored labels so that percentage errors stay well defined.
pub const LABEL_OFFSET: f64 = 5.0;
/// Channels whose training spread is below this are left unscaled.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("trajectory {index}: skill has {skill} samples but power trace has {trace}")]
    Alignment {
        index: usize,
        skill: usize,
        trace: usize,
    },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
}

/// `log(max(p, 0) + 3)`.
pub fn transform_label(power: f64) -> f64 {
    (power.max(0.0) + LABEL_SHIFT).ln()
}

pub fn inverse_label(y: f64) -> f64 {
    y.exp() - LABEL_SHIFT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub invariant_mean: Vec<f64>,
    pub invariant_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
    pub label_offset: f64,
}

impl NormStats {
    /// Stats that leave every value unchanged.
    pub fn identity() -> Self {
        Self {
            input_mean: vec![0.0; VARIANT_CHANNELS],
            input_std: vec![1.0; VARIANT_CHANNELS],
            invariant_mean: vec![0.0; INVARIANT_DIM],
            invariant_std: vec![1.0; INVARIANT_DIM],
            label_mean: 0.0,
            label_std: 1.0,
            label_offset: 0.0,
        }
    }

    pub fn normalize_input(&self, channel: usize, x: f64) -> f64 {
        (x - self.input_mean[channel]) / self.input_std[channel]
    }

    pub fn denormalize_input(&self, channel: usize, z: f64) -> f64 {
        z * self.input_std[channel] + self.input_mean[channel]
    }

    pub fn normalize_invariant(&self, i: usize, x: f64) -> f64 {
        (x - self.invariant_mean[i]) / self.invariant_std[i]
    }

    /// Transformed label to network target.
    pub fn normalize_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std + self.label_offset
    }

    pub fn denormalize_label(&self, z: f64) -> f64 {
        (z - self.label_offset) * self.label_std + self.label_mean
    }

    /// Network output to power, W, floored at zero.
    pub fn output_to_power(&self, z: f64) -> f64 {
        inverse_label(self.denormalize_label(z)).max(0.0)
    }
}

/// Population standard deviation, or 1 for a degenerate channel.
fn spread(sum_sq_dev: f64, n: f64) -> f64 {
    let std = (sum_sq_dev / n).sqrt();
    if std < MIN_STD {
        1.0
    } else {
        std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Window length in decimated steps.
    pub window: usize,
    /// Skill samples per network step.
    pub decimation: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 100,
            decimation: 10,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.window == 0 || self.decimation == 0 {
            return Err(FeatureError::Config("window and decimation must be at least 1".into()));
        }
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.val_fraction) || !ok(self.test_fraction) || self.val_fraction + self.test_fraction >= 1.0 {
            return Err(FeatureError::Config("split fractions must leave a training share".into()));
        }
        Ok(())
    }
}

/// Decimated per-step inputs of one skill.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillFeatures {
    pub pose: Vec<[f64; 6]>,
    pub vel: Vec<[f64; 6]>,
    pub f_d: [f64; 6],
}

impl SkillFeatures {
    pub fn from_skill(skill: &SkillProfile, decimation: usize) -> Self {
        let picked = skill.samples.iter().step_by(decimation.max(1));
        let (pose, vel) = picked
            .map(|s| {
                let mut p = [0.0; 6];
                let mut v = [0.0; 6];
                p.copy_from_slice(s.x_d.as_slice());
                v.copy_from_slice(s.x_dot_d.as_slice());
                (p, v)
            })
            .unzip();
        let mut f_d = [0.0; 6];
        f_d.copy_from_slice(skill.f_d.as_slice());
        Self { pose, vel, f_d }
    }

    pub fn len(&self) -> usize {
        self.pose.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pose.is_empty()
    }

    /// Raw channel values of the window ending at `end`, `window × 12`, row
    /// per step. Steps before the start are at rest: zero pose change and
    /// zero velocity. Pose is relative to the first real step of the window.
    pub fn raw_window(&self, end: usize, window: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), window * VARIANT_CHANNELS);
        let start = (end + 1).saturating_sub(window);
        let pad = window - (end + 1 - start);
        out[..pad * VARIANT_CHANNELS].fill(0.0);
        let origin = self.pose[start];
        for (row, s) in (start..=end).enumerate() {
            let o = (pad + row) * VARIANT_CHANNELS;
            for c in 0..6 {
                out[o + c] = self.pose[s][c] - origin[c];
                out[o + 6 + c] = self.vel[s][c];
            }
        }
    }

    /// Normalized window and invariant input.
    pub fn window(&self, end: usize, window: usize, norm: &NormStats, x: &mut [f64], inv: &mut [f64]) {
        self.raw_window(end, window, x);
        for row in x.chunks_exact_mut(VARIANT_CHANNELS) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = norm.normalize_input(c, *v);
            }
        }
        for (i, v) in inv.iter_mut().enumerate() {
            *v = norm.normalize_invariant(i, self.f_d[i]);
        }
    }
}

/// One training trajectory on the decimated grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub features: SkillFeatures,
    /// Transformed, not yet normalized, labels.
    pub labels: Vec<f64>,
}

impl Trajectory {
    pub fn new(index: usize, skill: &SkillProfile, power: &PowerTrace, decimation: usize) -> Result<(Self, usize), FeatureError> {
        if skill.len() != power.len() {
            return Err(FeatureError::Alignment {
                index,
                skill: skill.len(),
                trace: power.len(),
            });
        }
        let features = SkillFeatures::from_skill(skill, decimation);
        let mut clamped = 0;
        let labels = power
            .power
            .iter()
            .step_by(decimation)
            .map(|&p| {
                if p < 0.0 {
                    clamped += 1;
                }
                transform_label(p)
            })
            .collect();
        Ok((Self { features, labels }, clamped))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded split of whole trajectories.
pub fn split_trajectories(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let (n_val, n_test) = if n_val + n_test >= n {
        // Keep at least one training trajectory.
        let spare = n.saturating_sub(1);
        (n_val.min(spare), n_test.min(spare - n_val.min(spare)))
    } else {
        (n_val, n_test)
    };
    let mut split = Split {
        val: idx[..n_val].to_vec(),
        test: idx[n_val..n_val + n_test].to_vec(),
        train: idx[n_val + n_test..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// A window is identified by its trajectory and its last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowRef {
    pub traj: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub trajectories: Vec<Trajectory>,
    pub norm: NormStats,
    pub split: Split,
    pub window: usize,
    pub decimation: usize,
    /// Negative powers clamped to zero before the label transform.
    pub clamp_events: usize,
}

impl WindowedDataset {
    /// Every stride-1 window of the given trajectories.
    pub fn windows(&self, trajs: &[usize]) -> Vec<WindowRef> {
        trajs
            .iter()
            .flat_map(|&t| (0..self.trajectories[t].labels.len()).map(move |end| WindowRef { traj: t, end }))
            .collect()
    }

    /// Writes the normalized inputs of `w` and returns its normalized label.
    pub fn fill(&self, w: WindowRef, x: &mut [f64], inv: &mut [f64]) -> f64 {
        let tr = &self.trajectories[w.traj];
        tr.features.window(w.end, self.window, &self.norm, x, inv);
        self.norm.normalize_label(tr.labels[w.end])
    }

    /// Normalized inputs and labels of a batch, stacked.
    pub fn batch(&self, refs: &[WindowRef]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let xs = self.window * VARIANT_CHANNELS;
        let mut x = vec![0.0; refs.len() * xs];
        let mut inv = vec![0.0; refs.len() * INVARIANT_DIM];
        let mut y = Vec::with_capacity(refs.len());
        for (i, w) in refs.iter().enumerate() {
            y.push(self.fill(
                *w,
                &mut x[i * xs..(i + 1) * xs],
                &mut inv[i * INVARIANT_DIM..(i + 1) * INVARIANT_DIM],
            ));
        }
        (x, inv, y)
    }
}

/// Builds windows and training-split normalization from aligned skill/power pairs.
pub fn build_dataset(pairs: &[(SkillProfile, PowerTrace)], cfg: &DatasetConfig) -> Result<WindowedDataset, FeatureError> {
    cfg.validate()?;
    let mut trajectories = Vec::with_capacity(pairs.len());
    let mut clamp_events = 0;
    for (i, (skill, power)) in pairs.iter().enumerate() {
        let (t, c) = Trajectory::new(i, skill, power, cfg.decimation)?;
        clamp_events += c;
        trajectories.push(t);
    }
    if clamp_events > 0 {
        log::info!("{clamp_events} negative power samples clamped to 0 before the label transform");
    }
    let split = split_trajectories(pairs.len(), cfg.val_fraction, cfg.test_fraction, cfg.seed);
    let train: Vec<&Trajectory> = split.train.iter().map(|&i| &trajectories[i]).collect();
    if train.iter().all(|t| t.labels.is_empty()) {
        return Err(FeatureError::EmptyTrainSplit);
    }
    let norm = compute_norm_stats(&train, cfg.window);
    Ok(WindowedDataset {
        trajectories,
        norm,
        split,
        window: cfg.window,
        decimation: cfg.decimation,
        clamp_events,
    })
}

/// Per-channel statistics over every element of every training window.
pub fn compute_norm_stats(train: &[&Trajectory], window: usize) -> NormStats {
    let mut buf = vec![0.0; window * VARIANT_CHANNELS];
    let mut n = 0.0;
    let mut sum = [0.0; VARIANT_CHANNELS];
    for t in train {
        for end in 0..t.labels.len() {
            t.features.raw_window(end, window, &mut buf);
            for row in buf.chunks_exact(VARIANT_CHANNELS) {
                for c in 0..VARIANT_CHANNELS {
                    sum[c] += row[c];
                }
            }
            n += window as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = [0.0; VARIANT_CHANNELS];
    for t in train {
        for end in 0..t.labels.len() {
            t.features.raw_window(end, window, &mut buf);
            for row in buf.chunks_exact(VARIANT_CHANNELS) {
                for c in 0..VARIANT_CHANNELS {
                    sq[c] += (row[c] - mean[c]).powi(2);
                }
            }
        }
    }
    let input_std = sq.iter().map(|&s| spread(s, n)).collect();

    let m = train.len() as f64;
    let mut inv_mean = vec![0.0; INVARIANT_DIM];
    for t in train {
        for i in 0..INVARIANT_DIM {
            inv_mean[i] += t.features.f_d[i] / m;
        }
    }
    let invariant_std = (0..INVARIANT_DIM)
        .map(|i| {
            let s: f64 = train.iter().map(|t| (t.features.f_d[i] - inv_mean[i]).powi(2)).sum();
            spread(s, m)
        })
        .collect();

    let labels: Vec<f64> = train.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let k = labels.len() as f64;
    let label_mean = labels.iter().sum::<f64>() / k;
    let label_sq: f64 = labels.iter().map(|y| (y - label_mean).powi(2)).sum();
    NormStats {
        input_mean: mean,
        input_std,
        invariant_mean: inv_mean,
        invariant_std,
        label_mean,
        label_std: spread(label_sq, k),
        label_offset: LABEL_OFFSET,
    }
}
