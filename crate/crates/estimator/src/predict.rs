//! Power and task-energy prediction for unseen skills.

use etank_core::{PowerTrace, SkillProfile};

use crate::features::{NormStats, SkillFeatures, INVARIANT_DIM, VARIANT_CHANNELS};
use crate::model::{ModelError, TcnModel};
use crate::train::TrainingHistory;

const PREDICT_BATCH: usize = 256;

/// A trained network together with everything needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerEstimator {
    pub model: TcnModel,
    pub norm: NormStats,
    pub window: usize,
    pub decimation: usize,
    pub history: TrainingHistory,
}

impl PowerEstimator {
    /// Predicted power at every decimated step, W, floored at zero.
    pub fn predict_decimated(&self, skill: &SkillProfile) -> Result<Vec<f64>, ModelError> {
        let feats = SkillFeatures::from_skill(skill, self.decimation);
        let xs = self.window * VARIANT_CHANNELS;
        let mut out = Vec::with_capacity(feats.len());
        let ends: Vec<usize> = (0..feats.len()).collect();
        for chunk in ends.chunks(PREDICT_BATCH) {
            let mut x = vec![0.0; chunk.len() * xs];
            let mut inv = vec![0.0; chunk.len() * INVARIANT_DIM];
            for (i, &end) in chunk.iter().enumerate() {
                feats.window(
                    end,
                    self.window,
                    &self.norm,
                    &mut x[i * xs..(i + 1) * xs],
                    &mut inv[i * INVARIANT_DIM..(i + 1) * INVARIANT_DIM],
                );
            }
            let z = self.model.predict(&x, &inv, chunk.len())?;
            out.extend(z.into_iter().map(|z| self.norm.output_to_power(z)));
        }
        Ok(out)
    }

    /// Predicted power at the skill's own sampling, linearly interpolated
    /// between decimated steps and held after the last one.
    pub fn predict_power(&self, skill: &SkillProfile) -> Result<PowerTrace, ModelError> {
        let coarse = self.predict_decimated(skill)?;
        let power = upsample(&coarse, self.decimation, skill.len());
        let dt = match skill.samples.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => etank_core::skills::SKILL_DT,
        };
        Ok(PowerTrace::new(dt, power))
    }

    /// Cumulative energy schedule `ε + ∫P dt` for the skill, J.
    pub fn energy_schedule(&self, skill: &SkillProfile, epsilon: f64) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict_power(skill)?.integrate_energy(epsilon))
    }

    /// Total predicted task energy, J.
    pub fn task_energy(&self, skill: &SkillProfile) -> Result<f64, ModelError> {
        Ok(self.predict_power(skill)?.trapezoid())
    }
}

/// Linear interpolation of values at every `decimation`-th sample back to
/// `n` samples; the tail after the last coarse value is held.
pub fn upsample(coarse: &[f64], decimation: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let j = k / decimation;
            let r = (k % decimation) as f64 / decimation as f64;
            match coarse.get(j + 1) {
                Some(&next) => coarse[j] + r * (next - coarse[j]),
                None => coarse[j],
            }
        })
        .collect()
}
