//! Mini-batch training with Adam on the percentage error.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{WindowRef, WindowedDataset, INVARIANT_DIM, VARIANT_CHANNELS};
use crate::model::{DropoutMasks, ModelError, TcnConfig, TcnModel};
use crate::predict::PowerEstimator;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no training windows")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch} at trajectory {traj}, step {step}")]
    NonFinite { epoch: usize, traj: usize, step: usize },
    #[error("validation error {val_pct:.2}% exceeds {factor}× the initial {initial_pct:.2}% in epoch {epoch}")]
    Diverged {
        epoch: usize,
        val_pct: f64,
        initial_pct: f64,
        factor: f64,
        history: TrainingHistory,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Abort when validation error exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    pub model: TcnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            divergence_factor: 10.0,
            model: TcnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch MAPE during the epoch, with dropout, %.
    pub train_mape_pct: f64,
    /// Validation MAPE after the epoch, %.
    pub val_mape_pct: f64,
    /// Wall-clock time since training started. Not stored in checkpoints.
    #[serde(skip)]
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub initial_val_mape_pct: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_mape_pct,val_mape_pct,wall_s")?;
        writeln!(w, "0,,{},0", self.initial_val_mape_pct)?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{:.3}", e.epoch, e.train_mape_pct, e.val_mape_pct, e.wall_s)?;
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

const EVAL_BATCH: usize = 256;

/// Deterministic MAPE over `refs`, %.
pub fn evaluate(model: &TcnModel, ds: &WindowedDataset, refs: &[WindowRef]) -> Result<f64, ModelError> {
    if refs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in refs.chunks(EVAL_BATCH) {
        let (x, inv, y) = ds.batch(chunk);
        let pred = model.predict(&x, &inv, chunk.len())?;
        total += TcnModel::mape(&pred, &y) * chunk.len() as f64;
    }
    Ok(100.0 * total / refs.len() as f64)
}

/// Trains from a seeded initialization. Validation falls back to the
/// training windows when the validation split is empty.
pub fn train(ds: &WindowedDataset, cfg: &TrainConfig) -> Result<PowerEstimator, TrainError> {
    cfg.validate()?;
    let model_cfg = TcnConfig {
        input_channels: VARIANT_CHANNELS,
        invariant_dim: INVARIANT_DIM,
        ..cfg.model.clone()
    };
    let mut model = TcnModel::new(model_cfg, cfg.seed)?;
    // Normalized training labels have mean `label_offset`.
    model.set_output_bias(ds.norm.label_offset);

    let mut train_refs = ds.windows(&ds.split.train);
    if train_refs.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let val_refs = if ds.split.val.is_empty() {
        train_refs.clone()
    } else {
        ds.windows(&ds.split.val)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(model.num_params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = TrainingHistory {
        initial_val_mape_pct: evaluate(&model, ds, &val_refs)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    log::info!(
        "training {} parameters on {} windows, initial validation MAPE {:.2}%",
        model.num_params(),
        train_refs.len(),
        history.initial_val_mape_pct
    );

    let started = Instant::now();
    for epoch in 1..=cfg.epochs {
        train_refs.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train_refs.chunks(cfg.batch_size) {
            let (x, inv, y) = ds.batch(chunk);
            let masks = (model.config().dropout > 0.0).then(|| DropoutMasks::sample(model.config(), chunk.len(), &mut rng));
            let (loss, grad) = match model.loss_and_grad(&x, &inv, &y, chunk.len(), masks.as_ref()) {
                Ok(r) => r,
                Err(ModelError::NonFinite { sample }) => {
                    let w = chunk[sample];
                    return Err(TrainError::NonFinite {
                        epoch,
                        traj: w.traj,
                        step: w.end,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            adam.step(model.params_mut(), &grad);
            sum += loss * chunk.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            train_mape_pct: 100.0 * sum / train_refs.len() as f64,
            val_mape_pct: evaluate(&model, ds, &val_refs)?,
            wall_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.3}%, validation {:.3}%",
            rec.train_mape_pct,
            rec.val_mape_pct
        );
        let val = rec.val_mape_pct;
        history.epochs.push(rec);
        if !val.is_finite() || val > cfg.divergence_factor * history.initial_val_mape_pct {
            return Err(TrainError::Diverged {
                epoch,
                val_pct: val,
                initial_pct: history.initial_val_mape_pct,
                factor: cfg.divergence_factor,
                history,
            });
        }
    }
    Ok(PowerEstimator {
        model,
        norm: ds.norm.clone(),
        window: ds.window,
        decimation: ds.decimation,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_dataset, DatasetConfig};
    use etank_core::{PowerTrace, SkillProfile};
    use etank_core::skills::SkillSample;
    use nalgebra::Vector6;

    fn toy_skill(n: usize, speed: f64) -> SkillProfile {
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 * 1e-3;
                SkillSample {
                    t,
                    x_d: Vector6::new(speed * t, 0.0, 0.0, 0.0, 0.0, 0.0),
                    x_dot_d: Vector6::new(speed, 0.0, 0.0, 0.0, 0.0, 0.0),
                }
            })
            .collect();
        SkillProfile {
            samples,
            f_d: Vector6::new(0.0, 0.0, -5.0, 0.0, 0.0, 0.0),
            meta: None,
        }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            model: TcnConfig {
                filters: 8,
                decoder_hidden: 8,
                ..TcnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn dataset(power: impl Fn(usize, usize) -> f64) -> WindowedDataset {
        let pairs: Vec<(SkillProfile, PowerTrace)> = (0..6)
            .map(|i| {
                let skill = toy_skill(400, 0.02 + 0.01 * i as f64);
                let p = (0..400).map(|k| power(i, k)).collect();
                (skill, PowerTrace::new(1e-3, p))
            })
            .collect();
        let cfg = DatasetConfig {
            window: 20,
            decimation: 10,
            val_fraction: 0.2,
            test_fraction: 0.0,
            seed: 1,
        };
        build_dataset(&pairs, &cfg).unwrap()
    }

    #[test]
    fn adam_matches_hand_computed_first_step() {
        let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = [1.0, -2.0];
        adam.step(&mut p, &[0.5, -3.0]);
        // First bias-corrected step is lr · sign(g) up to eps.
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(1, 0.05, 0.9, 0.999, 1e-8);
        let mut p = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn constant_label_converges() {
        let ds = dataset(|_, _| 0.4);
        let est = train(&ds, &tiny_cfg(15)).unwrap();
        let last = est.history.epochs.last().unwrap();
        assert!(last.val_mape_pct < 1.0, "{last:?}");
    }

    #[test]
    fn learns_speed_dependent_power() {
        let ds = dataset(|i, _| 0.1 + 2.0 * i as f64);
        let cfg = tiny_cfg(8);
        let est = train(&ds, &cfg).unwrap();
        let h = &est.history;
        assert!(h.epochs.last().unwrap().train_mape_pct < h.epochs[0].train_mape_pct);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset(|i, k| 0.2 + 0.1 * i as f64 + 1e-4 * k as f64);
        let a = train(&ds, &tiny_cfg(2)).unwrap();
        let b = train(&ds, &tiny_cfg(2)).unwrap();
        let losses = |h: &TrainingHistory| h.epochs.iter().map(|e| (e.train_mape_pct.to_bits(), e.val_mape_pct.to_bits())).collect::<Vec<_>>();
        assert_eq!(losses(&a.history), losses(&b.history));
        assert!(a.model.params().iter().zip(b.model.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn huge_learning_rate_diverges_with_history() {
        let ds = dataset(|i, _| 0.5 + i as f64);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            divergence_factor: 1.5,
            ..tiny_cfg(5)
        };
        match train(&ds, &cfg) {
            Err(TrainError::Diverged { history, epoch, .. }) => assert_eq!(history.epochs.len(), epoch),
            other => panic!("expected divergence, got {:?}", other.map(|e| e.history)),
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainingHistory {
            initial_val_mape_pct: 50.0,
            epochs: vec![EpochRecord {
                epoch: 1,
                train_mape_pct: 10.0,
                val_mape_pct: 12.5,
                wall_s: 1.25,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_mape_pct,val_mape_pct,wall_s\n0,,50,0\n1,10,12.5,1.250\n");
    }
}
