//! Versioned JSON checkpoints of a trained estimator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::NormStats;
use crate::model::{ModelError, TcnConfig, TcnModel};
use crate::predict::PowerEstimator;
use crate::train::TrainingHistory;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found}, expected {CHECKPOINT_VERSION}")]
    Version { found: u32 },
    #[error("checkpoint tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: TcnConfig,
    window: usize,
    decimation: usize,
    norm: NormStats,
    history: TrainingHistory,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(est: &PowerEstimator) -> Result<String, CheckpointError> {
    let tensors = est
        .model
        .tensors()
        .iter()
        .map(|t| NamedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: est.model.params()[t.offset..t.offset + t.len()].to_vec(),
        })
        .collect();
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: est.model.config().clone(),
        window: est.window,
        decimation: est.decimation,
        norm: est.norm.clone(),
        history: est.history.clone(),
        tensors,
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn from_json(s: &str) -> Result<PowerEstimator, CheckpointError> {
    #[derive(Deserialize)]
    struct Header {
        version: u32,
    }
    let header: Header = serde_json::from_str(s)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: header.version });
    }
    let ck: Checkpoint = serde_json::from_str(s)?;
    let mut model = TcnModel::zeros(ck.model)?;
    let layout = model.tensors().to_vec();
    if layout.len() != ck.tensors.len() {
        return Err(CheckpointError::Tensor {
            name: "*".into(),
            msg: format!("{} tensors, model expects {}", ck.tensors.len(), layout.len()),
        });
    }
    for (spec, t) in layout.iter().zip(&ck.tensors) {
        if spec.name != t.name || spec.shape != t.shape || t.data.len() != spec.len() {
            return Err(CheckpointError::Tensor {
                name: t.name.clone(),
                msg: format!("expected {} with shape {:?}", spec.name, spec.shape),
            });
        }
        model.params_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(&t.data);
    }
    Ok(PowerEstimator {
        model,
        norm: ck.norm,
        window: ck.window,
        decimation: ck.decimation,
        history: ck.history,
    })
}

pub fn save(est: &PowerEstimator, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_json(est)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PowerEstimator, CheckpointError> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRecord;

    fn estimator() -> PowerEstimator {
        let cfg = TcnConfig {
            filters: 4,
            decoder_hidden: 3,
            ..TcnConfig::default()
        };
        PowerEstimator {
            model: TcnModel::new(cfg, 9).unwrap(),
            norm: NormStats::identity(),
            window: 100,
            decimation: 10,
            history: TrainingHistory {
                initial_val_mape_pct: 40.0,
                epochs: vec![EpochRecord {
                    epoch: 1,
                    train_mape_pct: 3.0,
                    val_mape_pct: 2.5,
                    wall_s: 0.0,
                }],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let est = estimator();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&est, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, est);
    }

    #[test]
    fn rejects_other_versions() {
        let json = to_json(&estimator()).unwrap().replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(from_json(&json), Err(CheckpointError::Version { found: 7 })));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let json = to_json(&estimator()).unwrap().replacen("\"shape\":[4,4,12]", "\"shape\":[4,4,11]", 1);
        assert!(matches!(from_json(&json), Err(CheckpointError::Tensor { .. })));
    }
}
