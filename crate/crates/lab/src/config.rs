//! Single TOML file describing a whole experiment.

use std::path::Path;

use etank_core::{ControllerGains, PatternSpec, SimConfig, SurfaceModel, SurfaceSpec};
use etank_estimator::{DatasetConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collect::SkillSetSpec;
use crate::heatmap::GridSpec;
use crate::safety::SafetyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TankConfig {
    pub epsilon: f64,
    /// Scalar budget of the ground-truth runs, J.
    pub collect_budget: f64,
}

impl Default for TankConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            collect_budget: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub skill: PatternSpec,
    /// Defaults to the training surface.
    pub surface: Option<SurfaceSpec>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            skill: PatternSpec {
                pattern: etank_core::Pattern::Zigzag,
                start_uv: (-0.2, 0.0),
                ..PatternSpec::default()
            },
            surface: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub grid: GridSpec,
    /// Template skill; its start is replaced by each grid node.
    pub template: PatternSpec,
    /// Defaults to the training surface.
    pub surface: Option<SurfaceSpec>,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                u_range: (-0.4, 0.3),
                v_range: (-0.4, 0.4),
                ..GridSpec::default()
            },
            template: PatternSpec {
                length: 0.1,
                ..PatternSpec::default()
            },
            surface: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSurface {
    pub name: String,
    pub surface: SurfaceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Unseen surfaces for the zero-shot test.
    pub transfer: Vec<NamedSurface>,
    /// Skills drawn per transfer surface.
    pub skills: SkillSetSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            transfer: vec![
                NamedSurface {
                    name: "planar".into(),
                    surface: SurfaceModel::planar().to_spec(),
                },
                NamedSurface {
                    name: "inclined".into(),
                    surface: SurfaceModel::inclined(etank_core::surface::DEFAULT_INCLINE_GRADE).to_spec(),
                },
            ],
            skills: SkillSetSpec {
                count: 10,
                ..SkillSetSpec::default()
            },
        }
    }
}

/// Every stage reads its section; `seed` is the single source of randomness.
/// Seeds inside the sections are replaced by seeds derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Surface the training data is collected on.
    pub surface: SurfaceSpec,
    pub gains: ControllerGains,
    pub tank: TankConfig,
    pub sim: SimConfig,
    pub collect: SkillSetSpec,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub estimate: EstimateConfig,
    pub heatmap: HeatmapConfig,
    pub eval: EvalConfig,
    pub safety: SafetyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            surface: SurfaceModel::curved(etank_core::surface::DEFAULT_AMPLITUDE, etank_core::surface::DEFAULT_FREQUENCY).to_spec(),
            gains: ControllerGains::default(),
            tank: TankConfig::default(),
            sim: SimConfig::default(),
            collect: SkillSetSpec::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            estimate: EstimateConfig::default(),
            heatmap: HeatmapConfig::default(),
            eval: EvalConfig::default(),
            safety: SafetyConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = SurfaceModel::from_spec(&self.surface) {
            return bad(format!("surface: {e}"));
        }
        if let Err(e) = self.gains.validate() {
            return bad(format!("gains: {e}"));
        }
        if !(self.tank.epsilon > 0.0 && self.tank.collect_budget > self.tank.epsilon) {
            return bad("tank: need 0 < epsilon < collect_budget".into());
        }
        for (name, sim) in [("sim", &self.sim), ("safety.sim", &self.safety.sim)] {
            if sim.substeps == 0 || !(sim.noise_sigma >= 0.0 && sim.noise_sigma.is_finite()) {
                return bad(format!("{name}: need substeps >= 1 and a finite, non-negative noise sigma"));
            }
        }
        if let Err(e) = self.dataset.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad(e.to_string());
        }
        if self.train.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if let Err(e) = self.heatmap.grid.validate() {
            return bad(e);
        }
        for s in self.estimate.surface.iter().chain(&self.heatmap.surface) {
            if let Err(e) = SurfaceModel::from_spec(s) {
                return bad(format!("surface: {e}"));
            }
        }
        for t in &self.eval.transfer {
            if let Err(e) = SurfaceModel::from_spec(&t.surface) {
                return bad(format!("transfer surface {}: {e}", t.name));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the parsed config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Seed for one named stage, derived from the global seed.
    pub fn derived_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn training_surface(&self) -> SurfaceModel {
        SurfaceModel::from_spec(&self.surface).expect("validated")
    }

    pub fn surface_or_default(&self, s: &Option<SurfaceSpec>) -> SurfaceModel {
        s.as_ref()
            .map(|s| SurfaceModel::from_spec(s).expect("validated"))
            .unwrap_or_else(|| self.training_surface())
    }
}
