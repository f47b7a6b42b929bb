//! Pipeline stages behind the command-line subcommands.
//!
//! Layout under the output directory:
//! `dataset/` (skills, power traces, manifest), `model/` (checkpoint,
//! history, split), `estimate/`, `heatmap/`, `eval/`, `safety/`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use etank_core::skills::{load_skill, save_skill, Pattern};
use etank_core::{PatternSpec, PowerTrace, SimConfig, SkillProfile, SurfaceModel, World};
use etank_estimator::checkpoint::{self, CheckpointError};
use etank_estimator::{build_dataset, train, PowerEstimator, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collect::{generate_skill_set, ground_truth_power};
use crate::config::{ConfigError, ExperimentConfig};
use crate::heatmap::{build_heatmap, GridSpec};
use crate::metrics::{expert_power, metrics, MeanStd, MetricsReport, NamedMetrics};
use crate::safety::{run_safety_experiment, SafetyMode, SafetyReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation fault: {0}")]
    Simulation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Data(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl PipelineError {
    /// 0 success, 2 config, 3 simulation, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Simulation(_) => 3,
            PipelineError::Divergence(_) => 4,
            _ => 1,
        }
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Model(e.to_string())
    }
}

impl From<etank_estimator::ModelError> for PipelineError {
    fn from(e: etank_estimator::ModelError) -> Self {
        PipelineError::Model(e.to_string())
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

fn create_dir(p: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(p).map_err(io(format!("creating {}", p.display())))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(p, bytes).map_err(io(format!("writing {}", p.display())))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(p, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T, PipelineError> {
    let s = fs::read_to_string(p).map_err(io(format!("reading {}", p.display())))?;
    serde_json::from_str(&s).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
}

fn sha256_file(p: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(p).map_err(io(format!("reading {}", p.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_power(p: &Path, trace: &PowerTrace) -> Result<(), PipelineError> {
    let f = fs::File::create(p).map_err(io(format!("creating {}", p.display())))?;
    trace.write_csv(BufWriter::new(f)).map_err(io(format!("writing {}", p.display())))
}

fn read_power(p: &Path) -> Result<PowerTrace, PipelineError> {
    let f = fs::File::open(p).map_err(io(format!("opening {}", p.display())))?;
    PowerTrace::read_csv(std::io::BufReader::new(f)).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

pub fn model_dir(out: &Path) -> PathBuf {
    out.join("model")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub pattern: Pattern,
    pub spec: PatternSpec,
    pub sim_seed: u64,
    pub skill_file: String,
    pub power_file: Option<String>,
    pub skill_sha256: String,
    pub power_sha256: Option<String>,
    /// `None` when the run succeeded.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub requested: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ok_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.failure.is_none())
    }
}

/// Generates skills on the training surface and logs their ground-truth power.
pub fn cmd_collect(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let dir = dataset_dir(out);
    create_dir(&dir)?;
    let surface = cfg.training_surface();
    let world = World::new(surface.clone());
    let seed = cfg.derived_seed("collect");
    let planned = generate_skill_set(&surface, &cfg.collect, seed);
    let mut entries = Vec::with_capacity(planned.len());
    let mut first_failure = None;
    for (i, p) in planned.iter().enumerate() {
        let skill_file = format!("skill_{i:03}.csv");
        let skill_path = dir.join(&skill_file);
        save_skill(&p.skill, &skill_path).map_err(|e| PipelineError::Data(e.to_string()))?;
        let sim = SimConfig {
            seed: p.sim_seed,
            ..cfg.sim.clone()
        };
        let mut entry = ManifestEntry {
            index: i,
            pattern: p.spec.pattern,
            spec: p.spec.clone(),
            sim_seed: p.sim_seed,
            skill_sha256: sha256_file(&skill_path)?,
            skill_file,
            power_file: None,
            power_sha256: None,
            failure: None,
        };
        match ground_truth_power(&world, &cfg.gains, &p.skill, cfg.tank.collect_budget, cfg.tank.epsilon, &sim) {
            Ok(power) => {
                let power_file = format!("power_{i:03}.csv");
                let power_path = dir.join(&power_file);
                write_power(&power_path, &power)?;
                entry.power_sha256 = Some(sha256_file(&power_path)?);
                entry.power_file = Some(power_file);
            }
            Err(e) => {
                log::error!("skill {i}: {e}");
                first_failure.get_or_insert_with(|| format!("skill {i}: {e}"));
                entry.failure = Some(e.to_string());
            }
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed,
        requested: cfg.collect.count,
        entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!("collected {} skills into {}", manifest.ok_entries().count(), dir.display());
    match first_failure {
        Some(msg) => Err(PipelineError::Simulation(msg)),
        None => Ok(manifest),
    }
}

/// Successful `(manifest index, skill, power)` triples of a collected dataset.
pub fn load_dataset(out: &Path) -> Result<Vec<(usize, SkillProfile, PowerTrace)>, PipelineError> {
    let dir = dataset_dir(out);
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    manifest
        .ok_entries()
        .map(|e| {
            let skill = load_skill(dir.join(&e.skill_file)).map_err(|err| PipelineError::Data(err.to_string()))?;
            let power = read_power(&dir.join(e.power_file.as_deref().unwrap_or_default()))?;
            Ok((e.index, skill, power))
        })
        .collect()
}

/// Split record in manifest indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub config_hash: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.derived_seed("train"),
        ..cfg.train.clone()
    }
}

/// Trains on the collected dataset; writes checkpoint, history and split.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<PowerEstimator, PipelineError> {
    let data = load_dataset(out)?;
    let dir = model_dir(out);
    create_dir(&dir)?;
    let pairs: Vec<(SkillProfile, PowerTrace)> = data.iter().map(|(_, s, p)| (s.clone(), p.clone())).collect();
    let ds_cfg = etank_estimator::DatasetConfig {
        seed: cfg.derived_seed("split"),
        ..cfg.dataset.clone()
    };
    let ds = build_dataset(&pairs, &ds_cfg).map_err(|e| PipelineError::Data(e.to_string()))?;
    let to_manifest = |idx: &[usize]| idx.iter().map(|&i| data[i].0).collect::<Vec<_>>();
    let split = SplitRecord {
        config_hash: cfg.hash(),
        train: to_manifest(&ds.split.train),
        val: to_manifest(&ds.split.val),
        test: to_manifest(&ds.split.test),
    };
    write_json(&dir.join("split.json"), &split)?;
    let history_path = dir.join("history.csv");
    let write_history = |h: &etank_estimator::TrainingHistory| -> Result<(), PipelineError> {
        let f = fs::File::create(&history_path).map_err(io("creating history.csv"))?;
        h.write_csv(BufWriter::new(f)).map_err(io("writing history.csv"))
    };
    match train(&ds, &train_config(cfg)) {
        Ok(est) => {
            write_history(&est.history)?;
            checkpoint::save(&est, dir.join("checkpoint.json"))?;
            Ok(est)
        }
        Err(TrainError::Diverged { history, epoch, val_pct, initial_pct, .. }) => {
            write_history(&history)?;
            Err(PipelineError::Divergence(format!(
                "epoch {epoch}: validation MAPE {val_pct:.2}% against initial {initial_pct:.2}%"
            )))
        }
        Err(e) => Err(PipelineError::Model(e.to_string())),
    }
}

pub fn load_estimator(out: &Path) -> Result<PowerEstimator, PipelineError> {
    Ok(checkpoint::load(model_dir(out).join("checkpoint.json"))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub config_hash: String,
    pub samples: usize,
    pub epsilon: f64,
    /// `ε + ∫P dt` of the prediction, J.
    pub scheduled_energy_j: f64,
    pub expert_energy_j: f64,
}

/// Predicts power and the energy schedule of the configured skill.
pub fn cmd_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<EstimateReport, PipelineError> {
    let est = load_estimator(out)?;
    let surface = cfg.surface_or_default(&cfg.estimate.surface);
    let g = etank_core::generate_pattern(&surface, &cfg.estimate.skill)
        .map_err(|e| PipelineError::Config(ConfigError::Invalid(format!("estimate skill: {e}"))))?;
    let dir = out.join("estimate");
    create_dir(&dir)?;
    save_skill(&g.skill, dir.join("skill.csv")).map_err(|e| PipelineError::Data(e.to_string()))?;
    let power = est.predict_power(&g.skill)?;
    write_power(&dir.join("power.csv"), &power)?;
    let schedule = power.integrate_energy(cfg.tank.epsilon);
    let mut csv = String::from("t,energy_J\n");
    for (k, e) in schedule.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", k as f64 * power.dt, e));
    }
    write_file(&dir.join("energy.csv"), csv.as_bytes())?;
    let report = EstimateReport {
        config_hash: cfg.hash(),
        samples: power.len(),
        epsilon: cfg.tank.epsilon,
        scheduled_energy_j: schedule.last().copied().unwrap_or(cfg.tank.epsilon),
        expert_energy_j: expert_power(&g.skill, surface.mu).trapezoid(),
    };
    write_json(&dir.join("estimate_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub config_hash: String,
    pub grid: GridSpec,
    pub valid_nodes: usize,
    pub energy_j: MeanStd,
    pub min_j: f64,
    pub max_j: f64,
}

pub fn cmd_heatmap(cfg: &ExperimentConfig, out: &Path) -> Result<HeatmapReport, PipelineError> {
    let est = load_estimator(out)?;
    let surface = cfg.surface_or_default(&cfg.heatmap.surface);
    let grid = build_heatmap(&est, &surface, &cfg.heatmap.template, &cfg.heatmap.grid, cfg.tank.epsilon)?;
    let dir = out.join("heatmap");
    create_dir(&dir)?;
    let mut buf = Vec::new();
    grid.write_csv(&mut buf).map_err(io("writing heat map"))?;
    write_file(&dir.join("heatmap.csv"), &buf)?;
    let e = grid.valid_energies();
    let report = HeatmapReport {
        config_hash: cfg.hash(),
        grid: grid.spec.clone(),
        valid_nodes: e.len(),
        energy_j: MeanStd::of(&e),
        min_j: e.iter().cloned().fold(f64::INFINITY, f64::min),
        max_j: e.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    write_json(&dir.join("heatmap_report.json"), &report)?;
    Ok(report)
}

/// Model and expert-baseline metrics on one set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEval {
    pub surface: String,
    pub model: MetricsReport,
    pub expert: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// Held-out split of the training surface.
    pub in_domain: SurfaceEval,
    pub transfer: Vec<SurfaceEval>,
}

/// Scores the estimator and the expert baseline on named ground-truth runs,
/// writing `t,pred_W,true_W,expert_W` traces into `traces`.
pub fn evaluate_set(
    est: &PowerEstimator,
    name: &str,
    mu: f64,
    runs: &[(String, SkillProfile, PowerTrace)],
    traces: Option<&Path>,
) -> Result<SurfaceEval, PipelineError> {
    let mut model = Vec::with_capacity(runs.len());
    let mut expert = Vec::with_capacity(runs.len());
    for (id, skill, truth) in runs {
        let pred = est.predict_power(skill)?;
        let base = expert_power(skill, mu);
        let m = metrics(&pred, truth).map_err(|e| PipelineError::Data(e.to_string()))?;
        let b = metrics(&base, truth).map_err(|e| PipelineError::Data(e.to_string()))?;
        if let Some(dir) = traces {
            let mut csv = String::from("t,pred_W,true_W,expert_W\n");
            for k in 0..truth.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    k as f64 * truth.dt,
                    pred.power[k],
                    truth.power[k],
                    base.power[k]
                ));
            }
            write_file(&dir.join(format!("{name}_{id}.csv")), csv.as_bytes())?;
        }
        model.push(NamedMetrics {
            name: id.clone(),
            metrics: m,
        });
        expert.push(NamedMetrics {
            name: id.clone(),
            metrics: b,
        });
    }
    Ok(SurfaceEval {
        surface: name.to_string(),
        model: MetricsReport::aggregate(model),
        expert: MetricsReport::aggregate(expert),
    })
}

/// Ground-truth runs of freshly drawn skills on `surface`.
pub fn transfer_runs(
    cfg: &ExperimentConfig,
    name: &str,
    surface: &SurfaceModel,
) -> Result<Vec<(String, SkillProfile, PowerTrace)>, PipelineError> {
    let world = World::new(surface.clone());
    let planned = generate_skill_set(surface, &cfg.eval.skills, cfg.derived_seed(&format!("transfer/{name}")));
    planned
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let sim = SimConfig {
                seed: p.sim_seed,
                ..cfg.sim.clone()
            };
            let power = ground_truth_power(&world, &cfg.gains, &p.skill, cfg.tank.collect_budget, cfg.tank.epsilon, &sim)
                .map_err(|e| PipelineError::Simulation(format!("{name} skill {i}: {e}")))?;
            Ok((format!("{i:03}"), p.skill, power))
        })
        .collect()
}

/// Held-out accuracy on the training surface and zero-shot transfer.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport, PipelineError> {
    let est = load_estimator(out)?;
    let split: SplitRecord = read_json(&model_dir(out).join("split.json"))?;
    let data = load_dataset(out)?;
    let dir = out.join("eval");
    let traces = dir.join("traces");
    create_dir(&traces)?;
    let test: Vec<(String, SkillProfile, PowerTrace)> = data
        .into_iter()
        .filter(|(i, _, _)| split.test.contains(i))
        .map(|(i, s, p)| (format!("{i:03}"), s, p))
        .collect();
    let in_domain = evaluate_set(&est, "training_surface", cfg.training_surface().mu, &test, Some(&traces))?;
    let mut transfer = Vec::with_capacity(cfg.eval.transfer.len());
    for t in &cfg.eval.transfer {
        let surface = SurfaceModel::from_spec(&t.surface).expect("validated");
        let runs = transfer_runs(cfg, &t.name, &surface)?;
        transfer.push(evaluate_set(&est, &t.name, surface.mu, &runs, Some(&traces))?);
    }
    let report = EvalReport {
        config_hash: cfg.hash(),
        in_domain,
        transfer,
    };
    write_json(&dir.join("eval_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySummary {
    pub config_hash: String,
    /// Predicted energy of the plan without the residual ε, J.
    pub planned_energy_j: f64,
    pub reports: Vec<SafetyReport>,
}

/// Contact-loss runs in all three tank modes, scheduled from the estimator.
pub fn cmd_safety(cfg: &ExperimentConfig, out: &Path) -> Result<SafetySummary, PipelineError> {
    let est = load_estimator(out)?;
    let sc = etank_core::SimConfig {
        seed: cfg.derived_seed("safety"),
        ..cfg.safety.sim.clone()
    };
    let safety = crate::safety::SafetyConfig { sim: sc, ..cfg.safety.clone() };
    let skill = safety.plan().map_err(|e| PipelineError::Config(ConfigError::Invalid(e.to_string())))?;
    let schedule = est.predict_power(&skill)?;
    let runs = run_safety_experiment(&safety, &skill, &schedule, &SafetyMode::ALL)
        .map_err(|e| PipelineError::Simulation(e.to_string()))?;
    let dir = out.join("safety");
    create_dir(&dir)?;
    write_power(&dir.join("schedule.csv"), &schedule)?;
    let mut reports = Vec::with_capacity(runs.len());
    for (rep, trace) in runs {
        let name = serde_json::to_value(rep.mode).expect("mode serializes");
        let path = dir.join(format!("trace_{}.csv", name.as_str().unwrap_or("mode")));
        let f = fs::File::create(&path).map_err(io(format!("creating {}", path.display())))?;
        trace.write_csv(BufWriter::new(f)).map_err(io(format!("writing {}", path.display())))?;
        reports.push(rep);
    }
    let summary = SafetySummary {
        config_hash: cfg.hash(),
        planned_energy_j: schedule.trapezoid(),
        reports,
    };
    write_json(&dir.join("safety_report.json"), &summary)?;
    Ok(summary)
}
