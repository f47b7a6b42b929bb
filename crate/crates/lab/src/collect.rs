//! Seeded skill generation and ground-truth power collection.

use etank_core::skills::Pattern;
use etank_core::{
    generate_pattern, simulate, CartesianBody, ControllerGains, EnergyTank, PatternSpec, PowerTrace,
    SimConfig, SimError, SkillProfile, SurfaceModel, World,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How a batch of skills is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillSetSpec {
    pub count: usize,
    pub patterns: Vec<Pattern>,
    /// Start positions are drawn uniformly from this `(u, v)` box.
    pub start_u: (f64, f64),
    pub start_v: (f64, f64),
    /// Tangential speed range, m/s; equal bounds fix the speed.
    pub speed: (f64, f64),
    pub length: f64,
    /// Desired normal force range, N (pressing magnitude).
    pub force: (f64, f64),
}

impl Default for SkillSetSpec {
    fn default() -> Self {
        Self {
            count: 80,
            patterns: Pattern::ALL.to_vec(),
            start_u: (-0.3, 0.3),
            start_v: (-0.3, 0.3),
            speed: (0.05, 0.05),
            length: 0.25,
            force: (5.0, 5.0),
        }
    }
}

/// Tries per requested skill before giving up on paths that leave the workspace.
const MAX_ATTEMPTS: usize = 50;

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a.min(b)..a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSkill {
    pub spec: PatternSpec,
    pub skill: SkillProfile,
    /// Seed of the force-sensor noise for the ground-truth run.
    pub sim_seed: u64,
}

/// Draws `spec.count` complete skills. Candidates whose path leaves the
/// workspace are redrawn; fewer skills are returned only if redraws run out.
pub fn generate_skill_set(surface: &SurfaceModel, spec: &SkillSetSpec, seed: u64) -> Vec<PlannedSkill> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.count);
    if spec.patterns.is_empty() {
        return out;
    }
    let mut attempts = 0;
    while out.len() < spec.count && attempts < spec.count * MAX_ATTEMPTS {
        attempts += 1;
        let pattern = spec.patterns[out.len() % spec.patterns.len()];
        let p = PatternSpec {
            pattern,
            start_uv: (uniform(&mut rng, spec.start_u), uniform(&mut rng, spec.start_v)),
            heading: rng.random_range(0.0..std::f64::consts::TAU),
            speed: uniform(&mut rng, spec.speed),
            length: spec.length,
            f_d: [0.0, 0.0, -uniform(&mut rng, spec.force), 0.0, 0.0, 0.0],
            seed: rng.random(),
            ..PatternSpec::default()
        };
        let sim_seed = rng.random();
        match generate_pattern(surface, &p) {
            Ok(g) if !g.truncated => out.push(PlannedSkill {
                spec: p,
                skill: g.skill,
                sim_seed,
            }),
            _ => {}
        }
    }
    if out.len() < spec.count {
        log::warn!("only {} of {} skills fit inside the workspace", out.len(), spec.count);
    }
    out
}

/// Tank power of a closed-loop run with an effectively unlimited scalar tank.
pub fn ground_truth_power(
    world: &World,
    gains: &ControllerGains,
    skill: &SkillProfile,
    budget: f64,
    epsilon: f64,
    sim: &SimConfig,
) -> Result<PowerTrace, SimError> {
    let tank = EnergyTank::scalar(budget, epsilon)?;
    let trace = simulate(world, &CartesianBody::default(), gains, skill, tank, sim)?;
    Ok(trace.consumed_power())
}
