//! Contact-loss experiment: the planned path runs over a gap in the board.

use etank_core::surface::Rect;
use etank_core::{
    generate_pattern, simulate, CartesianBody, ControllerGains, EnergyTank, PatternSpec, PowerTrace,
    SimConfig, SimError, SimTrace, SkillProfile, SurfaceModel, World,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("safety setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMode {
    ScalarLow,
    ScalarHigh,
    Scheduled,
}

impl SafetyMode {
    pub const ALL: [SafetyMode; 3] = [SafetyMode::ScalarLow, SafetyMode::ScalarHigh, SafetyMode::Scheduled];
}

/// Gains of the contact-loss runs: the defaults with no stiffness along the
/// surface normal, so that the normal axis is purely force controlled.
pub fn safety_gains() -> ControllerGains {
    let mut g = ControllerGains::default();
    g.stiffness[2] = 0.0;
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Gap in the planar board, `(u_min, u_max, v_min, v_max)`.
    pub gap: (f64, f64, f64, f64),
    /// Floor below the board, m.
    pub floor_depth: f64,
    pub mu: f64,
    pub skill: PatternSpec,
    pub gains: ControllerGains,
    pub epsilon: f64,
    pub low_budget: f64,
    pub high_budget: f64,
    /// Energy in the scheduled tank before the first injection, J.
    pub scheduled_initial: f64,
    pub sim: SimConfig,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            gap: (-0.15, 0.5, -0.5, 0.5),
            floor_depth: 0.12,
            mu: 0.4,
            skill: PatternSpec {
                start_uv: (-0.25, 0.0),
                heading: 0.0,
                speed: 0.05,
                length: 0.25,
                ..PatternSpec::default()
            },
            gains: safety_gains(),
            epsilon: 0.1,
            low_budget: 0.03,
            high_budget: 200.0,
            scheduled_initial: 0.2,
            sim: SimConfig::default(),
        }
    }
}

impl SafetyConfig {
    fn gap_rect(&self) -> Rect {
        Rect::new(self.gap.0, self.gap.1, self.gap.2, self.gap.3)
    }

    /// The board as planned: no gap.
    pub fn intact_surface(&self) -> SurfaceModel {
        SurfaceModel::planar().with_mu(self.mu)
    }

    pub fn world(&self) -> World {
        World::new(self.intact_surface().with_gap(self.gap_rect())).with_floor(self.floor_depth)
    }

    /// The planned skill, generated on the intact board.
    pub fn plan(&self) -> Result<SkillProfile, SafetyError> {
        let g = generate_pattern(&self.intact_surface(), &self.skill)
            .map_err(|e| SafetyError::Setup(e.to_string()))?;
        if g.truncated {
            return Err(SafetyError::Setup("safety skill leaves the workspace".into()));
        }
        if !g.skill.samples.iter().any(|s| self.gap_rect().contains(s.x_d[0], s.x_d[1])) {
            return Err(SafetyError::Setup("the planned path never crosses the gap".into()));
        }
        Ok(g.skill)
    }

    pub fn tank(&self, mode: SafetyMode, schedule: &PowerTrace) -> Result<EnergyTank, SimError> {
        Ok(match mode {
            SafetyMode::ScalarLow => EnergyTank::scalar(self.low_budget, self.epsilon)?,
            SafetyMode::ScalarHigh => EnergyTank::scalar(self.high_budget, self.epsilon)?,
            SafetyMode::Scheduled => EnergyTank::scheduled(schedule, self.scheduled_initial, self.epsilon)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub mode: SafetyMode,
    /// Drop along the board normal below the loss point, from the loss until
    /// the controller wrench is cut or the floor is struck, cm.
    pub falling_distance_cm: f64,
    /// Largest drop below the loss point over the rest of the run, cm.
    pub max_drop_cm: f64,
    /// Largest contact force magnitude after the loss, N.
    pub peak_contact_force_n: f64,
    pub hit_floor: bool,
    /// Time the end-effector entered the gap, s; `None` if it never did.
    pub loss_time_s: Option<f64>,
    /// First valve closure after the loss, s.
    pub valve_closed_s: Option<f64>,
    pub floor_strike_s: Option<f64>,
    pub duration_s: f64,
}

/// Scores one run. The loss point is the first logged pose inside the gap.
pub fn assess(cfg: &SafetyConfig, mode: SafetyMode, trace: &SimTrace) -> SafetyReport {
    let gap = cfg.gap_rect();
    let rows = &trace.rows;
    let loss = rows.iter().position(|r| gap.contains(r.x[0], r.x[1]));
    let duration_s = rows.last().map_or(0.0, |r| r.t);
    let Some(k0) = loss else {
        return SafetyReport {
            mode,
            falling_distance_cm: 0.0,
            max_drop_cm: 0.0,
            peak_contact_force_n: 0.0,
            hit_floor: false,
            loss_time_s: None,
            valve_closed_s: None,
            floor_strike_s: None,
            duration_s,
        };
    };
    let z0 = rows[k0].x[2];
    let after = &rows[k0..];
    let closed = after.iter().position(|r| !r.sigma);
    let strike = after.iter().position(|r| r.floor_contact);
    let end = match (closed, strike) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => after.len() - 1,
    };
    let drop = |rs: &[etank_core::sim::TraceRow]| rs.iter().map(|r| z0 - r.x[2]).fold(0.0, f64::max);
    let peak = after
        .iter()
        .map(|r| r.f_ext.fixed_rows::<3>(0).norm())
        .fold(0.0, f64::max);
    SafetyReport {
        mode,
        falling_distance_cm: 100.0 * drop(&after[..=end]),
        max_drop_cm: 100.0 * drop(after),
        peak_contact_force_n: peak,
        hit_floor: strike.is_some(),
        loss_time_s: Some(rows[k0].t),
        valve_closed_s: closed.map(|k| after[k].t),
        floor_strike_s: strike.map(|k| after[k].t),
        duration_s,
    }
}

/// Runs the planned skill once per mode on the gapped board. `schedule`
/// feeds the scheduled tank and must be aligned with the plan.
pub fn run_safety_experiment(
    cfg: &SafetyConfig,
    skill: &SkillProfile,
    schedule: &PowerTrace,
    modes: &[SafetyMode],
) -> Result<Vec<(SafetyReport, SimTrace)>, SafetyError> {
    if schedule.len() != skill.len() {
        return Err(SafetyError::Setup(format!(
            "schedule has {} samples, skill has {}",
            schedule.len(),
            skill.len()
        )));
    }
    let world = cfg.world();
    let body = CartesianBody::default();
    modes
        .iter()
        .map(|&mode| {
            let trace = simulate(&world, &body, &cfg.gains, skill, cfg.tank(mode, schedule)?, &cfg.sim)?;
            Ok((assess(cfg, mode, &trace), trace))
        })
        .collect()
}

/// Power of the plan executed on the intact board with the same gains and
/// seed, the best schedule a perfect estimator could produce.
pub fn oracle_schedule(cfg: &SafetyConfig, skill: &SkillProfile) -> Result<PowerTrace, SafetyError> {
    let world = World::new(cfg.intact_surface()).with_floor(cfg.floor_depth);
    let tank = EnergyTank::scalar(cfg.high_budget, cfg.epsilon).map_err(SimError::from)?;
    let trace = simulate(&world, &CartesianBody::default(), &cfg.gains, skill, tank, &cfg.sim)?;
    Ok(trace.consumed_power())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reports(cfg: &SafetyConfig) -> Vec<SafetyReport> {
        let skill = cfg.plan().unwrap();
        let sched = oracle_schedule(cfg, &skill).unwrap();
        run_safety_experiment(cfg, &skill, &sched, &SafetyMode::ALL)
            .unwrap()
            .into_iter()
            .map(|(r, _)| r)
            .collect()
    }

    #[test]
    fn oracle_schedule_orders_the_modes() {
        let cfg = SafetyConfig::default();
        let r = reports(&cfg);
        let (low, high, sched) = (&r[0], &r[1], &r[2]);
        // Empty tank: the tool never moves far enough to reach the gap.
        assert_eq!(low.loss_time_s, None);
        assert!(high.hit_floor && !sched.hit_floor, "{high:?} {sched:?}");
        assert!(sched.falling_distance_cm < high.falling_distance_cm);
        assert!(sched.peak_contact_force_n < high.peak_contact_force_n);
        assert!(high.peak_contact_force_n > 0.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = SafetyConfig::default();
        assert_eq!(reports(&cfg), reports(&cfg));
    }

    #[test]
    fn valve_closes_when_plan_stops_after_loss() {
        let cfg = SafetyConfig::default();
        let skill = cfg.plan().unwrap();
        let mut sched = oracle_schedule(&cfg, &skill).unwrap();
        // Loss of the intact plan happens at u = −0.15, 2 s in; plan nothing after.
        let k_loss = 2000;
        sched.power[k_loss..].iter_mut().for_each(|p| *p = 0.0);
        let (rep, trace) = run_safety_experiment(&cfg, &skill, &sched, &[SafetyMode::Scheduled])
            .unwrap()
            .remove(0);
        assert!(!rep.hit_floor);
        // The row where the tank first drains below ε is still driven; the
        // valve is shut from the next step on.
        let k = trace.rows.iter().position(|r| r.t > 2.0 && r.e_tank < trace.epsilon).unwrap();
        assert!(!trace.rows[k + 1].sigma);
    }

    #[test]
    fn path_must_cross_gap() {
        let cfg = SafetyConfig {
            gap: (0.3, 0.5, -0.5, 0.5),
            ..SafetyConfig::default()
        };
        assert!(matches!(cfg.plan(), Err(SafetyError::Setup(_))));
    }
}
