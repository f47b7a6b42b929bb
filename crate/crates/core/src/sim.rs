//! Closed-loop simulation of a skill: contact, controller, tank and dynamics
//! stepped together at the control rate.

use std::io::Write;

use nalgebra::{Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    base_to_ee, control_wrench, force_wrench, impedance_wrench, ControlError, ControllerGains,
    EnergyTank, TankMode,
};
use crate::dynamics::{kinetic_energy, step_dynamics, CartesianBody, DynamicsError, RobotState, Wrench};
use crate::skills::{SkillProfile, SKILL_DT};
use crate::surface::{contact_wrench, ContactState, Rect, SurfaceError, SurfaceModel, SurfaceSpec};
use crate::trace::PowerTrace;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("skill has no samples")]
    EmptySkill,
}

/// Surface plus an optional flat floor underneath it.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub surface: SurfaceModel,
    pub floor: Option<SurfaceModel>,
}

impl World {
    pub fn new(surface: SurfaceModel) -> Self {
        Self {
            surface,
            floor: None,
        }
    }

    /// Adds a rigid floor `depth` metres below the surface reference height.
    pub fn with_floor(mut self, depth: f64) -> Self {
        let mut floor = SurfaceModel::planar()
            .with_offset(self.surface.height_offset - depth)
            .with_workspace(Rect::new(-1e3, 1e3, -1e3, 1e3));
        floor.mu = self.surface.mu;
        floor.k_n = self.surface.k_n;
        floor.b_n = self.surface.b_n;
        floor.v_reg = self.surface.v_reg;
        self.floor = Some(floor);
        self
    }

    pub fn from_spec(spec: &SurfaceSpec) -> Result<Self, SurfaceError> {
        let world = Self::new(SurfaceModel::from_spec(spec)?);
        Ok(match spec.floor_depth {
            Some(d) if d > 0.0 => world.with_floor(d),
            Some(d) => {
                return Err(SurfaceError::InvalidParameter(format!(
                    "floor depth {d} must be positive"
                )))
            }
            None => world,
        })
    }

    /// Surface and floor contacts at `state`.
    pub fn contacts(&self, state: &RobotState) -> (ContactState, Option<ContactState>) {
        let s = contact_wrench(&self.surface, state);
        let f = self.floor.as_ref().map(|fl| contact_wrench(fl, state));
        (s, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Integration steps per skill sample; the control step is `1 ms / substeps`.
    pub substeps: usize,
    /// Standard deviation of the force-measurement noise, N.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Start pressed into the surface at the static equilibrium for `f_d`
    /// instead of at the first desired pose.
    pub settle_start: bool,
    /// Force the valve closed from this time on, s.
    pub valve_closed_from: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            substeps: 1,
            noise_sigma: 0.1,
            seed: 0,
            settle_start: true,
            valve_closed_from: None,
        }
    }
}

/// One logged control step. Forces and the valve are those applied during
/// the step; tank fields are after the tank update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vector6<f64>,
    pub x_dot: Vector6<f64>,
    pub f_robot: Wrench,
    /// Total wrench from the environment (surface and floor), base frame.
    pub f_ext: Wrench,
    /// Ungated controller wrench `f_i + f_f`, base frame.
    pub f_cntr: Wrench,
    pub e_robot: f64,
    pub e_tank: f64,
    pub sigma: bool,
    pub injected_j: f64,
    pub consumed_w: f64,
    pub clamp_j: f64,
    pub surface_contact: bool,
    pub floor_contact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The skill ran to its last sample.
    Completed,
    /// The scheduled tank ran out of plan; the skill over-ran its energy budget.
    ScheduleExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub dt: f64,
    pub e_tank0: f64,
    pub epsilon: f64,
    pub epsilon_on: f64,
    pub tank_mode: TankMode,
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
}

pub const TRACE_HEADER: &str = "t,x0,x1,x2,x3,x4,x5,xdot0,xdot1,xdot2,xdot3,xdot4,xdot5,\
f_robot0,f_robot1,f_robot2,f_robot3,f_robot4,f_robot5,\
f_ext0,f_ext1,f_ext2,f_ext3,f_ext4,f_ext5,E_robot,E_tank,sigma,injected_J,consumed_W";

impl SimTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Power drained from the tank per step, `ẋᵀ σ f_cntr`.
    pub fn consumed_power(&self) -> PowerTrace {
        PowerTrace::new(self.dt, self.rows.iter().map(|r| r.consumed_w).collect())
    }

    /// `ẋᵀ f_cntr` regardless of the valve.
    pub fn controller_power(&self) -> PowerTrace {
        PowerTrace::new(
            self.dt,
            self.rows.iter().map(|r| r.x_dot.dot(&r.f_cntr)).collect(),
        )
    }

    /// `E_tank(0) + Σ injections − Σ ẋᵀ f_cntr dt + Σ clamps − E_tank(end)`.
    pub fn bookkeeping_residual(&self) -> f64 {
        let mut acc = self.e_tank0;
        for r in &self.rows {
            acc += r.injected_j - r.consumed_w * self.dt + r.clamp_j;
        }
        acc - self.rows.last().map_or(self.e_tank0, |r| r.e_tank)
    }

    pub fn clamp_events(&self) -> usize {
        self.rows.iter().filter(|r| r.clamp_j != 0.0).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        let mut line = String::new();
        for r in &self.rows {
            line.clear();
            line.push_str(&r.t.to_string());
            for v in r
                .x
                .iter()
                .chain(r.x_dot.iter())
                .chain(r.f_robot.iter())
                .chain(r.f_ext.iter())
            {
                line.push(',');
                line.push_str(&v.to_string());
            }
            for v in [r.e_robot, r.e_tank, f64::from(u8::from(r.sigma)), r.injected_j, r.consumed_w] {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Power-balance residuals `ΔE_robot/dt − ẋᵀ(σ f_cntr + f_ext − D ẋ)` per step.
pub fn power_balance_residuals(trace: &SimTrace, body: &CartesianBody) -> Vec<f64> {
    trace
        .rows
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let gated = if a.sigma { a.f_cntr } else { Wrench::zeros() };
            let dissipation = body.damping() * a.x_dot;
            (b.e_robot - a.e_robot) / trace.dt - a.x_dot.dot(&(gated + a.f_ext - dissipation))
        })
        .collect()
}

/// Static contact equilibrium for the first sample: pressed into the surface
/// along the normal so that the stiffness alone carries `|f_d|`.
fn settled_pose(world: &World, skill: &SkillProfile) -> Vector6<f64> {
    let x_d = skill.samples[0].x_d;
    let n = world
        .surface
        .jet(x_d[0], x_d[1])
        .normal();
    let depth = skill.f_d.fixed_rows::<3>(0).norm() / world.surface.k_n;
    let p = Vector3::new(x_d[0], x_d[1], x_d[2]) - n * depth;
    Vector6::new(p.x, p.y, p.z, x_d[3], x_d[4], x_d[5])
}

/// Force integral that makes `state` a static equilibrium of the closed loop.
fn settled_integral(
    world: &World,
    state: &RobotState,
    x_d: &Vector6<f64>,
    f_d: &Wrench,
    gains: &ControllerGains,
) -> Vector6<f64> {
    let (s, f) = world.contacts(state);
    let f_ext = s.f_ext + f.map_or(Wrench::zeros(), |c| c.f_ext);
    let rot = state.rotation();
    let f_i = impedance_wrench(state, x_d, gains);
    let applied = base_to_ee(&rot, &(-f_ext));
    let err = f_d - applied;
    // Needed end-effector force wrench: R⁻¹(−f_ext − f_i).
    let needed = base_to_ee(&rot, &(-f_ext - f_i));
    let mut integral = Vector6::zeros();
    for i in 0..6 {
        let ki = gains.force_i[i];
        if ki > 0.0 {
            let bound = gains.integral_limit / ki;
            integral[i] = ((needed[i] - f_d[i] - gains.force_p[i] * err[i]) / ki).clamp(-bound, bound);
        }
    }
    integral
}

/// Runs `skill` in closed loop with `tank`.
///
/// One row is logged per control step, `skill.len() · substeps` rows in total.
/// A scheduled tank whose plan runs out stops the run early with
/// [`StopReason::ScheduleExhausted`].
pub fn simulate(
    world: &World,
    body: &CartesianBody,
    gains: &ControllerGains,
    skill: &SkillProfile,
    mut tank: EnergyTank,
    cfg: &SimConfig,
) -> Result<SimTrace, SimError> {
    if skill.is_empty() {
        return Err(SimError::EmptySkill);
    }
    if cfg.substeps == 0 {
        return Err(SimError::Config("substeps must be at least 1".into()));
    }
    if cfg.substeps > 1 && tank.mode() == TankMode::Scheduled {
        return Err(SimError::Config(
            "scheduled tanks run at the skill rate; substeps must be 1".into(),
        ));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(SimError::Config(format!("noise sigma {} must be non-negative", cfg.noise_sigma)));
    }
    gains.validate()?;
    let dt = SKILL_DT / cfg.substeps as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| SimError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let x_d0 = skill.samples[0].x_d;
    let mut state = if cfg.settle_start {
        RobotState::at_rest(settled_pose(world, skill))
    } else {
        RobotState::at_rest(x_d0)
    };
    let mut integral = if cfg.settle_start {
        settled_integral(world, &state, &x_d0, &skill.f_d, gains)
    } else {
        Vector6::zeros()
    };

    let n_steps = skill.len() * cfg.substeps;
    let mut rows = Vec::with_capacity(n_steps);
    let e_tank0 = tank.energy();
    let mut stop = StopReason::Completed;
    for k in 0..n_steps {
        let (i, frac) = (k / cfg.substeps, (k % cfg.substeps) as f64 / cfg.substeps as f64);
        let x_d = match skill.samples.get(i + 1) {
            Some(next) if frac > 0.0 => skill.samples[i].x_d * (1.0 - frac) + next.x_d * frac,
            _ => skill.samples[i].x_d,
        };
        let t = k as f64 * dt;

        let (sc, fc) = world.contacts(&state);
        let f_ext = sc.f_ext + fc.map_or(Wrench::zeros(), |c| c.f_ext);
        let rot = state.rotation();
        let mut measured = base_to_ee(&rot, &(-f_ext));
        if cfg.noise_sigma > 0.0 {
            for j in 0..3 {
                measured[j] += noise.sample(&mut rng);
            }
        }
        let f_i = impedance_wrench(&state, &x_d, gains);
        let (f_f, next_integral) = force_wrench(&measured, &skill.f_d, &integral, &rot, gains, dt);
        integral = next_integral;
        let f_cntr = f_i + f_f;

        let forced_closed = cfg.valve_closed_from.is_some_and(|t0| t >= t0);
        let sigma = tank.sigma() && !forced_closed;
        let f_robot = control_wrench(&f_i, &f_f, sigma, body.gravity());
        let applied = if sigma { f_cntr } else { Wrench::zeros() };
        let rec = match tank.step(&state.twist, &applied, dt) {
            Ok(rec) => rec,
            Err(ControlError::ScheduleExhausted { step, len }) => {
                log::warn!("energy schedule exhausted at step {step} of {len}; stopping");
                stop = StopReason::ScheduleExhausted;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        rows.push(TraceRow {
            t,
            x: state.pose,
            x_dot: state.twist,
            f_robot,
            f_ext,
            f_cntr,
            e_robot: kinetic_energy(body, &state),
            e_tank: rec.energy,
            sigma,
            injected_j: rec.injected_j,
            consumed_w: rec.consumed_w,
            clamp_j: rec.clamp_j,
            surface_contact: sc.in_contact,
            floor_contact: fc.is_some_and(|c| c.in_contact),
        });
        state = step_dynamics(body, &state, &f_robot, &f_ext, dt)?;
    }
    Ok(SimTrace {
        dt,
        e_tank0,
        epsilon: tank.epsilon(),
        epsilon_on: tank.epsilon_on(),
        tank_mode: tank.mode(),
        rows,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skills::{generate_pattern, Pattern, PatternSpec};

    fn line(surface: &SurfaceModel, length: f64) -> SkillProfile {
        let spec = PatternSpec {
            start_uv: (-0.2, 0.0),
            length,
            ..PatternSpec::default()
        };
        generate_pattern(surface, &spec).unwrap().skill
    }

    #[test]
    fn settled_start_is_static() {
        let world = World::new(SurfaceModel::planar());
        let body = CartesianBody::default();
        let mut skill = line(&world.surface, 0.05);
        let x0 = skill.samples[0].x_d;
        for s in &mut skill.samples {
            s.x_d = x0;
            s.x_dot_d = Vector6::zeros();
        }
        let cfg = SimConfig {
            noise_sigma: 0.0,
            ..SimConfig::default()
        };
        let tank = EnergyTank::scalar(200.0, 0.1).unwrap();
        let tr = simulate(&world, &body, &ControllerGains::default(), &skill, tank, &cfg).unwrap();
        for r in &tr.rows {
            assert!(r.x_dot.norm() < 1e-9, "moved at t = {}", r.t);
            assert!((r.f_ext[2] - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn row_count_and_stop() {
        let world = World::new(SurfaceModel::planar());
        let skill = line(&world.surface, 0.01);
        let body = CartesianBody::default();
        let tank = EnergyTank::scalar(200.0, 0.1).unwrap();
        let cfg = SimConfig {
            substeps: 2,
            ..SimConfig::default()
        };
        let tr = simulate(&world, &body, &ControllerGains::default(), &skill, tank, &cfg).unwrap();
        assert_eq!(tr.len(), skill.len() * 2);
        assert_eq!(tr.stop, StopReason::Completed);

        let short = PowerTrace::new(SKILL_DT, vec![1.0; 10]);
        let tank = EnergyTank::scheduled(&short, 0.2, 0.1).unwrap();
        let tr = simulate(&world, &body, &ControllerGains::default(), &skill, tank, &SimConfig::default()).unwrap();
        assert_eq!(tr.len(), 10);
        assert_eq!(tr.stop, StopReason::ScheduleExhausted);
    }

    #[test]
    fn floor_catches_a_falling_tool() {
        let gap = Rect::new(-1.0, 1.0, -1.0, 1.0);
        let world = World::new(SurfaceModel::planar().with_gap(gap)).with_floor(0.02);
        // The force integral needs a few seconds to push 2 cm below the surface.
        let skill = line(&world.surface, 0.3);
        let tank = EnergyTank::scalar(200.0, 0.1).unwrap();
        let tr = simulate(
            &world,
            &CartesianBody::default(),
            &ControllerGains::default(),
            &skill,
            tank,
            &SimConfig::default(),
        )
        .unwrap();
        assert!(tr.rows.iter().all(|r| !r.surface_contact));
        assert!(tr.rows.iter().any(|r| r.floor_contact));
        assert!(tr.rows.iter().all(|r| r.x[2] > -0.03));
    }

    #[test]
    fn same_seed_same_trace() {
        let world = World::new(SurfaceModel::curved(0.02, 10.0));
        let skill = generate_pattern(
            &world.surface,
            &PatternSpec {
                pattern: Pattern::Spiral,
                length: 0.1,
                ..PatternSpec::default()
            },
        )
        .unwrap()
        .skill;
        let run = || {
            let tank = EnergyTank::scalar(200.0, 0.1).unwrap();
            simulate(
                &world,
                &CartesianBody::default(),
                &ControllerGains::default(),
                &skill,
                tank,
                &SimConfig::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let world = World::new(SurfaceModel::planar());
        let skill = line(&world.surface, 0.005);
        let tank = EnergyTank::scalar(1.0, 0.1).unwrap();
        let tr = simulate(
            &world,
            &CartesianBody::default(),
            &ControllerGains::default(),
            &skill,
            tank,
            &SimConfig::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        assert_eq!(lines.clone().count(), tr.len());
        assert_eq!(lines.next().unwrap().split(',').count(), 30);
    }
}
