//! Unified force-impedance control gated by a virtual energy tank.

use nalgebra::{Rotation3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{RobotState, Wrench};
use crate::trace::PowerTrace;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("energy schedule exhausted at step {step} (schedule has {len} steps)")]
    ScheduleExhausted { step: usize, len: usize },
    #[error("invalid tank configuration: {0}")]
    InvalidTank(String),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("empty trace")]
    EmptyTrace,
}

/// Diagonal controller gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    /// Cartesian stiffness diagonal (N/m, N·m/rad).
    pub stiffness: [f64; 6],
    /// Cartesian damping diagonal (N·s/m, N·m·s/rad).
    pub damping: [f64; 6],
    /// Proportional force gain diagonal.
    pub force_p: [f64; 6],
    /// Integral force gain diagonal, 1/s.
    pub force_i: [f64; 6],
    /// Bound on each component of the integral action `K_i ∫f̃`, N.
    pub integral_limit: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            stiffness: [1000.0, 1000.0, 1000.0, 50.0, 50.0, 50.0],
            damping: [80.0, 80.0, 80.0, 3.0, 3.0, 3.0],
            force_p: [0.5; 6],
            force_i: [1.0; 6],
            integral_limit: 20.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        let all = self
            .stiffness
            .iter()
            .chain(&self.damping)
            .chain(&self.force_p)
            .chain(&self.force_i);
        for &g in all {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(ControlError::InvalidGains(format!(
                    "gain {g} is not a finite non-negative number"
                )));
            }
        }
        if !(self.integral_limit > 0.0 && self.integral_limit.is_finite()) {
            return Err(ControlError::InvalidGains(format!(
                "integral limit {} must be positive",
                self.integral_limit
            )));
        }
        Ok(())
    }

    fn diag(v: &[f64; 6]) -> Vector6<f64> {
        Vector6::from_column_slice(v)
    }
}

/// Compliance wrench `−K (x − x_d) − D ẋ`.
pub fn impedance_wrench(state: &RobotState, x_d: &Vector6<f64>, gains: &ControllerGains) -> Wrench {
    let err = state.pose - x_d;
    -ControllerGains::diag(&gains.stiffness).component_mul(&err)
        - ControllerGains::diag(&gains.damping).component_mul(&state.twist)
}

/// Rotates a wrench given in the end-effector frame into the base frame.
pub fn ee_to_base(rot: &Rotation3<f64>, w: &Wrench) -> Wrench {
    let f = rot * w.fixed_rows::<3>(0);
    let m = rot * w.fixed_rows::<3>(3);
    Vector6::new(f.x, f.y, f.z, m.x, m.y, m.z)
}

pub fn base_to_ee(rot: &Rotation3<f64>, w: &Wrench) -> Wrench {
    ee_to_base(&rot.inverse(), w)
}

/// Feed-forward plus PI force control.
///
/// `f_applied_ee` is the measured wrench the end-effector exerts on the
/// environment and `f_d_ee` the desired one, both in the end-effector frame.
/// The tracking error `f_d − f_applied` drives the PI term so that applying
/// too little force raises the commanded force. Returns the base-frame wrench
/// and the updated error integral.
pub fn force_wrench(
    f_applied_ee: &Wrench,
    f_d_ee: &Wrench,
    integral: &Vector6<f64>,
    rot_ee_to_base: &Rotation3<f64>,
    gains: &ControllerGains,
    dt: f64,
) -> (Wrench, Vector6<f64>) {
    let err = f_d_ee - f_applied_ee;
    let mut next = integral + err * dt;
    for i in 0..6 {
        let ki = gains.force_i[i];
        let bound = if ki > 0.0 {
            gains.integral_limit / ki
        } else {
            gains.integral_limit
        };
        next[i] = next[i].clamp(-bound, bound);
    }
    let ee = f_d_ee
        + ControllerGains::diag(&gains.force_p).component_mul(&err)
        + ControllerGains::diag(&gains.force_i).component_mul(&next);
    (ee_to_base(rot_ee_to_base, &ee), next)
}

/// Valve-gated robot wrench: `σ (f_i + f_f) + f_g`.
pub fn control_wrench(f_i: &Wrench, f_f: &Wrench, sigma: bool, f_g: &Wrench) -> Wrench {
    if sigma {
        f_i + f_f + f_g
    } else {
        *f_g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TankMode {
    ScalarInit,
    Scheduled,
}

/// How a schedule is turned into injected energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Predicted power of the current step times `dt`.
    #[default]
    Time,
    /// Planned energy released in proportion to the distance actually travelled.
    Arclength,
}

#[derive(Debug, Clone, PartialEq)]
struct Schedule {
    power: Vec<f64>,
    injection: Injection,
    /// Planned arclength at the end of each step (arclength injection only).
    planned_arclength: Vec<f64>,
    /// Planned cumulative injection at the end of each step.
    planned_energy: Vec<f64>,
}

/// Per-step tank bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TankRecord {
    pub injected_j: f64,
    pub consumed_w: f64,
    /// Energy added (+) or removed (−) by clamping to `[0, E_max]`.
    pub clamp_j: f64,
    pub energy: f64,
    pub sigma: bool,
}

/// Virtual energy tank with a hysteretic valve.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTank {
    energy: f64,
    epsilon: f64,
    epsilon_on: f64,
    e_max: f64,
    sigma: bool,
    mode: TankMode,
    schedule: Option<Schedule>,
    step: usize,
    travel: f64,
    injected: f64,
    clamp_events: usize,
}

impl EnergyTank {
    /// Tank filled once with `initial` joules.
    pub fn scalar(initial: f64, epsilon: f64) -> Result<Self, ControlError> {
        Self::build(initial, epsilon, 2.0 * epsilon, 2.0 * initial, TankMode::ScalarInit, None)
    }

    /// Tank that starts with `initial` joules and is fed from `schedule`.
    pub fn scheduled(
        schedule: &PowerTrace,
        initial: f64,
        epsilon: f64,
    ) -> Result<Self, ControlError> {
        Self::with_schedule(schedule, initial, epsilon, Injection::Time, &[])
    }

    /// Scheduled tank; `planned_arclength[k]` is the desired path length
    /// covered at the end of step `k`, required for arclength injection.
    pub fn with_schedule(
        schedule: &PowerTrace,
        initial: f64,
        epsilon: f64,
        injection: Injection,
        planned_arclength: &[f64],
    ) -> Result<Self, ControlError> {
        let n = schedule.power.len();
        if injection == Injection::Arclength && planned_arclength.len() != n {
            return Err(ControlError::InvalidTank(format!(
                "arclength injection needs {n} planned arclength samples, got {}",
                planned_arclength.len()
            )));
        }
        let mut planned_energy = Vec::with_capacity(n);
        let mut total = 0.0;
        for &p in &schedule.power {
            total += p.max(0.0) * schedule.dt;
            planned_energy.push(total);
        }
        let sched = Schedule {
            power: schedule.power.clone(),
            injection,
            planned_arclength: planned_arclength.to_vec(),
            planned_energy,
        };
        Self::build(
            initial,
            epsilon,
            2.0 * epsilon,
            2.0 * (initial + total),
            TankMode::Scheduled,
            Some(sched),
        )
    }

    fn build(
        initial: f64,
        epsilon: f64,
        epsilon_on: f64,
        e_max: f64,
        mode: TankMode,
        schedule: Option<Schedule>,
    ) -> Result<Self, ControlError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ControlError::InvalidTank(format!("epsilon {epsilon} must be positive")));
        }
        if !(initial >= 0.0 && initial.is_finite()) {
            return Err(ControlError::InvalidTank(format!(
                "initial energy {initial} must be non-negative"
            )));
        }
        Ok(Self {
            energy: initial,
            epsilon,
            epsilon_on,
            e_max: e_max.max(epsilon_on),
            sigma: initial >= epsilon,
            mode,
            schedule,
            step: 0,
            travel: 0.0,
            injected: 0.0,
            clamp_events: 0,
        })
    }

    /// Overrides the re-arm threshold (must not be below `epsilon`).
    pub fn with_epsilon_on(mut self, epsilon_on: f64) -> Result<Self, ControlError> {
        if epsilon_on < self.epsilon {
            return Err(ControlError::InvalidTank(format!(
                "epsilon_on {epsilon_on} below epsilon {}",
                self.epsilon
            )));
        }
        self.epsilon_on = epsilon_on;
        self.e_max = self.e_max.max(epsilon_on);
        Ok(self)
    }

    pub fn with_e_max(mut self, e_max: f64) -> Self {
        self.e_max = e_max;
        self
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn epsilon_on(&self) -> f64 {
        self.epsilon_on
    }
    pub fn e_max(&self) -> f64 {
        self.e_max
    }
    pub fn sigma(&self) -> bool {
        self.sigma
    }
    pub fn mode(&self) -> TankMode {
        self.mode
    }
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn clamp(&mut self, rec: &mut TankRecord) {
        let clamped = self.energy.clamp(0.0, self.e_max);
        if clamped != self.energy {
            rec.clamp_j += clamped - self.energy;
            self.clamp_events += 1;
            log::debug!(
                "tank clamp at step {}: {:.6} J -> {:.6} J",
                self.step,
                self.energy,
                clamped
            );
            self.energy = clamped;
        }
    }

    /// Advances the tank by one control step.
    ///
    /// `f_applied` is the controller wrench actually applied (zero when the
    /// valve is closed); the tank is drained by `ẋᵀ f_applied · dt`.
    pub fn step(
        &mut self,
        x_dot: &Vector6<f64>,
        f_applied: &Wrench,
        dt: f64,
    ) -> Result<TankRecord, ControlError> {
        let mut rec = TankRecord::default();
        if let Some(s) = &self.schedule {
            let inject = match s.injection {
                Injection::Time => {
                    let p = *s.power.get(self.step).ok_or(ControlError::ScheduleExhausted {
                        step: self.step,
                        len: s.power.len(),
                    })?;
                    p.max(0.0) * dt
                }
                Injection::Arclength => {
                    self.travel += x_dot.fixed_rows::<3>(0).norm() * dt;
                    let target = interp(&s.planned_arclength, &s.planned_energy, self.travel);
                    (target - self.injected).max(0.0)
                }
            };
            self.injected += inject;
            self.energy += inject;
            rec.injected_j = inject;
            self.clamp(&mut rec);
        }
        let power = x_dot.dot(f_applied);
        rec.consumed_w = power;
        self.energy -= power * dt;
        self.clamp(&mut rec);
        if self.energy < self.epsilon {
            self.sigma = false;
        } else if self.energy >= self.epsilon_on {
            self.sigma = true;
        }
        self.step += 1;
        rec.energy = self.energy;
        rec.sigma = self.sigma;
        Ok(rec)
    }
}

/// Piecewise-linear interpolation of `ys` over increasing `xs`, clamped at the ends.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        // Energy planned for the first step is released over the first segment.
        return if xs[0] > 0.0 { ys[0] * (x / xs[0]).max(0.0) } else { ys[0] };
    }
    let i = xs.partition_point(|&s| s <= x);
    if i >= xs.len() {
        return ys[ys.len() - 1];
    }
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    if x1 > x0 {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    } else {
        y1
    }
}

/// Energy a skill needs from the tank: the trapezoidal integral of the logged
/// controller power plus the residual `epsilon`.
pub fn task_energy(consumed: &PowerTrace, epsilon: f64) -> Result<f64, ControlError> {
    if consumed.power.is_empty() {
        return Err(ControlError::EmptyTrace);
    }
    Ok(consumed.trapezoid() + epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    fn gains_with(f: impl FnOnce(&mut ControllerGains)) -> ControllerGains {
        let mut g = ControllerGains::default();
        f(&mut g);
        g
    }

    #[test]
    fn impedance_examples() {
        let g = ControllerGains::default();
        let x_d = Vector6::new(0.1, 0.2, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(impedance_wrench(&RobotState::at_rest(x_d), &x_d, &g), Wrench::zeros());
        let mut x = x_d;
        x[0] += 0.01;
        let w = impedance_wrench(&RobotState::at_rest(x), &x_d, &g);
        assert!((w[0] + 10.0).abs() < 1e-12);
        assert!(w.rows(1, 5).iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn impedance_matches_matrix_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut r = || rng.random_range(-1.0f64..1.0);
            let g = ControllerGains {
                stiffness: [r().abs() * 1e3, 500.0, 20.0, 3.0, 50.0, 7.0],
                damping: [r().abs() * 1e2, 9.0, 1.0, 0.5, 2.0, 3.0],
                ..ControllerGains::default()
            };
            let x = Vector6::from_fn(|_, _| r());
            let xd = Vector6::from_fn(|_, _| r());
            let v = Vector6::from_fn(|_, _| r());
            let got = impedance_wrench(&RobotState::new(x, v), &xd, &g);
            let k = nalgebra::Matrix6::from_diagonal(&Vector6::from_column_slice(&g.stiffness));
            let d = nalgebra::Matrix6::from_diagonal(&Vector6::from_column_slice(&g.damping));
            let mut oracle = [0.0; 6];
            for i in 0..6 {
                for j in 0..6 {
                    oracle[i] -= k[(i, j)] * (x[j] - xd[j]) + d[(i, j)] * v[j];
                }
            }
            for i in 0..6 {
                assert!((got[i] - oracle[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn force_zero_error_is_feed_forward() {
        let g = ControllerGains::default();
        let fd = Vector6::new(0.3, -0.2, -5.0, 0.0, 0.1, 0.0);
        let (f, i) = force_wrench(&fd, &fd, &Vector6::zeros(), &Rotation3::identity(), &g, 1e-3);
        assert_eq!(f, fd);
        assert_eq!(i, Vector6::zeros());
    }

    #[test]
    fn force_proportional_example() {
        let g = gains_with(|g| g.force_i = [0.0; 6]);
        let fd = Vector6::new(0.0, 0.0, -5.0, 0.0, 0.0, 0.0);
        let (f, _) = force_wrench(
            &Wrench::zeros(),
            &fd,
            &Vector6::zeros(),
            &Rotation3::identity(),
            &g,
            1e-3,
        );
        assert!((f - Vector6::new(0.0, 0.0, -7.5, 0.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn force_frame_rotation() {
        let g = ControllerGains::default();
        let fd = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), PI);
        let (f, _) = force_wrench(&fd, &fd, &Vector6::zeros(), &rot, &g, 1e-3);
        assert!((f - Vector6::new(-1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn integral_is_clamped() {
        let g = gains_with(|g| g.force_i = [2.0; 6]);
        let fd = Vector6::new(0.0, 0.0, -5.0, 0.0, 0.0, 0.0);
        let mut integral = Vector6::zeros();
        for _ in 0..100_000 {
            integral = force_wrench(&Wrench::zeros(), &fd, &integral, &Rotation3::identity(), &g, 1e-3).1;
        }
        assert!((integral[2] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn closed_valve_passes_only_gravity() {
        let fg = Vector6::new(0.0, 0.0, 29.43, 0.0, 0.0, 0.0);
        let fi = Vector6::repeat(1.0);
        let ff = Vector6::repeat(2.0);
        assert_eq!(control_wrench(&fi, &ff, false, &fg), fg);
        assert_eq!(control_wrench(&fi, &ff, true, &fg), fg + Vector6::repeat(3.0));
    }

    #[test]
    fn scalar_tank_bookkeeping() {
        let mut tank = EnergyTank::scalar(10.0, 0.1).unwrap();
        let xd = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let f = Vector6::new(2.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let rec = tank.step(&xd, &f, 1e-3).unwrap();
        assert!((tank.energy() - 9.998).abs() < 1e-12);
        assert_eq!(rec.consumed_w, 2.0);
        assert!(rec.sigma);
    }

    #[test]
    fn valve_lower_branch_and_hysteresis() {
        let tank = EnergyTank::scalar(0.05, 0.1).unwrap();
        assert!(!tank.sigma());
        // Regeneration re-arms only at epsilon_on.
        let mut tank = EnergyTank::scalar(0.05, 0.1).unwrap().with_e_max(1.0);
        let v = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let regen = Vector6::new(-10.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        tank.step(&v, &regen, 0.01).unwrap(); // 0.15 J
        assert!(!tank.sigma());
        tank.step(&v, &regen, 0.01).unwrap(); // 0.25 J
        assert!(tank.sigma());
        let drain = Vector6::new(10.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        tank.step(&v, &drain, 0.01).unwrap(); // 0.15 J, still open
        assert!(tank.sigma());
        tank.step(&v, &drain, 0.01).unwrap(); // 0.05 J
        assert!(!tank.sigma());
    }

    #[test]
    fn tank_clamps_are_logged() {
        let mut tank = EnergyTank::scalar(1.0, 0.1).unwrap();
        let v = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let rec = tank.step(&v, &Vector6::new(-5000.0, 0.0, 0.0, 0.0, 0.0, 0.0), 1e-3).unwrap();
        assert_eq!(tank.energy(), 2.0);
        assert!((rec.clamp_j + 4.0).abs() < 1e-12);
        let rec = tank.step(&v, &Vector6::new(5000.0, 0.0, 0.0, 0.0, 0.0, 0.0), 1e-3).unwrap();
        assert_eq!(tank.energy(), 0.0);
        assert!((rec.clamp_j - 3.0).abs() < 1e-12);
        assert_eq!(tank.clamp_events(), 2);
    }

    #[test]
    fn schedule_injects_then_drains_and_exhausts() {
        let sched = PowerTrace::new(1e-3, vec![2.0, -1.0, 3.0]);
        let mut tank = EnergyTank::scheduled(&sched, 0.2, 0.1).unwrap();
        let v = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let f = Vector6::new(2.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r = tank.step(&v, &f, 1e-3).unwrap();
        assert!((r.injected_j - 2e-3).abs() < 1e-15);
        assert!((tank.energy() - 0.2).abs() < 1e-15);
        let r = tank.step(&v, &f, 1e-3).unwrap();
        assert_eq!(r.injected_j, 0.0);
        tank.step(&v, &f, 1e-3).unwrap();
        assert_eq!(
            tank.step(&v, &f, 1e-3),
            Err(ControlError::ScheduleExhausted { step: 3, len: 3 })
        );
    }

    #[test]
    fn arclength_injection_follows_progress() {
        let sched = PowerTrace::new(1.0, vec![1.0, 1.0, 1.0, 1.0]);
        let planned = [0.1, 0.2, 0.3, 0.4];
        let mut tank =
            EnergyTank::with_schedule(&sched, 0.2, 0.1, Injection::Arclength, &planned).unwrap();
        // No motion, no injection.
        let r = tank.step(&Vector6::zeros(), &Wrench::zeros(), 1.0).unwrap();
        assert_eq!(r.injected_j, 0.0);
        // Half the planned speed releases half the planned energy per step.
        let v = Vector6::new(0.05, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r = tank.step(&v, &Wrench::zeros(), 1.0).unwrap();
        assert!((r.injected_j - 0.5).abs() < 1e-12);
        // Travel beyond the plan never releases more than planned in total.
        let fast = Vector6::new(10.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r = tank.step(&fast, &Wrench::zeros(), 1.0).unwrap();
        assert!((r.injected_j - 3.5).abs() < 1e-12);
        assert!(EnergyTank::with_schedule(&sched, 0.2, 0.1, Injection::Arclength, &[0.1]).is_err());
    }

    #[test]
    fn task_energy_examples() {
        assert_eq!(task_energy(&PowerTrace::new(1e-3, vec![0.0; 100]), 0.1).unwrap(), 0.1);
        let e = task_energy(&PowerTrace::new(1e-3, vec![1.0; 2001]), 0.1).unwrap();
        assert!((e - 2.1).abs() < 1e-12);
        assert_eq!(task_energy(&PowerTrace::new(1e-3, vec![]), 0.1), Err(ControlError::EmptyTrace));
    }
}
