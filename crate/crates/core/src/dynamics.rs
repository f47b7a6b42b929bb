//! Rigid-body end-effector dynamics in Cartesian space.
//!
//! `M ẍ + D ẋ + f_g = f_robot + f_ext` with constant apparent inertia `M`, so
//! the Coriolis term vanishes. Orientation is a rotation vector treated as a
//! small-angle coordinate.

use nalgebra::{Matrix6, Rotation3, SymmetricEigen, Vector3, Vector6};
use thiserror::Error;

pub type Wrench = Vector6<f64>;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("inertia must be symmetric positive definite")]
    InertiaNotPositiveDefinite,
    #[error("damping must be symmetric positive semidefinite")]
    DampingNotSemidefinite,
    #[error("non-finite acceleration {acceleration:?} at pose {pose:?}, twist {twist:?}, net wrench {net:?}")]
    NonFinite {
        acceleration: [f64; 6],
        pose: [f64; 6],
        twist: [f64; 6],
        net: [f64; 6],
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// Position (m) and orientation rotation vector (rad).
    pub pose: Vector6<f64>,
    /// Linear (m/s) and angular (rad/s) velocity.
    pub twist: Vector6<f64>,
}

impl RobotState {
    pub fn new(pose: Vector6<f64>, twist: Vector6<f64>) -> Self {
        Self { pose, twist }
    }

    pub fn at_rest(pose: Vector6<f64>) -> Self {
        Self::new(pose, Vector6::zeros())
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.fixed_rows::<3>(0).into_owned()
    }

    pub fn linear_velocity(&self) -> Vector3<f64> {
        self.twist.fixed_rows::<3>(0).into_owned()
    }

    pub fn orientation(&self) -> Vector3<f64> {
        self.pose.fixed_rows::<3>(3).into_owned()
    }

    /// End-effector to base rotation.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::new(self.orientation())
    }

    pub fn is_finite(&self) -> bool {
        self.pose.iter().chain(self.twist.iter()).all(|x| x.is_finite())
    }
}

/// Constant Cartesian inertia, damping and gravity wrench of the end-effector.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianBody {
    inertia: Matrix6<f64>,
    inertia_inv: Matrix6<f64>,
    damping: Matrix6<f64>,
    gravity: Wrench,
}

impl CartesianBody {
    pub fn new(
        inertia: Matrix6<f64>,
        damping: Matrix6<f64>,
        gravity: Wrench,
    ) -> Result<Self, DynamicsError> {
        let symmetric = |m: &Matrix6<f64>| (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max();
        if !symmetric(&inertia) {
            return Err(DynamicsError::InertiaNotPositiveDefinite);
        }
        let chol = inertia
            .cholesky()
            .ok_or(DynamicsError::InertiaNotPositiveDefinite)?;
        if !symmetric(&damping)
            || SymmetricEigen::new(damping)
                .eigenvalues
                .iter()
                .any(|&l| l < -1e-12)
        {
            return Err(DynamicsError::DampingNotSemidefinite);
        }
        Ok(Self {
            inertia,
            inertia_inv: chol.inverse(),
            damping,
            gravity,
        })
    }

    /// Diagonal body: `mass` on the translational axes, `rot_inertia` on the
    /// rotational ones. Gravity acts along base `-z`.
    pub fn diagonal(
        mass: f64,
        rot_inertia: f64,
        lin_damping: f64,
        rot_damping: f64,
    ) -> Result<Self, DynamicsError> {
        let m = Vector6::new(mass, mass, mass, rot_inertia, rot_inertia, rot_inertia);
        let d = Vector6::new(
            lin_damping,
            lin_damping,
            lin_damping,
            rot_damping,
            rot_damping,
            rot_damping,
        );
        let g = Vector6::new(0.0, 0.0, mass * GRAVITY, 0.0, 0.0, 0.0);
        Self::new(Matrix6::from_diagonal(&m), Matrix6::from_diagonal(&d), g)
    }

    pub fn inertia(&self) -> &Matrix6<f64> {
        &self.inertia
    }

    pub fn damping(&self) -> &Matrix6<f64> {
        &self.damping
    }

    pub fn gravity(&self) -> &Wrench {
        &self.gravity
    }
}

impl Default for CartesianBody {
    fn default() -> Self {
        Self::diagonal(3.0, 0.1, 40.0, 2.0).expect("default body is valid")
    }
}

/// One semi-implicit Euler step: velocity first, then pose with the new velocity.
pub fn step_dynamics(
    body: &CartesianBody,
    state: &RobotState,
    f_robot: &Wrench,
    f_ext: &Wrench,
    dt: f64,
) -> Result<RobotState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let net = f_robot + f_ext - body.damping * state.twist - body.gravity;
    let acc = body.inertia_inv * net;
    if acc.iter().any(|a| !a.is_finite()) {
        return Err(DynamicsError::NonFinite {
            acceleration: acc.into(),
            pose: state.pose.into(),
            twist: state.twist.into(),
            net: net.into(),
        });
    }
    let twist = state.twist + acc * dt;
    let pose = state.pose + twist * dt;
    Ok(RobotState { pose, twist })
}

/// `½ ẋᵀ M ẋ`.
pub fn kinetic_energy(body: &CartesianBody, state: &RobotState) -> f64 {
    0.5 * state.twist.dot(&(body.inertia * state.twist))
}
