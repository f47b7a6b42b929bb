//! Simulation core: surfaces and contact, Cartesian end-effector dynamics,
//! the tank-gated force-impedance controller, tactile skill generation and
//! the closed-loop simulator.

pub mod controller;
pub mod dynamics;
pub mod sim;
pub mod skills;
pub mod surface;
pub mod trace;

pub use controller::{ControlError, ControllerGains, EnergyTank, Injection, TankMode};
pub use dynamics::{CartesianBody, RobotState, Wrench};
pub use sim::{simulate, SimConfig, SimError, SimTrace, StopReason, World};
pub use skills::{generate_pattern, Pattern, PatternSpec, SkillProfile};
pub use surface::{SurfaceKind, SurfaceModel, SurfaceSpec};
pub use trace::PowerTrace;
