//! Parametric working surfaces and the penalty contact model.
//!
//! Surfaces are height graphs `z = h(u, v)` over the base-frame `(x, y)`
//! plane, so `(u, v)` coincide with the end-effector's base-frame `x` and `y`.
//! The contact model is a spring-damper along the local normal with
//! tanh-regularized Coulomb friction in the tangent plane.

use std::fmt;
use std::path::Path;

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::RobotState;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("query ({u:.6}, {v:.6}) lies outside the workspace {workspace}")]
    OutOfWorkspace { u: f64, v: f64, workspace: Rect },
    #[error("invalid surface parameter: {0}")]
    InvalidParameter(String),
    #[error("surface config: {0}")]
    Config(String),
    #[error("surface config io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceKind {
    Planar,
    Inclined,
    Curved,
    CustomHeightfield,
}

impl fmt::Display for SurfaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SurfaceKind::Planar => "planar",
            SurfaceKind::Inclined => "inclined",
            SurfaceKind::Curved => "curved",
            SurfaceKind::CustomHeightfield => "custom-heightfield",
        };
        f.write_str(s)
    }
}

/// Axis-aligned rectangle in surface `(u, v)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Rect {
    pub fn new(u_min: f64, u_max: f64, v_min: f64, v_max: f64) -> Self {
        Self { u_min, u_max, v_min, v_max }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u <= self.u_max && v >= self.v_min && v <= self.v_max
    }

    fn is_valid(&self) -> bool {
        self.u_min.is_finite()
            && self.u_max.is_finite()
            && self.v_min.is_finite()
            && self.v_max.is_finite()
            && self.u_min < self.u_max
            && self.v_min < self.v_max
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}] x [{}, {}]",
            self.u_min, self.u_max, self.v_min, self.v_max
        )
    }
}

/// Height and its first and second partial derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightJet {
    pub h: f64,
    pub h_u: f64,
    pub h_v: f64,
    pub h_uu: f64,
    pub h_uv: f64,
    pub h_vv: f64,
}

impl HeightJet {
    /// Outward (upward) unit normal of the graph surface.
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(-self.h_u, -self.h_v, 1.0).normalize()
    }
}

pub const DEFAULT_K_N: f64 = 10_000.0;
pub const DEFAULT_B_N: f64 = 50.0;
pub const DEFAULT_MU: f64 = 0.4;
pub const DEFAULT_V_REG: f64 = 1e-3;
pub const DEFAULT_AMPLITUDE: f64 = 0.02;
pub const DEFAULT_FREQUENCY: f64 = 10.0;
pub const DEFAULT_INCLINE_GRADE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceModel {
    pub kind: SurfaceKind,
    /// Coulomb friction coefficient, in (0, 1].
    pub mu: f64,
    /// Contact stiffness, N/m.
    pub k_n: f64,
    /// Contact damping, N·s/m.
    pub b_n: f64,
    /// Friction regularization velocity, m/s.
    pub v_reg: f64,
    /// Constant height added to every surface kind, m.
    pub height_offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub incline_grade: f64,
    /// `h = Σ c[i][j] u^i v^j` for the custom heightfield.
    pub poly_coeffs: Vec<Vec<f64>>,
    /// Region where the surface is absent (contact loss).
    pub gap: Option<Rect>,
    pub workspace: Rect,
}

impl Default for SurfaceModel {
    fn default() -> Self {
        Self::planar()
    }
}

impl SurfaceModel {
    fn base(kind: SurfaceKind) -> Self {
        Self {
            kind,
            mu: DEFAULT_MU,
            k_n: DEFAULT_K_N,
            b_n: DEFAULT_B_N,
            v_reg: DEFAULT_V_REG,
            height_offset: 0.0,
            amplitude: DEFAULT_AMPLITUDE,
            frequency: DEFAULT_FREQUENCY,
            incline_grade: DEFAULT_INCLINE_GRADE,
            poly_coeffs: Vec::new(),
            gap: None,
            workspace: Rect::new(-0.5, 0.5, -0.5, 0.5),
        }
    }

    pub fn planar() -> Self {
        Self::base(SurfaceKind::Planar)
    }

    pub fn inclined(grade: f64) -> Self {
        Self {
            incline_grade: grade,
            ..Self::base(SurfaceKind::Inclined)
        }
    }

    pub fn curved(amplitude: f64, frequency: f64) -> Self {
        Self {
            amplitude,
            frequency,
            ..Self::base(SurfaceKind::Curved)
        }
    }

    pub fn heightfield(poly_coeffs: Vec<Vec<f64>>) -> Self {
        Self {
            poly_coeffs,
            ..Self::base(SurfaceKind::CustomHeightfield)
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_gap(mut self, gap: Rect) -> Self {
        self.gap = Some(gap);
        self
    }

    pub fn with_offset(mut self, height_offset: f64) -> Self {
        self.height_offset = height_offset;
        self
    }

    pub fn with_workspace(mut self, workspace: Rect) -> Self {
        self.workspace = workspace;
        self
    }

    pub fn validate(&self) -> Result<(), SurfaceError> {
        let bad = |msg: String| Err(SurfaceError::InvalidParameter(msg));
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return bad(format!("mu = {} must lie in (0, 1]", self.mu));
        }
        if !(self.k_n > 0.0 && self.k_n.is_finite()) {
            return bad(format!("k_n = {} must be positive", self.k_n));
        }
        if !(self.b_n >= 0.0 && self.b_n.is_finite()) {
            return bad(format!("b_n = {} must be non-negative", self.b_n));
        }
        if !(self.v_reg > 0.0 && self.v_reg.is_finite()) {
            return bad(format!("v_reg = {} must be positive", self.v_reg));
        }
        if !self.workspace.is_valid() {
            return bad(format!("degenerate workspace {}", self.workspace));
        }
        if let Some(gap) = &self.gap {
            if !gap.is_valid() {
                return bad(format!("degenerate gap region {gap}"));
            }
        }
        let finite = [
            self.height_offset,
            self.amplitude,
            self.frequency,
            self.incline_grade,
        ];
        if finite.iter().any(|x| !x.is_finite())
            || self.poly_coeffs.iter().flatten().any(|c| !c.is_finite())
        {
            return bad("non-finite height coefficient".into());
        }
        Ok(())
    }

    /// Height jet without the workspace check. Defined for every finite `(u, v)`.
    pub fn jet(&self, u: f64, v: f64) -> HeightJet {
        let mut jet = match self.kind {
            SurfaceKind::Planar => HeightJet {
                h: 0.0,
                h_u: 0.0,
                h_v: 0.0,
                h_uu: 0.0,
                h_uv: 0.0,
                h_vv: 0.0,
            },
            SurfaceKind::Inclined => HeightJet {
                h: self.incline_grade * u,
                h_u: self.incline_grade,
                h_v: 0.0,
                h_uu: 0.0,
                h_uv: 0.0,
                h_vv: 0.0,
            },
            SurfaceKind::Curved => {
                let (a, w) = (self.amplitude, self.frequency);
                let (su, cu) = (w * u).sin_cos();
                let (sv, cv) = (w * v).sin_cos();
                HeightJet {
                    h: a * su * cv,
                    h_u: a * w * cu * cv,
                    h_v: -a * w * su * sv,
                    h_uu: -a * w * w * su * cv,
                    h_uv: -a * w * w * cu * sv,
                    h_vv: -a * w * w * su * cv,
                }
            }
            SurfaceKind::CustomHeightfield => poly_jet(&self.poly_coeffs, u, v),
        };
        jet.h += self.height_offset;
        jet
    }

    /// Height and outward unit normal at `(u, v)`.
    pub fn surface_eval(&self, u: f64, v: f64) -> Result<(f64, Vector3<f64>), SurfaceError> {
        self.check_workspace(u, v)?;
        let jet = self.jet(u, v);
        Ok((jet.h, jet.normal()))
    }

    pub fn check_workspace(&self, u: f64, v: f64) -> Result<(), SurfaceError> {
        if self.workspace.contains(u, v) {
            Ok(())
        } else {
            Err(SurfaceError::OutOfWorkspace {
                u,
                v,
                workspace: self.workspace,
            })
        }
    }

    pub fn in_gap(&self, u: f64, v: f64) -> bool {
        self.gap.is_some_and(|g| g.contains(u, v))
    }

    pub fn from_spec(spec: &SurfaceSpec) -> Result<Self, SurfaceError> {
        let mut s = Self::base(spec.kind);
        s.mu = spec.mu;
        s.k_n = spec.k_n;
        s.b_n = spec.b_n;
        s.v_reg = spec.v_reg;
        s.height_offset = spec.height_offset;
        s.amplitude = spec.amplitude;
        s.frequency = spec.frequency;
        s.incline_grade = spec.incline_grade;
        s.poly_coeffs = spec.poly_coeffs.clone();
        s.workspace = Rect::new(spec.u_min, spec.u_max, spec.v_min, spec.v_max);
        let gap_keys = [
            spec.gap_u_min,
            spec.gap_u_max,
            spec.gap_v_min,
            spec.gap_v_max,
        ];
        s.gap = match gap_keys {
            [Some(a), Some(b), Some(c), Some(d)] => Some(Rect::new(a, b, c, d)),
            [None, None, None, None] => None,
            _ => {
                return Err(SurfaceError::Config(
                    "gap region needs all of gap_u_min, gap_u_max, gap_v_min, gap_v_max".into(),
                ))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_spec(&self) -> SurfaceSpec {
        SurfaceSpec {
            kind: self.kind,
            mu: self.mu,
            k_n: self.k_n,
            b_n: self.b_n,
            v_reg: self.v_reg,
            height_offset: self.height_offset,
            amplitude: self.amplitude,
            frequency: self.frequency,
            incline_grade: self.incline_grade,
            poly_coeffs: self.poly_coeffs.clone(),
            gap_u_min: self.gap.map(|g| g.u_min),
            gap_u_max: self.gap.map(|g| g.u_max),
            gap_v_min: self.gap.map(|g| g.v_min),
            gap_v_max: self.gap.map(|g| g.v_max),
            u_min: self.workspace.u_min,
            u_max: self.workspace.u_max,
            v_min: self.workspace.v_min,
            v_max: self.workspace.v_max,
            floor_depth: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SurfaceError> {
        let spec: SurfaceSpec =
            toml::from_str(text).map_err(|e| SurfaceError::Config(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SurfaceError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

fn poly_jet(c: &[Vec<f64>], u: f64, v: f64) -> HeightJet {
    // Powers with their first and second derivative factors.
    let pow = |x: f64, n: usize| -> (f64, f64, f64) {
        let p = |k: usize| x.powi(k as i32);
        let v0 = p(n);
        let v1 = if n >= 1 { n as f64 * p(n - 1) } else { 0.0 };
        let v2 = if n >= 2 {
            (n * (n - 1)) as f64 * p(n - 2)
        } else {
            0.0
        };
        (v0, v1, v2)
    };
    let mut jet = HeightJet {
        h: 0.0,
        h_u: 0.0,
        h_v: 0.0,
        h_uu: 0.0,
        h_uv: 0.0,
        h_vv: 0.0,
    };
    for (i, row) in c.iter().enumerate() {
        let (ui, dui, ddui) = pow(u, i);
        for (j, &cij) in row.iter().enumerate() {
            let (vj, dvj, ddvj) = pow(v, j);
            jet.h += cij * ui * vj;
            jet.h_u += cij * dui * vj;
            jet.h_v += cij * ui * dvj;
            jet.h_uu += cij * ddui * vj;
            jet.h_uv += cij * dui * dvj;
            jet.h_vv += cij * ui * ddvj;
        }
    }
    jet
}

/// Human-readable key-value description of a surface (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSpec {
    pub kind: SurfaceKind,
    pub mu: f64,
    pub k_n: f64,
    pub b_n: f64,
    pub v_reg: f64,
    pub height_offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub incline_grade: f64,
    pub poly_coeffs: Vec<Vec<f64>>,
    pub gap_u_min: Option<f64>,
    pub gap_u_max: Option<f64>,
    pub gap_v_min: Option<f64>,
    pub gap_v_max: Option<f64>,
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Depth of a flat rigid floor below `height_offset`, m. Only used by the
    /// simulation world; the floor is what the end-effector strikes inside a gap.
    pub floor_depth: Option<f64>,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        let mut spec = SurfaceModel::planar().to_spec();
        spec.kind = SurfaceKind::Planar;
        spec
    }
}

/// Result of a contact query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState {
    pub in_contact: bool,
    /// Penetration depth along the normal, m.
    pub penetration: f64,
    pub normal: Vector3<f64>,
    /// Wrench applied by the surface to the end-effector, base frame.
    pub f_ext: Vector6<f64>,
}

impl ContactState {
    pub fn free(normal: Vector3<f64>) -> Self {
        Self {
            in_contact: false,
            penetration: 0.0,
            normal,
            f_ext: Vector6::zeros(),
        }
    }

    pub fn normal_force(&self) -> f64 {
        self.f_ext.fixed_rows::<3>(0).dot(&self.normal)
    }

    pub fn tangential_force(&self) -> Vector3<f64> {
        let f = self.f_ext.fixed_rows::<3>(0).into_owned();
        f - self.normal * f.dot(&self.normal)
    }
}

/// Penalty contact between the end-effector point and the surface.
///
/// Outside the workspace, inside the gap region, or above the surface the
/// contact is open and the wrench is zero.
pub fn contact_wrench(surface: &SurfaceModel, state: &RobotState) -> ContactState {
    let p = state.position();
    let vel = state.linear_velocity();
    let (u, v) = (p.x, p.y);
    if !surface.workspace.contains(u, v) || surface.in_gap(u, v) {
        return ContactState::free(Vector3::z());
    }
    let jet = surface.jet(u, v);
    let n = jet.normal();
    // Distance below the tangent plane at (u, v).
    let depth = (jet.h - p.z) * n.z;
    if depth <= 0.0 {
        return ContactState::free(n);
    }
    let normal_speed = vel.dot(&n);
    let f_n = (surface.k_n * depth - surface.b_n * normal_speed).max(0.0);
    let v_t = vel - n * normal_speed;
    let speed_t = v_t.norm();
    let f_t = if speed_t > 0.0 {
        -v_t * (surface.mu * f_n * (speed_t / surface.v_reg).tanh() / speed_t)
    } else {
        Vector3::zeros()
    };
    let f = n * f_n + f_t;
    ContactState {
        in_contact: true,
        penetration: depth,
        normal: n,
        f_ext: Vector6::new(f.x, f.y, f.z, 0.0, 0.0, 0.0),
    }
}
