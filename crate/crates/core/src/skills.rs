//! Nominal tactile skills: constant-speed paths traced on a surface plus a
//! time-invariant desired wrench, and their CSV persistence.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::surface::{HeightJet, SurfaceError, SurfaceModel};

/// Sample period of every skill, s.
pub const SKILL_DT: f64 = 1e-3;

pub const CSV_HEADER: &str = "t,xd0,xd1,xd2,xd3,xd4,xd5,vd0,vd1,vd2,vd3,vd4,vd5,fd0,fd1,fd2,fd3,fd4,fd5";

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("skill start ({u}, {v}) is outside the workspace")]
    StartOutsideWorkspace { u: f64, v: f64 },
    #[error("invalid skill parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Line,
    Zigzag,
    Spiral,
    Arc,
    RandomWalk,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Line,
        Pattern::Zigzag,
        Pattern::Spiral,
        Pattern::Arc,
        Pattern::RandomWalk,
    ];
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pattern::Line => "line",
            Pattern::Zigzag => "zigzag",
            Pattern::Spiral => "spiral",
            Pattern::Arc => "arc",
            Pattern::RandomWalk => "random_walk",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkillSample {
    pub t: f64,
    pub x_d: Vector6<f64>,
    pub x_dot_d: Vector6<f64>,
}

/// Provenance that is not part of the CSV contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillMeta {
    pub pattern: Pattern,
    pub start_uv: (f64, f64),
    pub speed: f64,
    pub surface: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillProfile {
    pub samples: Vec<SkillSample>,
    /// Desired wrench in the end-effector frame.
    pub f_d: Vector6<f64>,
    pub meta: Option<SkillMeta>,
}

impl SkillProfile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Desired path length covered at each sample, by trapezoidal integration
    /// of the desired linear speed.
    pub fn planned_arclength(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.samples.len());
        let mut s = 0.0;
        for (k, smp) in self.samples.iter().enumerate() {
            if k > 0 {
                let prev = &self.samples[k - 1];
                let v0 = prev.x_dot_d.fixed_rows::<3>(0).norm();
                let v1 = smp.x_dot_d.fixed_rows::<3>(0).norm();
                s += 0.5 * (v0 + v1) * (smp.t - prev.t);
            }
            out.push(s);
        }
        out
    }

    /// Same samples and wrench, bit for bit. Metadata is ignored.
    pub fn same_trajectory(&self, other: &SkillProfile) -> bool {
        let bits = |v: &Vector6<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.samples.len() == other.samples.len()
            && bits(&self.f_d) == bits(&other.f_d)
            && self.samples.iter().zip(&other.samples).all(|(a, b)| {
                a.t.to_bits() == b.t.to_bits()
                    && bits(&a.x_d) == bits(&b.x_d)
                    && bits(&a.x_dot_d) == bits(&b.x_dot_d)
            })
    }
}

/// Parameters of a generated skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternSpec {
    pub pattern: Pattern,
    pub start_uv: (f64, f64),
    /// Initial direction of travel in the `(u, v)` plane, rad.
    pub heading: f64,
    /// Tangential speed in the `(u, v)` plane, m/s.
    pub speed: f64,
    /// Path length in the `(u, v)` plane, m.
    pub length: f64,
    pub f_d: [f64; 6],
    pub seed: u64,
    pub zigzag_leg: f64,
    pub spiral_pitch: f64,
    pub arc_radius: f64,
    /// Hold at the final pose after the path, s.
    pub dwell: f64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Line,
            start_uv: (0.0, 0.0),
            heading: 0.0,
            speed: 0.05,
            length: 0.25,
            f_d: [0.0, 0.0, -5.0, 0.0, 0.0, 0.0],
            seed: 0,
            zigzag_leg: 0.05,
            spiral_pitch: 0.02,
            arc_radius: 0.1,
            dwell: 0.0,
        }
    }
}

/// A generated skill and whether the path had to be cut at the workspace edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub skill: SkillProfile,
    pub truncated: bool,
}

/// Arclength-parameterized planar path with unit tangent.
#[derive(Debug, Clone)]
pub enum PlanarPath {
    Line {
        start: Vector2<f64>,
        dir: Vector2<f64>,
    },
    Zigzag {
        start: Vector2<f64>,
        up: Vector2<f64>,
        down: Vector2<f64>,
        leg: f64,
    },
    Spiral {
        center: Vector2<f64>,
        /// Radial growth per radian.
        a: f64,
        phase: f64,
    },
    Arc {
        center: Vector2<f64>,
        radius: f64,
        angle0: f64,
    },
    RandomWalk(RandomWalk),
}

/// Heading driven by a piecewise-linear curvature with seeded AR(1) knots.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    start: Vector2<f64>,
    heading0: f64,
    knot_spacing: f64,
    curvature: Vec<f64>,
}

const WALK_KNOT_SPACING: f64 = 0.02;
const WALK_CURVATURE_SIGMA: f64 = 6.0;
const WALK_CURVATURE_MAX: f64 = 25.0;
const WALK_PERSISTENCE: f64 = 0.7;

impl RandomWalk {
    fn new(start: Vector2<f64>, heading0: f64, length: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, WALK_CURVATURE_SIGMA).expect("valid sigma");
        let knots = (length / WALK_KNOT_SPACING).ceil() as usize + 2;
        let mut curvature = Vec::with_capacity(knots);
        let mut k = 0.0;
        for _ in 0..knots {
            k = (WALK_PERSISTENCE * k + noise.sample(&mut rng))
                .clamp(-WALK_CURVATURE_MAX, WALK_CURVATURE_MAX);
            curvature.push(k);
        }
        // Start straight so the first sample's heading is `heading0`.
        curvature[0] = 0.0;
        Self {
            start,
            heading0,
            knot_spacing: WALK_KNOT_SPACING,
            curvature,
        }
    }

    /// Heading at arclength `s`: integral of the piecewise-linear curvature.
    pub fn heading(&self, s: f64) -> f64 {
        let h = self.knot_spacing;
        let j = ((s / h).floor() as usize).min(self.curvature.len() - 2);
        let mut psi = self.heading0;
        for i in 0..j {
            psi += 0.5 * (self.curvature[i] + self.curvature[i + 1]) * h;
        }
        let r = s - j as f64 * h;
        let (k0, k1) = (self.curvature[j], self.curvature[j + 1]);
        psi + k0 * r + 0.5 * (k1 - k0) / h * r * r
    }

    /// Position by 3-point Gauss–Legendre quadrature of the unit tangent over
    /// consecutive arclength stations.
    fn positions(&self, stations: &[f64]) -> Vec<Vector2<f64>> {
        const NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mut out = Vec::with_capacity(stations.len());
        let mut p = self.start;
        let mut prev = 0.0;
        for &s in stations {
            let (mid, half) = (0.5 * (s + prev), 0.5 * (s - prev));
            for (x, w) in NODES.iter().zip(WEIGHTS) {
                let psi = self.heading(mid + half * x);
                p += Vector2::new(psi.cos(), psi.sin()) * (w * half);
            }
            out.push(p);
            prev = s;
        }
        out
    }
}

fn unit(angle: f64) -> Vector2<f64> {
    Vector2::new(angle.cos(), angle.sin())
}

/// Arclength of the Archimedean spiral `r = a φ` from the centre.
pub fn spiral_arclength(a: f64, phi: f64) -> f64 {
    0.5 * a * (phi * (1.0 + phi * phi).sqrt() + phi.asinh())
}

fn spiral_angle(a: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    // Initial guess from the large-φ asymptote s ≈ aφ²/2, refined by Newton.
    let mut phi = (2.0 * s / a).sqrt();
    for _ in 0..50 {
        let f = spiral_arclength(a, phi) - s;
        let df = a * (1.0 + phi * phi).sqrt();
        let step = f / df;
        phi -= step;
        if step.abs() < 1e-15 * (1.0 + phi) {
            break;
        }
    }
    phi
}

impl PlanarPath {
    pub fn from_spec(spec: &PatternSpec) -> Self {
        let start = Vector2::new(spec.start_uv.0, spec.start_uv.1);
        match spec.pattern {
            Pattern::Line => PlanarPath::Line {
                start,
                dir: unit(spec.heading),
            },
            Pattern::Zigzag => PlanarPath::Zigzag {
                start,
                up: unit(spec.heading + std::f64::consts::FRAC_PI_4),
                down: unit(spec.heading - std::f64::consts::FRAC_PI_4),
                leg: spec.zigzag_leg,
            },
            Pattern::Spiral => PlanarPath::Spiral {
                center: start,
                a: spec.spiral_pitch / std::f64::consts::TAU,
                phase: spec.heading,
            },
            Pattern::Arc => {
                // Counter-clockwise circle through the start, tangent to the heading.
                let center = start + unit(spec.heading + std::f64::consts::FRAC_PI_2) * spec.arc_radius;
                PlanarPath::Arc {
                    center,
                    radius: spec.arc_radius,
                    angle0: spec.heading - std::f64::consts::FRAC_PI_2,
                }
            }
            Pattern::RandomWalk => PlanarPath::RandomWalk(RandomWalk::new(
                start,
                spec.heading,
                spec.length,
                spec.seed,
            )),
        }
    }

    /// Position and unit tangent at each arclength station.
    pub fn sample(&self, stations: &[f64]) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        match self {
            PlanarPath::Line { start, dir } => {
                stations.iter().map(|&s| (start + dir * s, *dir)).collect()
            }
            PlanarPath::Zigzag {
                start,
                up,
                down,
                leg,
            } => stations
                .iter()
                .map(|&s| {
                    // A corner sample belongs to the incoming leg.
                    let i = ((s / leg - 1e-9).ceil().max(1.0) - 1.0) as usize;
                    let pairs = (i / 2) as f64;
                    let mut p = start + (up + down) * (pairs * leg);
                    if i % 2 == 1 {
                        p += up * *leg;
                    }
                    let dir = if i % 2 == 0 { *up } else { *down };
                    (p + dir * (s - i as f64 * leg), dir)
                })
                .collect(),
            PlanarPath::Spiral { center, a, phase } => stations
                .iter()
                .map(|&s| {
                    let phi = spiral_angle(*a, s);
                    let (sn, cs) = (phi + phase).sin_cos();
                    let p = center + Vector2::new(cs, sn) * (a * phi);
                    let t = Vector2::new(cs - phi * sn, sn + phi * cs) / (1.0 + phi * phi).sqrt();
                    (p, t)
                })
                .collect(),
            PlanarPath::Arc {
                center,
                radius,
                angle0,
            } => stations
                .iter()
                .map(|&s| {
                    let ang = angle0 + s / radius;
                    let (sn, cs) = ang.sin_cos();
                    (center + Vector2::new(cs, sn) * *radius, Vector2::new(-sn, cs))
                })
                .collect(),
            PlanarPath::RandomWalk(walk) => {
                let pos = walk.positions(stations);
                stations
                    .iter()
                    .zip(pos)
                    .map(|(&s, p)| (p, unit(walk.heading(s))))
                    .collect()
            }
        }
    }
}

/// Rotation vector aligning the tool `z` axis with the surface normal, and its
/// time derivative for a point moving with `(u̇, v̇)`.
pub fn normal_alignment(jet: &HeightJet, du: f64, dv: f64) -> ([f64; 3], [f64; 3]) {
    let (hu, hv) = (jet.h_u, jet.h_v);
    let dhu = jet.h_uu * du + jet.h_uv * dv;
    let dhv = jet.h_uv * du + jet.h_vv * dv;
    let g = (hu * hu + hv * hv).sqrt();
    // c(g) = atan(g)/g and its derivative, with series near zero.
    let (c, dc) = if g < 1e-4 {
        let g2 = g * g;
        (1.0 - g2 / 3.0 + g2 * g2 / 5.0, g * (-2.0 / 3.0 + 4.0 * g2 / 5.0))
    } else {
        let at = g.atan();
        (at / g, (g / (1.0 + g * g) - at) / (g * g))
    };
    let dg = if g > 0.0 { (hu * dhu + hv * dhv) / g } else { 0.0 };
    let rot = [hv * c, -hu * c, 0.0];
    let rate = [dhv * c + hv * dc * dg, -dhu * c - hu * dc * dg, 0.0];
    (rot, rate)
}

/// Generates a constant-speed skill on `surface`.
///
/// The planar pattern is lifted onto the surface: height from the surface,
/// vertical velocity from the surface gradient, and the tool axis aligned with
/// the local normal. Samples leaving the workspace end the path early.
pub fn generate_pattern(surface: &SurfaceModel, spec: &PatternSpec) -> Result<Generated, SkillError> {
    if !(spec.speed > 0.0 && spec.speed.is_finite()) {
        return Err(SkillError::InvalidParameter(format!("speed {} must be positive", spec.speed)));
    }
    if !(spec.length >= 0.0 && spec.length.is_finite()) {
        return Err(SkillError::InvalidParameter(format!("length {} must be non-negative", spec.length)));
    }
    let (u0, v0) = spec.start_uv;
    if !surface.workspace.contains(u0, v0) {
        return Err(SkillError::StartOutsideWorkspace { u: u0, v: v0 });
    }
    let steps = (spec.length / spec.speed / SKILL_DT).round() as usize;
    let stations: Vec<f64> = (0..=steps)
        .map(|k| spec.speed * (k as f64 * SKILL_DT))
        .collect();
    let path = PlanarPath::from_spec(spec);
    let mut samples = Vec::with_capacity(stations.len());
    let mut truncated = false;
    for (k, (p, tangent)) in path.sample(&stations).into_iter().enumerate() {
        if !surface.workspace.contains(p.x, p.y) {
            truncated = true;
            log::warn!(
                "{} path leaves the workspace at ({:.4}, {:.4}); truncated to {} samples",
                spec.pattern,
                p.x,
                p.y,
                k
            );
            break;
        }
        let (du, dv) = (spec.speed * tangent.x, spec.speed * tangent.y);
        let jet = surface.jet(p.x, p.y);
        let (rot, rate) = normal_alignment(&jet, du, dv);
        samples.push(SkillSample {
            t: k as f64 * SKILL_DT,
            x_d: Vector6::new(p.x, p.y, jet.h, rot[0], rot[1], rot[2]),
            x_dot_d: Vector6::new(du, dv, jet.h_u * du + jet.h_v * dv, rate[0], rate[1], rate[2]),
        });
    }
    if let Some(last) = samples.last().copied() {
        let hold = (spec.dwell / SKILL_DT).round() as usize;
        let n = samples.len();
        for i in 0..hold {
            samples.push(SkillSample {
                t: (n + i) as f64 * SKILL_DT,
                x_d: last.x_d,
                x_dot_d: Vector6::zeros(),
            });
        }
    }
    Ok(Generated {
        skill: SkillProfile {
            samples,
            f_d: Vector6::from_column_slice(&spec.f_d),
            meta: Some(SkillMeta {
                pattern: spec.pattern,
                start_uv: spec.start_uv,
                speed: spec.speed,
                surface: surface.kind.to_string(),
                seed: spec.seed,
            }),
        },
        truncated,
    })
}

/// Decimal rendering with at least nine significant digits that parses back
/// to the identical `f64`.
pub fn format_decimal(x: f64) -> String {
    let mut s = format!("{x}");
    if !x.is_finite() {
        return s;
    }
    let digits = s
        .chars()
        .filter(|c| c.is_ascii_digit())
        .skip_while(|&c| c == '0')
        .count();
    if digits < 9 {
        if !s.contains('.') {
            s.push('.');
        }
        // A value of zero has no significant digits; pad to nine decimals.
        let pad = if digits == 0 {
            9 - s.split('.').nth(1).map_or(0, str::len)
        } else {
            9 - digits
        };
        s.extend(std::iter::repeat_n('0', pad));
    }
    s
}

pub fn skill_to_csv<W: Write>(skill: &SkillProfile, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let mut line = String::new();
    for smp in &skill.samples {
        line.clear();
        line.push_str(&format_decimal(smp.t));
        for x in smp.x_d.iter().chain(smp.x_dot_d.iter()).chain(skill.f_d.iter()) {
            line.push(',');
            line.push_str(&format_decimal(*x));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn csv_to_skill<R: BufRead>(r: R) -> Result<SkillProfile, SkillError> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(SkillError::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    if header.trim_end() != CSV_HEADER {
        return Err(SkillError::Parse {
            line: 1,
            msg: format!("expected header {CSV_HEADER:?}"),
        });
    }
    let mut samples = Vec::new();
    let mut f_d = None;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SkillError::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        if fields.len() != 19 {
            return Err(SkillError::Parse {
                line: lineno,
                msg: format!("expected 19 fields, found {}", fields.len()),
            });
        }
        let fd = Vector6::from_column_slice(&fields[13..19]);
        match f_d {
            None => f_d = Some(fd),
            Some(prev) if prev != fd => {
                return Err(SkillError::Parse {
                    line: lineno,
                    msg: "desired wrench changes within a skill".into(),
                })
            }
            _ => {}
        }
        samples.push(SkillSample {
            t: fields[0],
            x_d: Vector6::from_column_slice(&fields[1..7]),
            x_dot_d: Vector6::from_column_slice(&fields[7..13]),
        });
    }
    let f_d = f_d.ok_or(SkillError::Parse {
        line: 2,
        msg: "no samples".into(),
    })?;
    Ok(SkillProfile {
        samples,
        f_d,
        meta: None,
    })
}

pub fn save_skill(skill: &SkillProfile, path: impl AsRef<Path>) -> Result<(), SkillError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    skill_to_csv(skill, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_skill(path: impl AsRef<Path>) -> Result<SkillProfile, SkillError> {
    csv_to_skill(BufReader::new(std::fs::File::open(path)?))
}
