//! Error metrics between power traces and the friction-work baseline.

use etank_core::{PowerTrace, SkillProfile};
use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Denominator floor of per-step percentage errors on raw power, W.
pub const POWER_FLOOR_W: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} samples but ground truth has {truth}")]
    Length { pred: usize, truth: usize },
    #[error("sample spacing differs: {pred} s vs {truth} s")]
    Spacing { pred: f64, truth: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    /// Mean squared power error, W².
    pub mse: f64,
    /// Mean per-step absolute percentage error, %.
    pub mape: f64,
    /// Absolute percentage error of the integrated energy, %.
    pub mape_sum: f64,
    /// Pearson correlation of the two traces; `None` if either is constant.
    pub pearson_r: Option<f64>,
    pub energy_pred_j: f64,
    pub energy_true_j: f64,
}

pub fn metrics(pred: &PowerTrace, truth: &PowerTrace) -> Result<TraceMetrics, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if (pred.dt - truth.dt).abs() > 1e-12 * truth.dt.abs().max(1.0) {
        return Err(MetricsError::Spacing {
            pred: pred.dt,
            truth: truth.dt,
        });
    }
    let n = truth.len().max(1) as f64;
    let (mut se, mut ape) = (0.0, 0.0);
    for (p, t) in pred.power.iter().zip(&truth.power) {
        se += (p - t) * (p - t);
        ape += (p - t).abs() / t.abs().max(POWER_FLOOR_W);
    }
    let e_pred = pred.trapezoid();
    let e_true = truth.trapezoid();
    Ok(TraceMetrics {
        mse: se / n,
        mape: 100.0 * ape / n,
        mape_sum: energy_ape(e_pred, e_true),
        pearson_r: pearson(&pred.power, &truth.power),
        energy_pred_j: e_pred,
        energy_true_j: e_true,
    })
}

/// `100·|pred − truth| / truth`, or 0 when both are zero.
pub fn energy_ape(pred: f64, truth: f64) -> f64 {
    if pred == truth {
        0.0
    } else {
        100.0 * (pred - truth).abs() / truth.abs()
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Arithmetic mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMetrics {
    pub name: String,
    #[serde(flatten)]
    pub metrics: TraceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: MeanStd,
    pub mape: MeanStd,
    pub mape_sum: MeanStd,
    /// Over trajectories with a defined correlation.
    pub pearson_r: MeanStd,
    pub trajectories: Vec<NamedMetrics>,
}

impl MetricsReport {
    pub fn aggregate(trajectories: Vec<NamedMetrics>) -> Self {
        let col = |f: fn(&TraceMetrics) -> f64| trajectories.iter().map(|t| f(&t.metrics)).collect::<Vec<_>>();
        let r: Vec<f64> = trajectories.iter().filter_map(|t| t.metrics.pearson_r).collect();
        Self {
            mse: MeanStd::of(&col(|m| m.mse)),
            mape: MeanStd::of(&col(|m| m.mape)),
            mape_sum: MeanStd::of(&col(|m| m.mape_sum)),
            pearson_r: MeanStd::of(&r),
            trajectories,
        }
    }

    /// Share of trajectories whose correlation is at least `r_min`.
    pub fn share_correlated(&self, r_min: f64) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let ok = self
            .trajectories
            .iter()
            .filter(|t| t.metrics.pearson_r.is_some_and(|r| r >= r_min))
            .count();
        ok as f64 / self.trajectories.len() as f64
    }
}

/// Friction-work power `μ·|f_n|·‖v_t‖` along the skill. The normal is the
/// tool z axis of the desired pose; `f_n` is the desired force along it.
pub fn expert_power(skill: &SkillProfile, mu: f64) -> PowerTrace {
    let f_n = skill.f_d[2].abs();
    let power = skill
        .samples
        .iter()
        .map(|s| {
            let rot = Rotation3::new(Vector3::new(s.x_d[3], s.x_d[4], s.x_d[5]));
            let n = rot * Vector3::z();
            let v = Vector3::new(s.x_dot_d[0], s.x_dot_d[1], s.x_dot_d[2]);
            let v_t = v - n * n.dot(&v);
            mu * f_n * v_t.norm()
        })
        .collect();
    let dt = match skill.samples.as_slice() {
        [a, b, ..] => b.t - a.t,
        _ => etank_core::skills::SKILL_DT,
    };
    PowerTrace::new(dt, power)
}

/// Scalar friction-work estimate of the task energy, J.
pub fn expert_baseline(skill: &SkillProfile, mu: f64) -> f64 {
    expert_power(skill, mu).trapezoid()
}

#[cfg(test)]
mod tests {
    use super::*;
    use etank_core::skills::SkillSample;
    use etank_core::{generate_pattern, PatternSpec, Pattern, SurfaceModel};
    use nalgebra::Vector6;

    fn trace(p: &[f64]) -> PowerTrace {
        PowerTrace::new(1e-3, p.to_vec())
    }

    #[test]
    fn identical_traces_score_zero() {
        let t = trace(&[0.1, 0.3, 0.2]);
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.mse, m.mape, m.mape_sum), (0.0, 0.0, 0.0));
        assert!((m.pearson_r.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_fixture() {
        let m = metrics(&trace(&[1.1, 1.8]), &trace(&[1.0, 2.0])).unwrap();
        assert!((m.mape - 10.0).abs() < 1e-12);
        assert!((m.mse - 0.025).abs() < 1e-15);
        // Energies 1.45e-3 vs 1.5e-3 J.
        assert!((m.mape_sum - 100.0 * 0.05 / 1.5).abs() < 1e-9);
    }

    #[test]
    fn length_and_spacing_errors() {
        assert_eq!(
            metrics(&trace(&[1.0]), &trace(&[1.0, 2.0])),
            Err(MetricsError::Length { pred: 1, truth: 2 })
        );
        let coarse = PowerTrace::new(1e-2, vec![1.0, 2.0]);
        assert!(matches!(metrics(&coarse, &trace(&[1.0, 2.0])), Err(MetricsError::Spacing { .. })));
    }

    #[test]
    fn mape_sum_zero_iff_energies_match() {
        // Different shapes, same integral.
        let m = metrics(&trace(&[0.0, 2.0, 0.0]), &trace(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(m.mape_sum, 0.0);
        assert!(m.mape > 0.0);
        let m = metrics(&trace(&[1.0, 1.0, 1.1]), &trace(&[1.0, 1.0, 1.0])).unwrap();
        assert!(m.mape_sum > 0.0);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn aggregation_is_population_mean_std() {
        let mk = |mape: f64, r: Option<f64>| NamedMetrics {
            name: String::new(),
            metrics: TraceMetrics {
                mse: 0.0,
                mape,
                mape_sum: 0.0,
                pearson_r: r,
                energy_pred_j: 0.0,
                energy_true_j: 0.0,
            },
        };
        let rep = MetricsReport::aggregate(vec![mk(2.0, Some(0.9)), mk(4.0, None), mk(6.0, Some(0.7))]);
        assert_eq!(rep.mape.mean, 4.0);
        assert!((rep.mape.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((rep.pearson_r.mean - 0.8).abs() < 1e-15);
        assert!((rep.share_correlated(0.8) - 1.0 / 3.0).abs() < 1e-15);
    }

    fn planar_line(seconds: f64, f_n: f64, speed: f64) -> SkillProfile {
        let spec = PatternSpec {
            pattern: Pattern::Line,
            start_uv: (-0.25, 0.0),
            speed,
            length: speed * seconds,
            f_d: [0.0, 0.0, -f_n, 0.0, 0.0, 0.0],
            ..PatternSpec::default()
        };
        generate_pattern(&SurfaceModel::planar(), &spec).unwrap().skill
    }

    #[test]
    fn baseline_closed_form_line() {
        // μ·f·v·t = 0.4 · 5 · 0.05 · 10.
        let e = expert_baseline(&planar_line(10.0, 5.0, 0.05), 0.4);
        assert!((e - 1.0).abs() < 1e-9, "{e}");
        assert_eq!(expert_baseline(&planar_line(2.0, 0.0, 0.05), 0.4), 0.0);
    }

    #[test]
    fn baseline_is_linear() {
        let base = expert_baseline(&planar_line(2.0, 5.0, 0.05), 0.4);
        assert_eq!(expert_baseline(&planar_line(2.0, 5.0, 0.05), 0.2), base / 2.0);
        assert_eq!(expert_baseline(&planar_line(2.0, 10.0, 0.05), 0.4), 2.0 * base);
        // Same duration at double speed.
        let fast = expert_baseline(&planar_line(2.0, 5.0, 0.1), 0.4);
        assert!((fast - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn baseline_ignores_normal_velocity() {
        let s = SkillProfile {
            samples: (0..3)
                .map(|k| SkillSample {
                    t: k as f64 * 1e-3,
                    x_d: Vector6::zeros(),
                    x_dot_d: Vector6::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
                })
                .collect(),
            f_d: Vector6::new(0.0, 0.0, -5.0, 0.0, 0.0, 0.0),
            meta: None,
        };
        assert_eq!(expert_baseline(&s, 0.4), 0.0);
    }

    #[test]
    fn baseline_mu_mismatch_scales_error() {
        // With truth equal to the μ = 0.5 estimate, a μ = 0.3 estimate misses by 40 %.
        let skill = planar_line(2.0, 5.0, 0.05);
        let truth = expert_baseline(&skill, 0.5);
        let est = expert_baseline(&skill, 0.3);
        assert!((energy_ape(est, truth) - 40.0).abs() < 1e-9);
    }
}
