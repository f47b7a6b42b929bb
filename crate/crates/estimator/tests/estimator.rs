//! Estimator behaviour on skills generated by the simulation core.

use etank_core::{generate_pattern, Pattern, PatternSpec, SkillProfile, SurfaceModel};
use etank_estimator::checkpoint;
use etank_estimator::features::transform_label;
use etank_estimator::{NormStats, PowerEstimator, TcnConfig, TcnModel, TrainingHistory};

fn estimator(seed: u64) -> PowerEstimator {
    // Untrained weights around a 0.5 W operating point.
    let norm = NormStats {
        label_mean: transform_label(0.5),
        ..NormStats::identity()
    };
    PowerEstimator {
        model: TcnModel::new(TcnConfig::default(), seed).unwrap(),
        norm,
        window: 100,
        decimation: 10,
        history: TrainingHistory::default(),
    }
}

fn skill(surface: &SurfaceModel, pattern: Pattern, start: (f64, f64)) -> SkillProfile {
    let spec = PatternSpec {
        pattern,
        start_uv: start,
        heading: 0.7,
        length: 0.1,
        seed: 5,
        ..PatternSpec::default()
    };
    generate_pattern(surface, &spec).unwrap().skill
}

#[test]
fn planar_prediction_ignores_the_start_position() {
    let est = estimator(1);
    let planar = SurfaceModel::planar();
    for pattern in Pattern::ALL {
        let a = est.predict_power(&skill(&planar, pattern, (-0.2, -0.1))).unwrap();
        let b = est.predict_power(&skill(&planar, pattern, (0.15, 0.2))).unwrap();
        assert!(a.power.iter().any(|&p| p > 0.0));
        let worst = a.power.iter().zip(&b.power).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{pattern:?}: {worst}");
    }
}

#[test]
fn curved_prediction_depends_on_the_start_position() {
    let est = estimator(2);
    let curved = SurfaceModel::curved(0.02, 10.0);
    let a = est.predict_power(&skill(&curved, Pattern::Line, (-0.2, -0.1))).unwrap();
    let b = est.predict_power(&skill(&curved, Pattern::Line, (0.05, 0.13))).unwrap();
    assert_ne!(a.power, b.power);
}

#[test]
fn energy_schedule_agrees_with_task_energy() {
    let est = estimator(3);
    let s = skill(&SurfaceModel::curved(0.02, 10.0), Pattern::Zigzag, (0.0, 0.0));
    let schedule = est.energy_schedule(&s, 0.1).unwrap();
    let total = est.task_energy(&s).unwrap();
    assert_eq!(schedule.len(), s.len());
    assert!((schedule[0] - 0.1).abs() < 1e-12);
    assert!((schedule.last().unwrap() - 0.1 - total).abs() < 1e-9);
    assert!(schedule.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn prediction_is_causal_in_the_skill() {
    // Changing the end of a skill leaves the prediction of its beginning alone.
    let est = estimator(1);
    let surface = SurfaceModel::curved(0.02, 10.0);
    let full = skill(&surface, Pattern::Spiral, (0.0, 0.0));
    let mut edited = full.clone();
    let cut = full.len() / 2;
    for s in &mut edited.samples[cut..] {
        s.x_d[2] += 0.01;
        s.x_dot_d[0] += 0.02;
    }
    let a = est.predict_decimated(&full).unwrap();
    let b = est.predict_decimated(&edited).unwrap();
    let k = cut / est.decimation;
    assert!(a.iter().any(|&p| p > 0.0));
    assert_eq!(a[..k], b[..k]);
    assert_ne!(a[k..], b[k..]);
}

#[test]
fn checkpoint_file_reproduces_predictions() {
    let est = estimator(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    checkpoint::save(&est, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let s = skill(&SurfaceModel::inclined(0.1), Pattern::Arc, (0.0, 0.0));
    assert_eq!(est.predict_power(&s).unwrap(), back.predict_power(&s).unwrap());
}
