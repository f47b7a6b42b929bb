//! Closed-loop properties across surfaces, skills and tanks.

use etank_core::sim::power_balance_residuals;
use etank_core::skills::{load_skill, save_skill, SKILL_DT};
use etank_core::{
    generate_pattern, simulate, CartesianBody, ControllerGains, EnergyTank, Pattern, PatternSpec, PowerTrace,
    SimConfig, SimTrace, SkillProfile, SurfaceModel, World,
};
use proptest::prelude::*;

fn surfaces() -> [SurfaceModel; 3] {
    [
        SurfaceModel::planar(),
        SurfaceModel::inclined(0.1),
        SurfaceModel::curved(0.02, 10.0),
    ]
}

fn skill(surface: &SurfaceModel, pattern: Pattern, start: (f64, f64), heading: f64, length: f64) -> SkillProfile {
    let spec = PatternSpec {
        pattern,
        start_uv: start,
        heading,
        length,
        seed: 9,
        ..PatternSpec::default()
    };
    generate_pattern(surface, &spec).unwrap().skill
}

fn run(world: &World, skill: &SkillProfile, tank: EnergyTank, sim: &SimConfig) -> SimTrace {
    simulate(world, &CartesianBody::default(), &ControllerGains::default(), skill, tank, sim).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tank_books_balance_and_closed_valve_is_gravity_only(
        surface_idx in 0usize..3,
        pattern_idx in 0usize..5,
        u in -0.2f64..0.2,
        v in -0.2f64..0.2,
        heading in 0.0f64..std::f64::consts::TAU,
        budget in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let surface = surfaces()[surface_idx].clone();
        let s = skill(&surface, Pattern::ALL[pattern_idx], (u, v), heading, 0.05);
        let world = World::new(surface);
        let tr = run(&world, &s, EnergyTank::scalar(budget, 0.1).unwrap(), &SimConfig { seed, ..SimConfig::default() });
        prop_assert!(tr.bookkeeping_residual().abs() < 1e-9);
        let f_g = *CartesianBody::default().gravity();
        for r in &tr.rows {
            prop_assert!(r.e_tank >= 0.0);
            if !r.sigma {
                prop_assert_eq!(r.f_robot, f_g);
                prop_assert_eq!(r.consumed_w, 0.0);
            }
        }
    }
}

#[test]
fn scalar_tank_never_releases_more_than_it_held() {
    // Without injections the controller can only spend the initial budget
    // plus whatever it absorbed.
    for surface in surfaces() {
        let world = World::new(surface.clone());
        for pattern in Pattern::ALL {
            let s = skill(&surface, pattern, (-0.1, 0.0), 0.3, 0.1);
            let tr = run(&world, &s, EnergyTank::scalar(0.4, 0.1).unwrap(), &SimConfig::default());
            let mut spent = 0.0;
            for r in &tr.rows {
                spent += r.consumed_w * tr.dt;
                assert!(spent <= tr.e_tank0 + 1e-12, "{pattern:?} spent {spent} J");
            }
        }
    }
}

#[test]
fn power_balance_residual_is_first_order_on_every_surface() {
    let body = CartesianBody::default();
    for surface in surfaces() {
        let world = World::new(surface.clone());
        let s = skill(&surface, Pattern::Spiral, (0.0, 0.0), 0.0, 0.08);
        let rms: Vec<f64> = [1, 2, 4]
            .into_iter()
            .map(|substeps| {
                let sim = SimConfig {
                    substeps,
                    noise_sigma: 0.0,
                    ..SimConfig::default()
                };
                let tr = run(&world, &s, EnergyTank::scalar(200.0, 0.1).unwrap(), &sim);
                let r = power_balance_residuals(&tr, &body);
                (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
            })
            .collect();
        for w in rms.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio} on {:?}", surface.kind);
        }
    }
}

#[test]
fn sustained_pressing_tracks_the_desired_force() {
    for surface in surfaces() {
        let world = World::new(surface.clone());
        let s = skill(&surface, Pattern::Line, (-0.2, 0.0), 0.0, 0.2);
        let tr = run(&world, &s, EnergyTank::scalar(200.0, 0.1).unwrap(), &SimConfig::default());
        // Mean normal contact force over the steady part of the run.
        let steady: Vec<&_> = tr.rows.iter().filter(|r| r.t >= 1.0).collect();
        let mean = steady
            .iter()
            .map(|r| {
                let n = world.surface.jet(r.x[0], r.x[1]).normal();
                r.f_ext.fixed_rows::<3>(0).dot(&n)
            })
            .sum::<f64>()
            / steady.len() as f64;
        assert!((mean - 5.0).abs() < 0.25, "{:?}: {mean} N", surface.kind);
    }
}

#[test]
fn scheduled_tank_stops_when_the_plan_runs_out() {
    let surface = SurfaceModel::planar();
    let world = World::new(surface.clone());
    let s = skill(&surface, Pattern::Line, (-0.2, 0.0), 0.0, 0.05);
    let short = PowerTrace::new(SKILL_DT, vec![0.2; s.len() / 2]);
    let tr = run(&world, &s, EnergyTank::scheduled(&short, 0.2, 0.1).unwrap(), &SimConfig::default());
    assert_eq!(tr.stop, etank_core::StopReason::ScheduleExhausted);
    assert_eq!(tr.rows.len(), s.len() / 2);
    assert!(tr.bookkeeping_residual().abs() < 1e-12);
}

#[test]
fn skill_file_round_trip_replays_identically() {
    let surface = SurfaceModel::curved(0.02, 10.0);
    let world = World::new(surface.clone());
    let s = skill(&surface, Pattern::RandomWalk, (0.0, 0.1), 1.0, 0.05);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("skill.csv");
    save_skill(&s, &path).unwrap();
    let back = load_skill(&path).unwrap();
    let sim = SimConfig { seed: 4, ..SimConfig::default() };
    let a = run(&world, &s, EnergyTank::scalar(200.0, 0.1).unwrap(), &sim);
    let b = run(&world, &back, EnergyTank::scalar(200.0, 0.1).unwrap(), &sim);
    assert_eq!(a.consumed_power(), b.consumed_power());
}
