use std::f64::consts::PI;

use contiplan::control::{constrained_ik_step, ControllerParams};
use contiplan::pcc::{
    body_points, cables_from_config, config_from_cables, drive_vector, segment_tip_position, state_from_drive,
    tip_position, wrap_angle, RobotModel, RobotState, SegmentConfig,
};
use contiplan::planner::{path_length, smooth_path};
use contiplan::world::{clearance, edge_is_safe, DynamicSphere, Motion, Phase, RadiusLaw, Sphere};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn segment() -> impl Strategy<Value = SegmentConfig> {
    (1e-3..PI, -PI..PI).prop_map(|(t, p)| SegmentConfig::new(t, p))
}

fn state() -> impl Strategy<Value = RobotState> {
    (segment(), segment(), 0.0..200.0).prop_map(|(a, b, z)| RobotState {
        segments: vec![a, b],
        base_z: z,
    })
}

fn phase() -> impl Strategy<Value = Phase> {
    prop_oneof![Just(Phase::Sin), Just(Phase::Cos)]
}

fn moving_sphere() -> impl Strategy<Value = DynamicSphere> {
    (
        vec3(150.0),
        10.0..80.0,
        0.0..1.0,
        phase(),
        0.0..2.0,
        vec3(50.0),
        1.0..30.0,
    )
        .prop_map(|(center, base, frac, phase, rate, half_span, period)| DynamicSphere {
            center,
            motion: Motion::Linear {
                half_span,
                phase,
                period,
            },
            radius: RadiusLaw {
                base,
                amplitude: frac * base,
                phase,
                rate,
            },
        })
}

proptest! {
    #[test]
    fn radius_stays_within_its_band(sphere in moving_sphere(), t in -100.0..100.0f64) {
        let r = sphere.at(t).radius;
        prop_assert!(r >= sphere.min_radius() - 1e-9 && r <= sphere.max_radius() + 1e-9);
        prop_assert!(r > 0.0);
    }

    #[test]
    fn clearance_is_one_lipschitz(
        p in vec3(300.0),
        shift in vec3(20.0),
        center in vec3(200.0),
        radius in 1.0..100.0f64,
    ) {
        let spheres = [Sphere { center, radius }];
        let a = clearance(&[p], &spheres);
        let b = clearance(&[p + shift], &spheres);
        prop_assert!((a - b).abs() <= shift.norm() + 1e-9);
    }

    #[test]
    fn degenerate_edge_is_a_point_check(
        p in vec3(200.0),
        sphere in moving_sphere(),
        t in 0.0..20.0f64,
        margin in 0.0..10.0f64,
    ) {
        let obstacles = [sphere];
        let expected = [t, t + 1.0].iter().all(|&s| sphere.at(s).surface_distance(&p) >= margin);
        prop_assert_eq!(edge_is_safe(&p, &p, &obstacles, (t, t + 1.0), 5.0, margin), expected);
    }

    #[test]
    fn a_larger_margin_never_admits_more(
        a in vec3(200.0),
        b in vec3(200.0),
        sphere in moving_sphere(),
        small in 0.0..10.0f64,
        extra in 0.0..10.0f64,
    ) {
        let obstacles = [sphere];
        if edge_is_safe(&a, &b, &obstacles, (0.0, 1.0), 5.0, small + extra) {
            prop_assert!(edge_is_safe(&a, &b, &obstacles, (0.0, 1.0), 5.0, small));
        }
    }

    #[test]
    fn cables_round_trip(cfg in segment()) {
        let model = RobotModel::two_segment();
        let geom = &model.segments[0];
        let back = config_from_cables(&cables_from_config(&cfg, geom), geom).unwrap();
        prop_assert!((back.theta - cfg.theta).abs() < 1e-9);
        prop_assert!(wrap_angle(back.phi - cfg.phi).abs() < 1e-9);
    }

    #[test]
    fn drive_vector_round_trip(s in state()) {
        let model = RobotModel::two_segment();
        let back = state_from_drive(&drive_vector(&s, &model), &model).unwrap();
        prop_assert!((tip_position(&back, &model) - tip_position(&s, &model)).norm() < 1e-7);
        prop_assert!((back.base_z - s.base_z).abs() < 1e-12);
    }

    #[test]
    fn arc_chord_never_exceeds_the_backbone(cfg in segment()) {
        let model = RobotModel::two_segment();
        let geom = &model.segments[0];
        prop_assert!(segment_tip_position(&cfg, geom).norm() <= geom.length + 1e-9);
    }

    #[test]
    fn body_points_are_spaced_by_at_most_the_arc_step(s in state()) {
        let model = RobotModel::two_segment();
        let points = body_points(&s, &model, 5);
        prop_assert_eq!(points.len(), 10);
        let step = model.segments[0].length / 4.0;
        for w in points.windows(2) {
            prop_assert!((w[1] - w[0]).norm() <= step + 1e-9);
        }
    }

    #[test]
    fn smoothing_keeps_the_endpoints(path in prop::collection::vec(vec3(200.0), 2..8)) {
        let smooth = smooth_path(&path, 10.0);
        prop_assert!((smooth[0] - path[0]).norm() < 1e-12);
        prop_assert!((smooth.last().unwrap() - path.last().unwrap()).norm() < 1e-12);
        prop_assert!(path_length(&smooth) + 1e-9 >= (path.last().unwrap() - path[0]).norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accepted_steps_never_raise_the_objective(
        s in state(),
        offset in vec3(30.0),
        center_shift in vec3(40.0),
        radius in 10.0..50.0f64,
    ) {
        let model = RobotModel::two_segment();
        let params = ControllerParams::default();
        let tip = tip_position(&s, &model);
        let spheres = [Sphere { center: tip + Vector3::new(0.0, 0.0, 60.0) + center_shift, radius }];
        if let Ok(step) = constrained_ik_step(&s, &(tip + offset), &model, &spheres, &params) {
            prop_assert!(step.objective_value <= step.initial_objective);
        }
    }
}
