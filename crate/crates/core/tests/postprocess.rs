use movin_core::postprocess::{apply_foot_ik, detect_contacts, foot_position, FootCleanup, FootIkConfig};
use movin_core::rotation::{rot6d_from_matrix, rot_x};
use movin_core::skeleton::{forward_kinematics, GlobalPoseFeature, PoseFeatures, Skeleton};
use nalgebra::Vector3;
use proptest::prelude::*;

fn skeleton() -> Skeleton {
    Skeleton::default_humanoid()
}

/// Standing with both knees bent so small foot targets stay reachable.
fn crouch(root_x: f64, hip: f64, knee: f64) -> PoseFeatures {
    let sk = skeleton();
    let mut p = PoseFeatures::rest(&sk, Vector3::new(root_x, 0.85, 3.0), 0.3);
    for name in ["LeftUpLeg", "RightUpLeg"] {
        p.local.joints[sk.index_of(name).unwrap()].rot = rot6d_from_matrix(&rot_x(-hip)).unwrap();
    }
    for name in ["LeftLeg", "RightLeg"] {
        p.local.joints[sk.index_of(name).unwrap()].rot = rot6d_from_matrix(&rot_x(knee)).unwrap();
    }
    p.global.contacts = [1.0, 1.0];
    p
}

fn bone_lengths(p: &PoseFeatures) -> Vec<f64> {
    let sk = skeleton();
    let w = forward_kinematics(&sk, &p.local, Some(&p.global)).unwrap();
    sk.joints().iter().enumerate().filter_map(|(k, j)| j.parent.map(|q| (w[k].position - w[q].position).norm())).collect()
}

fn horizontal(v: Vector3<f64>) -> f64 {
    (v.x * v.x + v.z * v.z).sqrt()
}

#[test]
fn contact_threshold_is_inclusive() {
    let g = |c: [f64; 2]| GlobalPoseFeature { contacts: c, ..crouch(0.0, 0.3, 0.6).global };
    assert_eq!(detect_contacts(&g([0.7, 0.2])), [true, false]);
    assert_eq!(detect_contacts(&g([0.5, 0.5])), [true, true]);
    assert_eq!(detect_contacts(&g([0.0, 0.0])), [false, false]);
}

#[test]
fn default_alpha() {
    assert_eq!(FootIkConfig::default().alpha, 0.2);
}

#[test]
fn stationary_feet_are_left_alone() {
    let p = crouch(0.1, 0.3, 0.6);
    let out = apply_foot_ik(&p, [true, true], Some(&p), &skeleton(), 0.2).unwrap();
    for (a, b) in out.pose.to_vec().iter().zip(p.to_vec()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(out.clamped, [false, false]);
}

#[test]
fn first_frame_passes_through() {
    let p = crouch(0.1, 0.3, 0.6);
    assert_eq!(apply_foot_ik(&p, [true, true], None, &skeleton(), 0.2).unwrap().pose, p);
}

#[test]
fn zero_alpha_pins_the_foot() {
    let sk = skeleton();
    let before = crouch(0.0, 0.3, 0.6);
    let raw = crouch(0.03, 0.3, 0.6);
    let out = apply_foot_ik(&raw, [true, false], Some(&before), &sk, 0.0).unwrap();
    let [left, right] = sk.feet();
    assert!((foot_position(&out.pose, &sk, left).unwrap() - foot_position(&before, &sk, left).unwrap()).norm() < 1e-4);
    // the other foot and the root move with the raw pose
    assert!((foot_position(&out.pose, &sk, right).unwrap() - foot_position(&raw, &sk, right).unwrap()).norm() < 1e-12);
    assert_eq!(out.pose.global, raw.global);
}

#[test]
fn reachable_targets_are_reached_and_bones_kept() {
    let sk = skeleton();
    let before = crouch(0.0, 0.4, 0.8);
    let raw = crouch(0.05, 0.35, 0.7);
    let out = apply_foot_ik(&raw, [true, true], Some(&before), &sk, 0.5).unwrap();
    for foot in sk.feet() {
        let want = foot_position(&before, &sk, foot).unwrap() * 0.5 + foot_position(&raw, &sk, foot).unwrap() * 0.5;
        assert!((foot_position(&out.pose, &sk, foot).unwrap() - want).norm() < 1e-4);
    }
    for (a, b) in bone_lengths(&out.pose).iter().zip(bone_lengths(&raw)) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(out.clamped, [false, false]);
}

#[test]
fn unreachable_targets_are_clamped_and_flagged() {
    let sk = skeleton();
    let mut before = crouch(0.0, 0.3, 0.6);
    before.global.root_pos.y -= 1.5;
    let raw = crouch(0.0, 0.3, 0.6);
    let out = apply_foot_ik(&raw, [true, true], Some(&before), &sk, 0.0).unwrap();
    assert_eq!(out.clamped, [true, true]);
    assert!(out.pose.is_finite());
    for (a, b) in bone_lengths(&out.pose).iter().zip(bone_lengths(&raw)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn sliding_feet_drift_less_over_a_window() {
    let sk = skeleton();
    let mut cleanup = FootCleanup::new(FootIkConfig::default());
    let raw: Vec<_> = (0..=10).map(|t| crouch(0.01 * t as f64, 0.4, 0.8)).collect();
    let corrected: Vec<_> = raw.iter().map(|p| cleanup.apply(p, &sk).unwrap().pose).collect();
    for foot in sk.feet() {
        let drift = |s: &[PoseFeatures]| horizontal(foot_position(&s[10], &sk, foot).unwrap() - foot_position(&s[0], &sk, foot).unwrap());
        let ratio = drift(&corrected) / drift(&raw);
        // 1 - (1 - alpha)^k summed over ten frames, divided by ten
        let expected = (1..=10).map(|k| 1.0 - 0.8f64.powi(k)).sum::<f64>() / 10.0;
        assert!((ratio - expected).abs() < 1e-3, "ratio {ratio}");
        assert!(ratio <= 0.8);
    }
}

proptest! {
    #[test]
    fn each_step_covers_alpha_of_the_gap(
        hip in 0.2..0.6f64,
        knee in 0.5..1.0f64,
        dx in -0.04..0.04f64,
        dhip in -0.05..0.05f64,
        alpha in 0.0..1.0f64,
    ) {
        let sk = skeleton();
        let before = crouch(0.0, hip, knee);
        let raw = crouch(dx, hip + dhip, knee);
        let out = apply_foot_ik(&raw, [true, true], Some(&before), &sk, alpha).unwrap();
        for foot in sk.feet() {
            let prev = foot_position(&before, &sk, foot).unwrap();
            let gap = (foot_position(&raw, &sk, foot).unwrap() - prev).norm();
            let moved = (foot_position(&out.pose, &sk, foot).unwrap() - prev).norm();
            prop_assert!((moved - alpha * gap).abs() < 1e-4);
        }
        for (a, b) in bone_lengths(&out.pose).iter().zip(bone_lengths(&raw)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
