use approx::assert_abs_diff_eq;
use movin_core::metrics::{contact_accuracy, evaluate, jitter, pose_errors, velocity_errors};
use movin_core::rotation::{axis_angle, matrix_from_rot6d, rot6d_from_matrix, rot_y};
use movin_core::skeleton::{PoseFeatures, Skeleton};
use movin_core::Error;
use nalgebra::Vector3;
use proptest::prelude::*;

const HEAD: usize = 4;

fn skeleton() -> Skeleton {
    Skeleton::default_humanoid()
}

fn rest() -> PoseFeatures {
    PoseFeatures::rest(&skeleton(), Vector3::new(0.3, 0.95, 2.8), 0.4)
}

fn still(frames: usize) -> Vec<PoseFeatures> {
    vec![rest(); frames]
}

/// Poses with every joint rotated about a seeded axis, for property checks.
fn bent(angles: &[f64]) -> PoseFeatures {
    let mut p = rest();
    for (k, j) in p.local.joints.iter_mut().enumerate() {
        let a = angles[k % angles.len()];
        let axis = Vector3::new(a.sin(), 1.0, a.cos());
        j.rot = rot6d_from_matrix(&axis_angle(axis, a)).unwrap();
    }
    p
}

#[test]
fn identical_sequences_score_zero() {
    let seq: Vec<_> = (0..6).map(|t| bent(&[0.1 * t as f64, -0.3, 0.7])).collect();
    let r = evaluate(&seq, &seq, &skeleton()).unwrap();
    assert_eq!(r.pose.mjpe, 0.0);
    assert_eq!(r.pose.mppe, 0.0);
    assert_abs_diff_eq!(r.pose.mjre, 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(r.pose.mpre, 0.0, epsilon = 1e-6);
    assert_eq!(r.velocity.mjlve, 0.0);
    assert_abs_diff_eq!(r.velocity.mjave, 0.0, epsilon = 1e-6);
    assert_eq!(r.contact, 100.0);
}

#[test]
fn centimeter_shift_in_pelvis_frame() {
    let gt = still(3);
    let mut pred = gt.clone();
    for p in &mut pred {
        p.local.joints[0].pos.x += 0.01;
    }
    let e = pose_errors(&pred, &gt, &skeleton()).unwrap();
    assert_abs_diff_eq!(e.mjpe, 1.0, epsilon = 1e-9);
    assert_eq!(e.mppe, 0.0);
}

#[test]
fn one_joint_rotated_ten_degrees() {
    let gt = still(2);
    let mut pred = gt.clone();
    for p in &mut pred {
        p.local.joints[HEAD].rot = rot6d_from_matrix(&axis_angle(Vector3::x(), 10f64.to_radians())).unwrap();
    }
    let e = pose_errors(&pred, &gt, &skeleton()).unwrap();
    assert_abs_diff_eq!(e.mjre, 10.0 / 21.0, epsilon = 1e-9);
}

#[test]
fn root_errors_use_world_pelvis() {
    let gt = still(2);
    let mut pred = gt.clone();
    for p in &mut pred {
        p.global.root_pos.z += 0.05;
        p.global.root_rot = rot6d_from_matrix(&(rot_y(0.4) * rot_y(30f64.to_radians()))).unwrap();
    }
    let e = pose_errors(&pred, &gt, &skeleton()).unwrap();
    assert_abs_diff_eq!(e.mppe, 5.0, epsilon = 1e-9);
    assert_abs_diff_eq!(e.mpre, 30.0, epsilon = 1e-9);
    assert_eq!(e.mjpe, 0.0);
}

#[test]
fn length_mismatch_is_an_error() {
    let err = pose_errors(&still(3), &still(2), &skeleton()).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(velocity_errors(&still(1), &still(2), &skeleton()).is_err());
    assert!(contact_accuracy(&[[1.0, 0.0]], &[]).is_err());
}

#[test]
fn static_sequences_have_no_velocity_error() {
    let v = velocity_errors(&still(5), &still(5), &skeleton()).unwrap();
    assert_eq!((v.mjlve, v.mjave, v.mplve, v.mpave), (0.0, 0.0, 0.0, 0.0));
}

fn drifting_head(frames: usize) -> Vec<PoseFeatures> {
    (0..frames)
        .map(|t| {
            let mut p = rest();
            p.local.joints[HEAD].pos.x += 0.01 * t as f64;
            p
        })
        .collect()
}

#[test]
fn one_centimeter_per_frame_drift() {
    let pred = drifting_head(6);
    let v = velocity_errors(&pred, &still(6), &skeleton()).unwrap();
    assert_abs_diff_eq!(v.joint_linear[HEAD], 20.0, epsilon = 1e-9);
    for (k, e) in v.joint_linear.iter().enumerate() {
        if k != HEAD {
            assert_eq!(*e, 0.0, "joint {k}");
        }
    }
    assert_abs_diff_eq!(v.mjlve, 20.0 / 21.0, epsilon = 1e-9);
}

#[test]
fn velocity_error_is_symmetric() {
    let a = drifting_head(5);
    let b: Vec<_> = (0..5).map(|t| bent(&[0.05 * t as f64, 0.2])).collect();
    let ab = velocity_errors(&a, &b, &skeleton()).unwrap();
    let ba = velocity_errors(&b, &a, &skeleton()).unwrap();
    assert_abs_diff_eq!(ab.mjlve, ba.mjlve, epsilon = 1e-12);
    assert_abs_diff_eq!(ab.mjave, ba.mjave, epsilon = 1e-9);
    assert_abs_diff_eq!(ab.mplve, ba.mplve, epsilon = 1e-12);
}

#[test]
fn jitter_vanishes_on_polynomial_paths() {
    let ramp: Vec<_> = (0..8)
        .map(|t| {
            let mut p = rest();
            p.global.root_pos.x += 0.02 * t as f64;
            p
        })
        .collect();
    assert_abs_diff_eq!(jitter(&ramp, &skeleton()).unwrap(), 0.0, epsilon = 1e-12);
    let parabola: Vec<_> = (0..8)
        .map(|t| {
            let mut p = rest();
            p.global.root_pos.z += 0.003 * (t * t) as f64;
            p
        })
        .collect();
    assert_abs_diff_eq!(jitter(&parabola, &skeleton()).unwrap(), 0.0, epsilon = 1e-9);
}

#[test]
fn alternating_joint_jitter_matches_closed_form() {
    let seq: Vec<_> = (0..7)
        .map(|t| {
            let mut p = rest();
            p.local.joints[HEAD].pos.x += if t % 2 == 0 { 0.01 } else { -0.01 };
            p
        })
        .collect();
    // third difference is +-8 * 1 cm on one joint of 21, every frame
    let expected = 20f64.powi(3) * 0.08f64.powi(2) / 21.0;
    assert_abs_diff_eq!(jitter(&seq, &skeleton()).unwrap(), expected, epsilon = 1e-9);
}

#[test]
fn jitter_needs_four_frames() {
    let err = jitter(&still(3), &skeleton()).unwrap_err();
    assert!(matches!(err, Error::SequenceTooShort { needed: 4, got: 3, .. }));
}

#[test]
fn contact_accuracy_counts_labels() {
    let gt: Vec<[bool; 2]> = (0..10).map(|t| [t % 2 == 0, t % 3 == 0]).collect();
    let exact: Vec<[f64; 2]> = gt.iter().map(|g| g.map(|b| if b { 0.9 } else { 0.1 })).collect();
    assert_eq!(contact_accuracy(&exact, &gt).unwrap(), 100.0);
    let inverted: Vec<[f64; 2]> = exact.iter().map(|p| p.map(|v| 1.0 - v)).collect();
    assert_eq!(contact_accuracy(&inverted, &gt).unwrap(), 0.0);
    let mut one_off = exact.clone();
    one_off[4][1] = 1.0 - one_off[4][1];
    assert_eq!(contact_accuracy(&one_off, &gt).unwrap(), 95.0);
    // the threshold itself counts as contact
    assert_eq!(contact_accuracy(&[[0.5, 0.4999]], &[[true, false]]).unwrap(), 100.0);
}

fn rigidly_moved(seq: &[PoseFeatures], yaw: f64, shift: Vector3<f64>) -> Vec<PoseFeatures> {
    let r = rot_y(yaw);
    seq.iter()
        .map(|p| {
            let mut q = p.clone();
            q.global.root_pos = r * p.global.root_pos + shift;
            q.global.root_rot = rot6d_from_matrix(&(r * matrix_from_rot6d(&p.global.root_rot).unwrap())).unwrap();
            q
        })
        .collect()
}

proptest! {
    #[test]
    fn errors_are_non_negative(a in prop::collection::vec(-1.5..1.5f64, 3), b in prop::collection::vec(-1.5..1.5f64, 3)) {
        let pred = vec![bent(&a), bent(&b), bent(&a)];
        let gt = vec![bent(&b), bent(&a), bent(&a)];
        let r = evaluate(&pred, &gt, &skeleton()).unwrap();
        for v in [r.pose.mjpe, r.pose.mjre, r.pose.mppe, r.pose.mpre, r.velocity.mjlve, r.velocity.mjave] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn joint_position_error_ignores_rigid_world_motion(
        a in prop::collection::vec(-1.5..1.5f64, 4),
        b in prop::collection::vec(-1.5..1.5f64, 4),
        yaw in -3.0..3.0f64,
        dx in -2.0..2.0f64,
        dz in -2.0..2.0f64,
    ) {
        let pred = vec![bent(&a), bent(&b)];
        let gt = vec![bent(&b), bent(&a)];
        let before = pose_errors(&pred, &gt, &skeleton()).unwrap();
        let shift = Vector3::new(dx, 0.0, dz);
        let after = pose_errors(&rigidly_moved(&pred, yaw, shift), &rigidly_moved(&gt, yaw, shift), &skeleton()).unwrap();
        prop_assert!((before.mjpe - after.mjpe).abs() < 1e-9);
        prop_assert!((before.mjre - after.mjre).abs() < 1e-9);
    }
}
