//! Analytic two-bone leg inverse kinematics.

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::rotation::axis_angle;
use crate::skeleton::{compose_chain, Skeleton};

/// Slack kept between the target distance and the fully stretched or folded leg.
const REACH_MARGIN: f64 = 1e-9;

/// Outcome of one leg solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegSolve {
    /// The target lay outside the reachable shell and was projected onto it.
    pub clamped: bool,
    /// Ankle position actually reached.
    pub reached: Vector3<f64>,
}

/// Moves the ankle of `foot` to `target` by rewriting the local rotations of
/// its hip and knee in `rotations`. Offsets and every other joint's local
/// rotation stay untouched, so bone lengths are preserved by construction.
///
/// The knee turns about its current bend axis; a straight leg bends about the
/// hip's world X axis.
pub fn solve_leg(
    skeleton: &Skeleton,
    offsets: &[Vector3<f64>],
    rotations: &mut [Matrix3<f64>],
    root: &crate::skeleton::JointTransform,
    foot: usize,
    target: &Vector3<f64>,
) -> Result<LegSolve> {
    let (hip, knee) = skeleton.leg_chain(foot)?;
    let world = compose_chain(skeleton, offsets, rotations, root);
    let (h, k, a) = (world[hip].position, world[knee].position, world[foot].position);
    let thigh = (k - h).norm();
    let shin = (a - k).norm();

    let to_target = target - h;
    let want = to_target.norm();
    let lo = (thigh - shin).abs() + REACH_MARGIN;
    let hi = thigh + shin - REACH_MARGIN;
    let dist = want.clamp(lo, hi);
    let clamped = dist != want;
    if (target - a).norm() < 1e-12 {
        return Ok(LegSolve { clamped: false, reached: a });
    }

    let u = k - h;
    let v = a - k;
    let mut axis = u.cross(&v);
    if axis.norm() < 1e-9 * thigh * shin {
        axis = world[hip].rotation.column(0).into_owned();
    }
    let axis = axis.normalize();
    let cos_bend = |c: f64| ((c * c - thigh * thigh - shin * shin) / (2.0 * thigh * shin)).clamp(-1.0, 1.0);
    let bend_now = u.dot(&v) / (thigh * shin);
    let delta = cos_bend(dist).acos() - bend_now.clamp(-1.0, 1.0).acos();
    let knee_turn = axis_angle(axis, delta);
    let a_bent = k + knee_turn * v;

    let dir_target = if want > 0.0 { to_target / want } else { (a_bent - h).normalize() };
    let hip_turn = minimal_rotation(&(a_bent - h), &dir_target);
    let reached = h + hip_turn * (a_bent - h);

    let parent_rot = skeleton.parent(hip).map_or(root.rotation, |p| world[p].rotation);
    let hip_world = hip_turn * world[hip].rotation;
    let knee_world = hip_turn * knee_turn * world[knee].rotation;
    rotations[hip] = parent_rot.transpose() * hip_world;
    rotations[knee] = hip_world.transpose() * knee_world;
    Ok(LegSolve { clamped, reached })
}

/// Smallest rotation taking direction `from` onto direction `to`.
pub fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let f = from.normalize();
    let t = to.normalize();
    let c = f.cross(&t);
    let s = c.norm();
    let d = f.dot(&t);
    if s < 1e-12 {
        if d > 0.0 {
            return Matrix3::identity();
        }
        // antiparallel: half turn about any perpendicular
        let helper = if f.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        return axis_angle(f.cross(&helper).normalize(), core::f64::consts::PI);
    }
    axis_angle(c / s, s.atan2(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::rot_x;
    use crate::skeleton::{Joint, JointTransform};
    use alloc::vec;
    use alloc::vec::Vec;

    fn setup() -> (Skeleton, Vec<Vector3<f64>>, Vec<Matrix3<f64>>, JointTransform) {
        let s = Skeleton::default_humanoid();
        let offsets: Vec<_> = s.joints().iter().map(Joint::offset).collect();
        let mut rots = vec![Matrix3::identity(); s.len()];
        rots[s.index_of("LeftLeg").unwrap()] = rot_x(0.3);
        let root = JointTransform { position: Vector3::new(0.0, 0.9, 0.0), rotation: Matrix3::identity() };
        (s, offsets, rots, root)
    }

    #[test]
    fn reaches_reachable_targets_and_keeps_bones() {
        let (s, offsets, mut rots, root) = setup();
        let foot = s.left_foot();
        let target = Vector3::new(0.15, 0.15, 0.2);
        let out = solve_leg(&s, &offsets, &mut rots, &root, foot, &target).unwrap();
        assert!(!out.clamped);
        let w = compose_chain(&s, &offsets, &rots, &root);
        assert!((w[foot].position - target).norm() < 1e-9);
        assert!((out.reached - target).norm() < 1e-9);
        for r in &rots {
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn straight_leg_bends_backward() {
        let (s, offsets, mut rots, root) = setup();
        rots.iter_mut().for_each(|r| *r = Matrix3::identity());
        let foot = s.left_foot();
        let w = compose_chain(&s, &offsets, &rots, &root);
        let target = w[foot].position + Vector3::new(0.0, 0.1, 0.0);
        solve_leg(&s, &offsets, &mut rots, &root, foot, &target).unwrap();
        let w = compose_chain(&s, &offsets, &rots, &root);
        assert!((w[foot].position - target).norm() < 1e-9);
        let knee = w[s.index_of("LeftLeg").unwrap()].position;
        assert!(knee.z > 0.0, "knee should move forward, got {knee}");
    }

    #[test]
    fn unreachable_targets_clamp() {
        let (s, offsets, mut rots, root) = setup();
        let out = solve_leg(&s, &offsets, &mut rots, &root, s.left_foot(), &Vector3::new(0.1, -2.0, 0.0)).unwrap();
        assert!(out.clamped);
        let w = compose_chain(&s, &offsets, &rots, &root);
        assert!((w[s.left_foot()].position - out.reached).norm() < 1e-9);
    }

    #[test]
    fn minimal_rotation_maps_directions() {
        let cases = [
            (Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)),
            (Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, -2.0, -3.0)),
            (Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 2.0)),
        ];
        for (f, t) in cases {
            let r = minimal_rotation(&f, &t);
            assert!((r * f.normalize() - t.normalize()).norm() < 1e-12);
        }
    }
}
