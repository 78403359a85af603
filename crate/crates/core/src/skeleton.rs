//! Skeleton model, pose feature vectors and forward kinematics.
//!
//! World frame is right-handed and Y-up, in meters. A character faces its
//! local +Z axis with its left side along +X.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{matrix_from_rot6d, rot6d_from_matrix, rotation_vector, Rot6D};

/// Width of the global pose feature: root position, 6-D rotation, linear and
/// angular velocity, and two foot contacts.
pub const GLOBAL_WIDTH: usize = 17;
/// First contact column of the global feature.
pub const CONTACT_START: usize = 15;
/// Per-joint width of the local pose feature.
pub const JOINT_WIDTH: usize = 15;
/// Capture rate of every clip and scan stream, Hz.
pub const FRAME_RATE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// `None` for the root.
    pub parent: Option<usize>,
    /// Translation from the parent joint, meters, in the parent frame.
    pub offset: [f64; 3],
    /// Body part used by graph pooling (torso/head, arms, legs).
    pub body_part: usize,
}

impl Joint {
    pub fn offset(&self) -> Vector3<f64> {
        Vector3::from(self.offset)
    }
}

/// Joint hierarchy in topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<Joint>,
    left_foot: usize,
    right_foot: usize,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, left_foot: usize, right_foot: usize) -> Result<Self> {
        let s = Self { joints, left_foot, right_foot };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSkeleton(m));
        if self.joints.is_empty() {
            return bad("no joints".into());
        }
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || self.joints[0].parent.is_some() {
            return bad(format!("expected exactly one root at index 0, found {roots} roots"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return bad(format!("joint {i} ({}) has parent {p} out of topological order", j.name));
                }
            }
            if !j.offset.iter().all(|v| v.is_finite()) {
                return bad(format!("joint {i} has a non-finite offset"));
            }
        }
        let n = self.joints.len();
        if self.left_foot >= n || self.right_foot >= n || self.left_foot == self.right_foot {
            return bad("foot indices must be valid and distinct".into());
        }
        let parts = self.part_count();
        for p in 0..parts {
            if !self.joints.iter().any(|j| j.body_part == p) {
                return bad(format!("body part {p} has no joints"));
            }
        }
        Ok(())
    }

    /// The bundled 21-joint humanoid.
    pub fn default_humanoid() -> Self {
        const TORSO: usize = 0;
        const L_ARM: usize = 1;
        const R_ARM: usize = 2;
        const L_LEG: usize = 3;
        const R_LEG: usize = 4;
        let spec: [(&str, Option<usize>, [f64; 3], usize); 21] = [
            ("Hips", None, [0.0, 0.0, 0.0], TORSO),
            ("Spine", Some(0), [0.0, 0.10, 0.0], TORSO),
            ("Chest", Some(1), [0.0, 0.20, 0.0], TORSO),
            ("Neck", Some(2), [0.0, 0.22, 0.0], TORSO),
            ("Head", Some(3), [0.0, 0.12, 0.0], TORSO),
            ("LeftShoulder", Some(2), [0.07, 0.17, 0.0], L_ARM),
            ("LeftArm", Some(5), [0.11, 0.0, 0.0], L_ARM),
            ("LeftForeArm", Some(6), [0.27, 0.0, 0.0], L_ARM),
            ("LeftHand", Some(7), [0.25, 0.0, 0.0], L_ARM),
            ("RightShoulder", Some(2), [-0.07, 0.17, 0.0], R_ARM),
            ("RightArm", Some(9), [-0.11, 0.0, 0.0], R_ARM),
            ("RightForeArm", Some(10), [-0.27, 0.0, 0.0], R_ARM),
            ("RightHand", Some(11), [-0.25, 0.0, 0.0], R_ARM),
            ("LeftUpLeg", Some(0), [0.09, -0.05, 0.0], L_LEG),
            ("LeftLeg", Some(13), [0.0, -0.42, 0.0], L_LEG),
            ("LeftFoot", Some(14), [0.0, -0.43, 0.0], L_LEG),
            ("LeftToe", Some(15), [0.0, -0.03, 0.13], L_LEG),
            ("RightUpLeg", Some(0), [-0.09, -0.05, 0.0], R_LEG),
            ("RightLeg", Some(17), [0.0, -0.42, 0.0], R_LEG),
            ("RightFoot", Some(18), [0.0, -0.43, 0.0], R_LEG),
            ("RightToe", Some(19), [0.0, -0.03, 0.13], R_LEG),
        ];
        let joints = spec
            .iter()
            .map(|(name, parent, offset, part)| Joint { name: name.to_string(), parent: *parent, offset: *offset, body_part: *part })
            .collect();
        Self::new(joints, 15, 19).expect("bundled skeleton is valid")
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn left_foot(&self) -> usize {
        self.left_foot
    }

    pub fn right_foot(&self) -> usize {
        self.right_foot
    }

    pub fn feet(&self) -> [usize; 2] {
        [self.left_foot, self.right_foot]
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.joints[joint].parent
    }

    /// Parent indices with `-1` for the root.
    pub fn parent_indices(&self) -> Vec<isize> {
        self.joints.iter().map(|j| j.parent.map_or(-1, |p| p as isize)).collect()
    }

    pub fn part_count(&self) -> usize {
        self.joints.iter().map(|j| j.body_part).max().map_or(0, |m| m + 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Copy with every offset scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for j in &mut s.joints {
            for v in &mut j.offset {
                *v *= factor;
            }
        }
        s
    }

    /// World transforms of the rest pose with the root at the origin.
    pub fn rest_transforms(&self) -> Vec<JointTransform> {
        let rots = vec![Matrix3::identity(); self.len()];
        let offsets: Vec<Vector3<f64>> = self.joints.iter().map(Joint::offset).collect();
        compose_chain(self, &offsets, &rots, &JointTransform::identity())
    }

    /// Height of the root above the lowest joint in the rest pose.
    pub fn rest_root_height(&self) -> f64 {
        -self.rest_transforms().iter().map(|t| t.position.y).fold(f64::INFINITY, f64::min)
    }

    /// Hip and knee indices above a foot joint.
    pub fn leg_chain(&self, foot: usize) -> Result<(usize, usize)> {
        let knee = self.parent(foot).ok_or(Error::NoLegChain(foot))?;
        let hip = self.parent(knee).ok_or(Error::NoLegChain(foot))?;
        Ok((hip, knee))
    }
}

/// World (or root-relative) placement of one joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTransform {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl JointTransform {
    pub fn identity() -> Self {
        Self { position: Vector3::zeros(), rotation: Matrix3::identity() }
    }
}

/// One joint's slice of the local feature: parent-relative position,
/// 6-D rotation, and their rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointFeature {
    pub pos: Vector3<f64>,
    pub rot: Rot6D,
    pub linvel: Vector3<f64>,
    pub angvel: Vector3<f64>,
}

impl JointFeature {
    pub fn to_array(&self) -> [f64; JOINT_WIDTH] {
        let mut out = [0.0; JOINT_WIDTH];
        out[0..3].copy_from_slice(self.pos.as_slice());
        out[3..9].copy_from_slice(&self.rot.0);
        out[9..12].copy_from_slice(self.linvel.as_slice());
        out[12..15].copy_from_slice(self.angvel.as_slice());
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            pos: Vector3::new(v[0], v[1], v[2]),
            rot: Rot6D::from_slice(&v[3..9]),
            linvel: Vector3::new(v[9], v[10], v[11]),
            angvel: Vector3::new(v[12], v[13], v[14]),
        }
    }
}

/// Per-joint local pose, `n_j x 15`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPoseFeature {
    pub joints: Vec<JointFeature>,
}

impl LocalPoseFeature {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|j| j.to_array()).collect()
    }

    pub fn from_slice(v: &[f64], n_joints: usize) -> Result<Self> {
        if v.len() != n_joints * JOINT_WIDTH {
            return Err(Error::Dimension { what: "local pose feature", expected: n_joints * JOINT_WIDTH, got: v.len() });
        }
        Ok(Self { joints: v.chunks_exact(JOINT_WIDTH).map(JointFeature::from_slice).collect() })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Root transform, its rates, and foot contacts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalPoseFeature {
    pub root_pos: Vector3<f64>,
    pub root_rot: Rot6D,
    pub root_linvel: Vector3<f64>,
    pub root_angvel: Vector3<f64>,
    /// Left, right contact in `[0, 1]`.
    pub contacts: [f64; 2],
}

impl GlobalPoseFeature {
    pub fn to_array(&self) -> [f64; GLOBAL_WIDTH] {
        let mut out = [0.0; GLOBAL_WIDTH];
        out[0..3].copy_from_slice(self.root_pos.as_slice());
        out[3..9].copy_from_slice(&self.root_rot.0);
        out[9..12].copy_from_slice(self.root_linvel.as_slice());
        out[12..15].copy_from_slice(self.root_angvel.as_slice());
        out[15] = self.contacts[0];
        out[16] = self.contacts[1];
        out
    }

    /// Parses 17 values; contacts are clamped to `[0, 1]`.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != GLOBAL_WIDTH {
            return Err(Error::Dimension { what: "global pose feature", expected: GLOBAL_WIDTH, got: v.len() });
        }
        Ok(Self {
            root_pos: Vector3::new(v[0], v[1], v[2]),
            root_rot: Rot6D::from_slice(&v[3..9]),
            root_linvel: Vector3::new(v[9], v[10], v[11]),
            root_angvel: Vector3::new(v[12], v[13], v[14]),
            contacts: [v[15].clamp(0.0, 1.0), v[16].clamp(0.0, 1.0)],
        })
    }

    pub fn root_transform(&self) -> Result<JointTransform> {
        Ok(JointTransform { position: self.root_pos, rotation: matrix_from_rot6d(&self.root_rot)? })
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// A full pose sample: global plus local feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFeatures {
    pub global: GlobalPoseFeature,
    pub local: LocalPoseFeature,
}

impl PoseFeatures {
    /// Flattened `[g (17), x (n_j * 15)]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.global.to_array().to_vec();
        v.extend(self.local.to_vec());
        v
    }

    pub fn from_slice(v: &[f64], n_joints: usize) -> Result<Self> {
        let expected = GLOBAL_WIDTH + n_joints * JOINT_WIDTH;
        if v.len() != expected {
            return Err(Error::Dimension { what: "pose features", expected, got: v.len() });
        }
        Ok(Self {
            global: GlobalPoseFeature::from_slice(&v[..GLOBAL_WIDTH])?,
            local: LocalPoseFeature::from_slice(&v[GLOBAL_WIDTH..], n_joints)?,
        })
    }

    pub fn width(n_joints: usize) -> usize {
        GLOBAL_WIDTH + n_joints * JOINT_WIDTH
    }

    pub fn is_finite(&self) -> bool {
        self.global.is_finite() && self.local.is_finite()
    }

    /// Rest pose: identity local rotations, skeleton offsets, zero rates, root
    /// at `root_pos` rotated by `yaw` about +Y, no contacts.
    pub fn rest(skeleton: &Skeleton, root_pos: Vector3<f64>, yaw: f64) -> Self {
        let root_rot = rot6d_from_matrix(&crate::rotation::rot_y(yaw)).expect("yaw is a rotation");
        let local = LocalPoseFeature {
            joints: skeleton
                .joints()
                .iter()
                .map(|j| JointFeature { pos: j.offset(), rot: Rot6D::IDENTITY, linvel: Vector3::zeros(), angvel: Vector3::zeros() })
                .collect(),
        };
        Self {
            global: GlobalPoseFeature {
                root_pos,
                root_rot,
                root_linvel: Vector3::zeros(),
                root_angvel: Vector3::zeros(),
                contacts: [0.0, 0.0],
            },
            local,
        }
    }
}

/// One 20 Hz sample of a clip: root world transform plus local joint rotations.
/// `joint_rotations[0]` is the root joint's rotation inside the root frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame {
    pub root_position: Vector3<f64>,
    pub root_rotation: Matrix3<f64>,
    pub joint_rotations: Vec<Matrix3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub skeleton: Skeleton,
    pub frames: Vec<MotionFrame>,
    pub frame_rate: f64,
}

impl MotionClip {
    pub fn new(skeleton: Skeleton, frames: Vec<MotionFrame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::ClipTooShort(frames.len()));
        }
        for f in &frames {
            if f.joint_rotations.len() != skeleton.len() {
                return Err(Error::Dimension {
                    what: "motion frame joint rotations",
                    expected: skeleton.len(),
                    got: f.joint_rotations.len(),
                });
            }
        }
        Ok(Self { skeleton, frames, frame_rate: FRAME_RATE })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// World transforms of every joint at `frame`.
    pub fn world_transforms(&self, frame: usize) -> Vec<JointTransform> {
        let f = &self.frames[frame];
        let offsets: Vec<Vector3<f64>> = self.skeleton.joints().iter().map(Joint::offset).collect();
        let root = JointTransform { position: f.root_position, rotation: f.root_rotation };
        compose_chain(&self.skeleton, &offsets, &f.joint_rotations, &root)
    }
}

/// World transforms from per-joint offsets and local rotations under `root`.
pub fn compose_chain(
    skeleton: &Skeleton,
    offsets: &[Vector3<f64>],
    rotations: &[Matrix3<f64>],
    root: &JointTransform,
) -> Vec<JointTransform> {
    let mut out: Vec<JointTransform> = Vec::with_capacity(skeleton.len());
    for (i, j) in skeleton.joints().iter().enumerate() {
        let parent = j.parent.map_or(*root, |p| out[p]);
        out.push(JointTransform { position: parent.position + parent.rotation * offsets[i], rotation: parent.rotation * rotations[i] });
    }
    out
}

/// Joint transforms from a local feature. With `root = None` the root
/// transform is the identity (character space).
pub fn forward_kinematics(skeleton: &Skeleton, local: &LocalPoseFeature, root: Option<&GlobalPoseFeature>) -> Result<Vec<JointTransform>> {
    if local.len() != skeleton.len() {
        return Err(Error::Dimension { what: "local pose joints", expected: skeleton.len(), got: local.len() });
    }
    let root = match root {
        Some(g) => g.root_transform()?,
        None => JointTransform::identity(),
    };
    let offsets: Vec<Vector3<f64>> = local.joints.iter().map(|j| j.pos).collect();
    let rotations = local.joints.iter().map(|j| matrix_from_rot6d(&j.rot)).collect::<Result<Vec<_>>>()?;
    Ok(compose_chain(skeleton, &offsets, &rotations, &root))
}

/// Thresholds of the ground-truth contact rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// Foot joint height below which contact is possible, meters.
    pub height: f64,
    /// Foot joint speed below which contact is possible, m/s.
    pub speed: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self { height: 0.05, speed: 0.15 }
    }
}

/// Per-frame binary `[left, right]` contacts: a foot touches when it is both
/// low and slow. Speeds are backward differences; frame 0 copies frame 1.
pub fn label_foot_contacts(clip: &MotionClip, thresholds: &ContactThresholds) -> Vec<[f64; 2]> {
    let feet = clip.skeleton.feet();
    let positions: Vec<[Vector3<f64>; 2]> = (0..clip.len())
        .map(|t| {
            let w = clip.world_transforms(t);
            [w[feet[0]].position, w[feet[1]].position]
        })
        .collect();
    let speed = |t: usize, k: usize| -> f64 {
        let t = t.max(1).min(positions.len() - 1);
        (positions[t][k] - positions[t - 1][k]).norm() * clip.frame_rate
    };
    (0..clip.len())
        .map(|t| {
            let mut c = [0.0; 2];
            for (k, ck) in c.iter_mut().enumerate() {
                if positions[t][k].y < thresholds.height && speed(t, k) < thresholds.speed {
                    *ck = 1.0;
                }
            }
            c
        })
        .collect()
}

/// Converts a clip into per-frame global and local feature vectors.
pub fn derive_features(clip: &MotionClip, thresholds: &ContactThresholds) -> Result<Vec<PoseFeatures>> {
    let n = clip.len();
    if n < 2 {
        return Err(Error::ClipTooShort(n));
    }
    let rate = clip.frame_rate;
    let contacts = label_foot_contacts(clip, thresholds);
    let offsets: Vec<Vector3<f64>> = clip.skeleton.joints().iter().map(Joint::offset).collect();
    let rate_of = |prev: &Matrix3<f64>, cur: &Matrix3<f64>| rotation_vector(&(cur * prev.transpose())) * rate;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let (p, c) = if t == 0 { (0, 1) } else { (t - 1, t) };
        let (fp, fc) = (&clip.frames[p], &clip.frames[c]);
        let f = &clip.frames[t];
        let global = GlobalPoseFeature {
            root_pos: f.root_position,
            root_rot: rot6d_from_matrix(&f.root_rotation)?,
            root_linvel: (fc.root_position - fp.root_position) * rate,
            root_angvel: rate_of(&fp.root_rotation, &fc.root_rotation),
            contacts: contacts[t],
        };
        let joints = (0..clip.skeleton.len())
            .map(|j| {
                Ok(JointFeature {
                    pos: offsets[j],
                    rot: rot6d_from_matrix(&f.joint_rotations[j])?,
                    // rigid offsets: the parent-relative position never moves
                    linvel: Vector3::zeros(),
                    angvel: rate_of(&fp.joint_rotations[j], &fc.joint_rotations[j]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(PoseFeatures { global, local: LocalPoseFeature { joints } });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{rot_x, rot_z};
    use core::f64::consts::FRAC_PI_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(offsets: &[[f64; 3]]) -> Skeleton {
        let joints = offsets
            .iter()
            .enumerate()
            .map(|(i, o)| Joint { name: format!("j{i}"), parent: if i == 0 { None } else { Some(i - 1) }, offset: *o, body_part: 0 })
            .collect();
        Skeleton::new(joints, 0, offsets.len() - 1).unwrap()
    }

    fn local_from(skeleton: &Skeleton, rots: &[Matrix3<f64>]) -> LocalPoseFeature {
        LocalPoseFeature {
            joints: skeleton
                .joints()
                .iter()
                .zip(rots)
                .map(|(j, r)| JointFeature {
                    pos: j.offset(),
                    rot: rot6d_from_matrix(r).unwrap(),
                    linvel: Vector3::zeros(),
                    angvel: Vector3::zeros(),
                })
                .collect(),
        }
    }

    #[test]
    fn default_skeleton_shape() {
        let s = Skeleton::default_humanoid();
        assert_eq!(s.len(), 21);
        assert_eq!(s.part_count(), 5);
        assert_eq!(s.joints()[s.left_foot()].name, "LeftFoot");
        assert!((s.rest_root_height() - 0.93).abs() < 1e-12);
        assert_eq!(s.leg_chain(s.left_foot()).unwrap(), (13, 14));
    }

    #[test]
    fn invalid_skeletons_are_rejected() {
        let j = |parent, part| Joint { name: "x".into(), parent, offset: [0.0; 3], body_part: part };
        assert!(Skeleton::new(vec![j(None, 0), j(Some(1), 0)], 0, 1).is_err());
        assert!(Skeleton::new(vec![j(None, 0), j(None, 0)], 0, 1).is_err());
        assert!(Skeleton::new(vec![j(None, 0), j(Some(0), 0)], 1, 1).is_err());
        assert!(Skeleton::new(vec![j(None, 0), j(Some(0), 2)], 0, 1).is_err());
        let mut bad = j(Some(0), 0);
        bad.offset[1] = f64::NAN;
        assert!(Skeleton::new(vec![j(None, 0), bad], 0, 1).is_err());
    }

    #[test]
    fn two_joint_chain_examples() {
        let s = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let id = [Matrix3::identity(); 2];
        let fk = forward_kinematics(&s, &local_from(&s, &id), None).unwrap();
        assert!((fk[1].position - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);

        let rotated = [rot_z(FRAC_PI_2), Matrix3::identity()];
        let fk = forward_kinematics(&s, &local_from(&s, &rotated), None).unwrap();
        assert!((fk[1].position - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);

        let identity_root = PoseFeatures::rest(&s, Vector3::zeros(), 0.0).global;
        let with_root = forward_kinematics(&s, &local_from(&s, &rotated), Some(&identity_root)).unwrap();
        assert_eq!(with_root, fk);
    }

    #[test]
    fn fk_rejects_dimension_mismatch() {
        let s = chain(&[[0.0; 3], [0.0, 1.0, 0.0]]);
        let one = chain(&[[0.0; 3], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let local = local_from(&one, &[Matrix3::identity(); 3]);
        assert!(matches!(forward_kinematics(&s, &local, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fk_matches_explicit_composition_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let offs: Vec<[f64; 3]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let s = chain(&offs);
            let rots: Vec<Matrix3<f64>> = (0..3).map(|_| rot_z(rng.random_range(-3.0..3.0)) * rot_x(rng.random_range(-3.0..3.0))).collect();
            let fk = forward_kinematics(&s, &local_from(&s, &rots), None).unwrap();
            // explicit homogeneous composition
            let hom = |r: &Matrix3<f64>, t: [f64; 3]| {
                let mut m = nalgebra::Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
                m[(0, 3)] = t[0];
                m[(1, 3)] = t[1];
                m[(2, 3)] = t[2];
                m
            };
            let mut acc = nalgebra::Matrix4::identity();
            for j in 0..3 {
                acc *= hom(&rots[j], offs[j]);
                let p = Vector3::new(acc[(0, 3)], acc[(1, 3)], acc[(2, 3)]);
                assert!((p - fk[j].position).norm() < 1e-12);
            }
        }
    }

    fn static_clip(frames: usize) -> MotionClip {
        let s = Skeleton::default_humanoid();
        let h = s.rest_root_height();
        let frame = MotionFrame {
            root_position: Vector3::new(0.0, h, 3.0),
            root_rotation: Matrix3::identity(),
            joint_rotations: vec![Matrix3::identity(); s.len()],
        };
        MotionClip::new(s, vec![frame; frames]).unwrap()
    }

    #[test]
    fn static_clip_has_zero_velocities_and_full_contact() {
        let clip = static_clip(10);
        let feats = derive_features(&clip, &ContactThresholds::default()).unwrap();
        for f in &feats {
            assert_eq!(f.global.root_linvel, Vector3::zeros());
            assert_eq!(f.global.root_angvel, Vector3::zeros());
            assert!(f.local.joints.iter().all(|j| j.linvel == Vector3::zeros() && j.angvel == Vector3::zeros()));
            assert_eq!(f.global.contacts, [1.0, 1.0]);
            assert_eq!(f.global.to_array().len(), 17);
            assert_eq!(f.local.to_vec().len(), 21 * 15);
        }
    }

    #[test]
    fn raised_foot_is_not_in_contact() {
        let mut clip = static_clip(5);
        for f in &mut clip.frames {
            f.root_position.y += 0.5;
        }
        let c = label_foot_contacts(&clip, &ContactThresholds::default());
        assert!(c.iter().all(|c| *c == [0.0, 0.0]));
    }

    #[test]
    fn translating_root_has_unit_velocity() {
        let mut clip = static_clip(8);
        for (t, f) in clip.frames.iter_mut().enumerate() {
            f.root_position.x = t as f64 / FRAME_RATE;
        }
        let feats = derive_features(&clip, &ContactThresholds::default()).unwrap();
        for f in &feats {
            assert!((f.global.root_linvel - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn single_frame_clip_is_rejected() {
        let s = Skeleton::default_humanoid();
        let frame = MotionFrame {
            root_position: Vector3::zeros(),
            root_rotation: Matrix3::identity(),
            joint_rotations: vec![Matrix3::identity(); s.len()],
        };
        assert_eq!(MotionClip::new(s, vec![frame]).unwrap_err(), Error::ClipTooShort(1));
    }

    #[test]
    fn features_round_trip_through_flat_vectors() {
        let clip = static_clip(3);
        let feats = derive_features(&clip, &ContactThresholds::default()).unwrap();
        let flat = feats[1].to_vec();
        assert_eq!(flat.len(), PoseFeatures::width(21));
        assert_eq!(PoseFeatures::from_slice(&flat, 21).unwrap(), feats[1]);
        assert!(PoseFeatures::from_slice(&flat[1..], 21).is_err());
    }
}
