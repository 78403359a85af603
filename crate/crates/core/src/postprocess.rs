//! Contact-driven foot pinning on generated poses.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ik::solve_leg;
use crate::metrics::contact_labels;
use crate::rotation::{matrix_from_rot6d, rot6d_from_matrix};
use crate::skeleton::{forward_kinematics, GlobalPoseFeature, PoseFeatures, Skeleton};

/// Left, right contact flags under the 0.5 threshold (inclusive).
pub fn detect_contacts(global: &GlobalPoseFeature) -> [bool; 2] {
    contact_labels(global.contacts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootIkConfig {
    /// Weight of the raw foot position in the per-frame target blend.
    pub alpha: f64,
}

impl Default for FootIkConfig {
    fn default() -> Self {
        Self { alpha: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectedPose {
    pub pose: PoseFeatures,
    /// Per foot: the target lay outside the leg's reach and was projected onto it.
    pub clamped: [bool; 2],
}

/// World position of the ankle of `foot` in `pose`.
pub fn foot_position(pose: &PoseFeatures, skeleton: &Skeleton, foot: usize) -> Result<Vector3<f64>> {
    Ok(forward_kinematics(skeleton, &pose.local, Some(&pose.global))?[foot].position)
}

/// Pins every contacting foot toward `lerp(previous corrected, raw, alpha)`
/// with two-bone IK on its hip and knee. Offsets, the root and non-contacting
/// legs are left as they are.
pub fn apply_foot_ik(
    pose: &PoseFeatures,
    contacts: [bool; 2],
    previous: Option<&PoseFeatures>,
    skeleton: &Skeleton,
    alpha: f64,
) -> Result<CorrectedPose> {
    if pose.local.len() != skeleton.len() {
        return Err(Error::Dimension { what: "pose joints", expected: skeleton.len(), got: pose.local.len() });
    }
    let mut out = CorrectedPose { pose: pose.clone(), clamped: [false; 2] };
    let Some(previous) = previous else {
        return Ok(out);
    };
    if !contacts.iter().any(|&c| c) {
        return Ok(out);
    }
    let offsets: Vec<Vector3<f64>> = pose.local.joints.iter().map(|j| j.pos).collect();
    let mut rotations = pose.local.joints.iter().map(|j| matrix_from_rot6d(&j.rot)).collect::<Result<Vec<Matrix3<f64>>>>()?;
    let root = pose.global.root_transform()?;
    let raw = forward_kinematics(skeleton, &pose.local, Some(&pose.global))?;
    for (side, foot) in skeleton.feet().into_iter().enumerate() {
        if !contacts[side] {
            continue;
        }
        let before = foot_position(previous, skeleton, foot)?;
        let target = before + (raw[foot].position - before) * alpha;
        let solve = solve_leg(skeleton, &offsets, &mut rotations, &root, foot, &target)?;
        out.clamped[side] = solve.clamped;
        let (hip, knee) = skeleton.leg_chain(foot)?;
        for j in [hip, knee] {
            out.pose.local.joints[j].rot = rot6d_from_matrix(&rotations[j])?;
        }
    }
    Ok(out)
}

/// Stateful wrapper feeding each corrected pose back as the next reference.
#[derive(Clone, Debug, Default)]
pub struct FootCleanup {
    pub config: FootIkConfig,
    previous: Option<PoseFeatures>,
}

impl FootCleanup {
    pub fn new(config: FootIkConfig) -> Self {
        Self { config, previous: None }
    }

    pub fn apply(&mut self, pose: &PoseFeatures, skeleton: &Skeleton) -> Result<CorrectedPose> {
        let contacts = detect_contacts(&pose.global);
        let out = apply_foot_ik(pose, contacts, self.previous.as_ref(), skeleton, self.config.alpha)?;
        self.previous = Some(out.pose.clone());
        Ok(out)
    }
}
