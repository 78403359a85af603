//! Evaluation measures over predicted and ground-truth pose sequences.
//!
//! Positions are reported in centimeters, angles in degrees. Joint errors are
//! taken in the pelvis frame (forward kinematics with an identity root), the
//! pelvis errors on the world-frame root.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{geodesic_angle, matrix_from_rot6d, rotation_vector};
use crate::skeleton::{forward_kinematics, PoseFeatures, Skeleton, FRAME_RATE};

const CM: f64 = 100.0;

/// Contact probabilities at or above this count as contact.
pub const CONTACT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub mjpe: f64,
    pub mjre: f64,
    pub mppe: f64,
    pub mpre: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VelocityErrors {
    /// cm/s
    pub mjlve: f64,
    /// deg/s
    pub mjave: f64,
    pub mplve: f64,
    pub mpave: f64,
    /// Per-joint mean linear velocity error, cm/s.
    pub joint_linear: Vec<f64>,
}

/// Pelvis-frame joint positions and local rotations of one frame, plus the
/// world root transform.
struct Decoded {
    positions: Vec<Vector3<f64>>,
    rotations: Vec<Matrix3<f64>>,
    root_pos: Vector3<f64>,
    root_rot: Matrix3<f64>,
}

fn decode(pose: &PoseFeatures, skeleton: &Skeleton) -> Result<Decoded> {
    let fk = forward_kinematics(skeleton, &pose.local, None)?;
    Ok(Decoded {
        positions: fk.iter().map(|t| t.position).collect(),
        rotations: pose.local.joints.iter().map(|j| matrix_from_rot6d(&j.rot)).collect::<Result<_>>()?,
        root_pos: pose.global.root_pos,
        root_rot: matrix_from_rot6d(&pose.global.root_rot)?,
    })
}

fn decode_pair(pred: &[PoseFeatures], gt: &[PoseFeatures], skeleton: &Skeleton) -> Result<(Vec<Decoded>, Vec<Decoded>)> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension { what: "predicted frames", expected: gt.len(), got: pred.len() });
    }
    let d = |s: &[PoseFeatures]| s.iter().map(|p| decode(p, skeleton)).collect::<Result<Vec<_>>>();
    Ok((d(pred)?, d(gt)?))
}

pub fn pose_errors(pred: &[PoseFeatures], gt: &[PoseFeatures], skeleton: &Skeleton) -> Result<PoseErrors> {
    let (p, g) = decode_pair(pred, gt, skeleton)?;
    if p.is_empty() {
        return Ok(PoseErrors::default());
    }
    let n = p.len() as f64;
    let j = skeleton.len() as f64;
    let mut e = PoseErrors::default();
    for (a, b) in p.iter().zip(&g) {
        e.mjpe += a.positions.iter().zip(&b.positions).map(|(x, y)| (x - y).norm()).sum::<f64>() / j;
        e.mjre += a.rotations.iter().zip(&b.rotations).map(|(x, y)| geodesic_angle(x, y)).sum::<f64>() / j;
        e.mppe += (a.root_pos - b.root_pos).norm();
        e.mpre += geodesic_angle(&a.root_rot, &b.root_rot);
    }
    Ok(PoseErrors { mjpe: e.mjpe / n * CM, mjre: (e.mjre / n).to_degrees(), mppe: e.mppe / n * CM, mpre: (e.mpre / n).to_degrees() })
}

fn angular_rate(prev: &Matrix3<f64>, cur: &Matrix3<f64>) -> Vector3<f64> {
    rotation_vector(&(prev.transpose() * cur)) * FRAME_RATE
}

/// Errors of backward-difference velocities at the capture rate.
pub fn velocity_errors(pred: &[PoseFeatures], gt: &[PoseFeatures], skeleton: &Skeleton) -> Result<VelocityErrors> {
    let (p, g) = decode_pair(pred, gt, skeleton)?;
    let nj = skeleton.len();
    let mut out = VelocityErrors { joint_linear: vec![0.0; nj], ..Default::default() };
    if p.len() < 2 {
        return Ok(out);
    }
    let steps = (p.len() - 1) as f64;
    for t in 1..p.len() {
        let (a0, a1, b0, b1) = (&p[t - 1], &p[t], &g[t - 1], &g[t]);
        for k in 0..nj {
            let va = (a1.positions[k] - a0.positions[k]) * FRAME_RATE;
            let vb = (b1.positions[k] - b0.positions[k]) * FRAME_RATE;
            let lin = (va - vb).norm();
            out.joint_linear[k] += lin;
            out.mjlve += lin / nj as f64;
            let wa = angular_rate(&a0.rotations[k], &a1.rotations[k]);
            let wb = angular_rate(&b0.rotations[k], &b1.rotations[k]);
            out.mjave += (wa - wb).norm() / nj as f64;
        }
        let va = (a1.root_pos - a0.root_pos) * FRAME_RATE;
        let vb = (b1.root_pos - b0.root_pos) * FRAME_RATE;
        out.mplve += (va - vb).norm();
        let wa = angular_rate(&a0.root_rot, &a1.root_rot);
        let wb = angular_rate(&b0.root_rot, &b1.root_rot);
        out.mpave += (wa - wb).norm();
    }
    out.mjlve *= CM / steps;
    out.mplve *= CM / steps;
    out.mjave = (out.mjave / steps).to_degrees();
    out.mpave = (out.mpave / steps).to_degrees();
    out.joint_linear.iter_mut().for_each(|v| *v *= CM / steps);
    Ok(out)
}

/// `rate^3 * mean ||third difference of world joint positions||^2`, meters.
/// Zero for any motion of constant acceleration.
pub fn jitter(sequence: &[PoseFeatures], skeleton: &Skeleton) -> Result<f64> {
    if sequence.len() < 4 {
        return Err(Error::SequenceTooShort { what: "jitter", needed: 4, got: sequence.len() });
    }
    let world = sequence
        .iter()
        .map(|p| Ok(forward_kinematics(skeleton, &p.local, Some(&p.global))?.into_iter().map(|t| t.position).collect()))
        .collect::<Result<Vec<Vec<Vector3<f64>>>>>()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 3..world.len() {
        for k in 0..skeleton.len() {
            let d3 = world[t][k] - world[t - 1][k] * 3.0 + world[t - 2][k] * 3.0 - world[t - 3][k];
            sum += d3.norm_squared();
            count += 1;
        }
    }
    Ok(FRAME_RATE.powi(3) * sum / count as f64)
}

pub fn contact_labels(probabilities: [f64; 2]) -> [bool; 2] {
    probabilities.map(|p| p >= CONTACT_THRESHOLD)
}

/// Percentage of matching thresholded labels over frames and both feet.
pub fn contact_accuracy(pred: &[[f64; 2]], gt: &[[bool; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension { what: "contact frames", expected: gt.len(), got: pred.len() });
    }
    if pred.is_empty() {
        return Ok(100.0);
    }
    let hits: usize = pred.iter().zip(gt).map(|(p, g)| contact_labels(*p).iter().zip(g).filter(|(a, b)| a == b).count()).sum();
    Ok(100.0 * hits as f64 / (2 * pred.len()) as f64)
}

/// Every measure of one evaluated sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pose: PoseErrors,
    pub velocity: VelocityErrors,
    pub jitter: f64,
    pub contact: f64,
}

pub fn evaluate(pred: &[PoseFeatures], gt: &[PoseFeatures], skeleton: &Skeleton) -> Result<Report> {
    let labels: Vec<[bool; 2]> = gt.iter().map(|p| contact_labels(p.global.contacts)).collect();
    let probs: Vec<[f64; 2]> = pred.iter().map(|p| p.global.contacts).collect();
    Ok(Report {
        pose: pose_errors(pred, gt, skeleton)?,
        velocity: velocity_errors(pred, gt, skeleton)?,
        jitter: if pred.len() >= 4 { jitter(pred, skeleton)? } else { 0.0 },
        contact: contact_accuracy(&probs, &labels)?,
    })
}
