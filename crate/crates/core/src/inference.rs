//! Frame-by-frame autoregressive generation from a scan stream.

use alloc::vec::Vec;

use nalgebra::Vector3;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::lidar::{assemble_history, FrameRing, PointCloudFrame, HISTORY_OFFSETS};
use crate::network::MovinModel;
use crate::rotation::{matrix_from_rot6d, rot6d_from_matrix, Rot6D};
use crate::seed;
use crate::skeleton::{PoseFeatures, Skeleton};

/// Scans kept by a session: the deepest history offset plus the current frame.
pub const RING_CAPACITY: usize = HISTORY_OFFSETS[HISTORY_OFFSETS.len() - 1] as usize + 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentPolicy {
    /// `z = 0`, the prior mean; outputs depend only on the input stream.
    #[default]
    Zero,
    /// `z ~ N(0, I)` from the session seed.
    Sample,
}

/// Half the side of the square capture arena around the sensor, meters.
pub const ARENA_HALF_WIDTH: f64 = 5.0;

/// Whether a root position lies horizontally inside the 10 m arena.
pub fn within_arena(root: &Vector3<f64>) -> bool {
    root.x.abs() <= ARENA_HALF_WIDTH && root.z.abs() <= ARENA_HALF_WIDTH
}

/// Default first condition: rest pose standing at the horizontal origin,
/// facing the sensor, all rates zero.
pub fn initial_pose(skeleton: &Skeleton) -> PoseFeatures {
    PoseFeatures::rest(skeleton, Vector3::new(0.0, skeleton.rest_root_height(), 0.0), core::f64::consts::PI)
}

/// Live generation state. Each [`Session::step`] advances the window by
/// exactly one frame, whatever index the frame carries.
#[derive(Clone, Debug)]
pub struct Session<'m> {
    model: &'m MovinModel,
    ring: FrameRing,
    prev: PoseFeatures,
    bone_lengths: Vec<f64>,
    policy: LatentPolicy,
    rng: seed::Rng,
    resample_seed: u64,
    steps: u64,
}

pub fn init_session<'m>(model: &'m MovinModel, initial: Option<PoseFeatures>, policy: LatentPolicy, seed: u64) -> Result<Session<'m>> {
    let n = model.config().n_joints;
    let prev = initial.unwrap_or_else(|| initial_pose(model.skeleton()));
    if prev.local.len() != n {
        return Err(Error::Dimension { what: "initial pose joints", expected: n, got: prev.local.len() });
    }
    if !prev.is_finite() {
        return Err(Error::InvalidConfig("initial pose is not finite".into()));
    }
    Ok(Session {
        model,
        ring: FrameRing::new(RING_CAPACITY),
        bone_lengths: prev.local.joints.iter().map(|j| j.pos.norm()).collect(),
        prev,
        policy,
        rng: seed::rng(seed, &[0x1afe]),
        resample_seed: seed::derive(seed, &[0x5a3]),
        steps: 0,
    })
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m MovinModel {
        self.model
    }

    pub fn previous(&self) -> &PoseFeatures {
        &self.prev
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn ring_len(&self) -> usize {
        self.ring.len()
    }

    /// Consumes one scan and returns the pose for it. A malformed scan is
    /// rejected before any state changes.
    pub fn step(&mut self, frame: &PointCloudFrame) -> Result<PoseFeatures> {
        frame.validate()?;
        let t = self.steps;
        let c = self.model.config().channels;
        let z: Vec<f64> = match self.policy {
            LatentPolicy::Zero => alloc::vec![0.0; c],
            LatentPolicy::Sample => {
                let mut rng = self.rng.clone();
                let z = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
                self.rng = rng;
                z
            }
        };
        let mut ring = self.ring.clone();
        ring.push(PointCloudFrame { points: frame.points.clone(), frame_index: t });
        let history = assemble_history(&ring, t, self.model.config().points, self.resample_seed)?;
        let raw = self.model.predict(&history, &self.prev, &z)?;
        let pose = self.sanitize(raw);
        self.ring = ring;
        self.prev = pose.clone();
        self.steps += 1;
        Ok(pose)
    }

    /// Projects every rotation onto a clean 6-D encoding and rescales offsets
    /// to the session's bone lengths, so fed-back conditions never drift in
    /// limb length. Degenerate rotations keep the previous frame's value.
    fn sanitize(&self, mut pose: PoseFeatures) -> PoseFeatures {
        let clean = |r: Rot6D, fallback| matrix_from_rot6d(&r).and_then(|m| rot6d_from_matrix(&m)).unwrap_or(fallback);
        pose.global.root_rot = clean(pose.global.root_rot, self.prev.global.root_rot);
        for (k, j) in pose.local.joints.iter_mut().enumerate() {
            j.rot = clean(j.rot, self.prev.local.joints[k].rot);
            let len = self.bone_lengths[k];
            let n = j.pos.norm();
            j.pos = if len == 0.0 {
                Vector3::zeros()
            } else if n > 1e-9 {
                j.pos * (len / n)
            } else {
                self.prev.local.joints[k].pos
            };
        }
        pose
    }
}

/// Predictions for frames `1..len` of a stored sequence, each conditioned on
/// the ground truth of the frame before, with `z = 0`.
pub fn predict_teacher_forced(model: &MovinModel, sequence: &Sequence) -> Result<Vec<PoseFeatures>> {
    let cfg = model.config();
    let z = alloc::vec![0.0; cfg.channels];
    (1..sequence.len())
        .map(|t| {
            let prev = sequence.pose(t - 1, cfg.n_joints)?;
            model.predict(&sequence.history(t, cfg.points)?, &prev, &z)
        })
        .collect()
}

/// Posterior-mean reconstructions of frames `1..len`, each conditioned on the
/// ground truth of the frame before and encoding the ground truth of its own.
pub fn reconstruct_sequence(model: &MovinModel, sequence: &Sequence) -> Result<Vec<PoseFeatures>> {
    let cfg = model.config();
    (1..sequence.len()).map(|t| model.reconstruct(&sequence.example(t, cfg.points, cfg.n_joints)?)).collect()
}
