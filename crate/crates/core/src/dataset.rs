//! Synthetic sequences pairing scan streams with pose features.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lidar::{build_history, simulate_scan, BodyProxy, FrameRing, PointCloudFrame, PointCloudHistory, SensorConfig};
use crate::motion::{generate, MotionCategory, MotionFamily, MotionSpec};
use crate::seed;
use crate::skeleton::{derive_features, ContactThresholds, MotionClip, PoseFeatures, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One model input/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub history: PointCloudHistory,
    pub prev: PoseFeatures,
    pub cur: PoseFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub id: String,
    pub category: MotionCategory,
    pub family: MotionFamily,
    pub frame_count: usize,
    pub split: Split,
    pub body_scale: f64,
}

/// A stored sequence: raw scans and flattened pose features, both f32 so
/// that persisting them is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub info: SequenceInfo,
    /// `frame_count x (17 + n_j * 15)`, row-major.
    pub poses: Vec<f32>,
    /// One raw scan per frame, frame index equal to position.
    pub scans: Vec<PointCloudFrame>,
    /// Seed of the per-frame resampling.
    pub resample_seed: u64,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.info.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.info.frame_count == 0
    }

    pub fn pose_width(&self) -> usize {
        self.poses.len() / self.info.frame_count.max(1)
    }

    pub fn pose(&self, t: usize, n_joints: usize) -> Result<PoseFeatures> {
        let w = PoseFeatures::width(n_joints);
        if t >= self.len() {
            return Err(Error::MissingFrame(t as u64));
        }
        let row: Vec<f64> = self.poses[t * w..(t + 1) * w].iter().map(|&v| v as f64).collect();
        PoseFeatures::from_slice(&row, n_joints)
    }

    pub fn history(&self, t: usize, points: usize) -> Result<PointCloudHistory> {
        build_history(t as u64, 0, points, self.resample_seed, |i| self.scans.get(i as usize))
    }

    /// Input/target pair for frame `t >= 1`.
    pub fn example(&self, t: usize, points: usize, n_joints: usize) -> Result<TrainingExample> {
        if t == 0 {
            return Err(Error::SequenceTooShort { what: "an example (needs a previous frame)", needed: 1, got: 0 });
        }
        Ok(TrainingExample { history: self.history(t, points)?, prev: self.pose(t - 1, n_joints)?, cur: self.pose(t, n_joints)? })
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        let w = PoseFeatures::width(n_joints);
        if self.poses.len() != self.info.frame_count * w {
            return Err(Error::Dimension { what: "stored poses", expected: self.info.frame_count * w, got: self.poses.len() });
        }
        if self.scans.len() != self.info.frame_count {
            return Err(Error::Dimension { what: "stored scans", expected: self.info.frame_count, got: self.scans.len() });
        }
        if !self.poses.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!("sequence {} has non-finite poses", self.info.id)));
        }
        for s in &self.scans {
            s.validate()?;
        }
        Ok(())
    }
}

/// In-memory dataset. Sequences are immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub sensor: SensorConfig,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.info.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        self.sensor.validate()?;
        let mut ids: Vec<&str> = self.sequences.iter().map(|s| s.info.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate sequence id".into()));
        }
        for s in &self.sequences {
            s.validate(self.skeleton.len())?;
        }
        Ok(())
    }
}

/// World joint positions per frame of a clip.
fn joint_positions(clip: &MotionClip, t: usize) -> Vec<Vector3<f64>> {
    clip.world_transforms(t).iter().map(|j| j.position).collect()
}

/// Scans every frame of `clip` with a proxy sized to its skeleton.
pub fn scan_clip(clip: &MotionClip, cfg: &SensorConfig, seed: u64) -> Result<Vec<PointCloudFrame>> {
    cfg.validate()?;
    let proxy = BodyProxy::for_skeleton(&clip.skeleton)?;
    Ok((0..clip.len()).map(|t| simulate_scan(&proxy, &joint_positions(clip, t), cfg, t as u64, seed)).collect())
}

/// One example per frame `t >= 1`, with histories assembled from a ring.
pub fn build_examples(clip: &MotionClip, cfg: &SensorConfig, points: usize, seed: u64) -> Result<Vec<TrainingExample>> {
    let features = derive_features(clip, &ContactThresholds::default())?;
    let scans = scan_clip(clip, cfg, seed::derive(seed, &[1]))?;
    let resample = seed::derive(seed, &[2]);
    let mut ring = FrameRing::new(21);
    let mut out = Vec::with_capacity(clip.len() - 1);
    for (t, scan) in scans.into_iter().enumerate() {
        ring.push(scan);
        if t == 0 {
            continue;
        }
        out.push(TrainingExample {
            history: crate::lidar::assemble_history(&ring, t as u64, points, resample)?,
            prev: features[t - 1].clone(),
            cur: features[t].clone(),
        });
    }
    Ok(out)
}

/// Simulates one sequence; `seed` fixes motion, scans and resampling.
pub fn simulate_sequence(id: String, spec: &MotionSpec, cfg: &SensorConfig, split: Split, seed: u64) -> Result<Sequence> {
    let spec = spec.resolved(seed);
    let clip = generate(&spec, seed)?;
    let features = derive_features(&clip, &ContactThresholds::default())?;
    let scans = scan_clip(&clip, cfg, seed::derive(seed, &[1]))?;
    let poses = features.iter().flat_map(|f| f.to_vec()).map(|v| v as f32).collect();
    Ok(Sequence {
        info: SequenceInfo {
            id,
            category: spec.category,
            family: spec.category.family(),
            frame_count: clip.len(),
            split,
            body_scale: spec.body_scale.unwrap_or(1.0),
        },
        poses,
        scans,
        resample_seed: seed::derive(seed, &[2]),
    })
}

/// Every `test_every`-th sequence (1-based) goes to the test split; 0 keeps all in train.
pub fn split_for(index: usize, test_every: usize) -> Split {
    if test_every > 0 && (index + 1) % test_every == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn generate_dataset(specs: &[MotionSpec], cfg: &SensorConfig, test_every: usize, seed: u64) -> Result<Dataset> {
    let sequences = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| simulate_sequence(format!("{i:03}"), spec, cfg, split_for(i, test_every), seed::derive(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { skeleton: Skeleton::default_humanoid(), sensor: cfg.clone(), sequences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::POINTS_PER_FRAME;
    use crate::motion::generate_sequence;

    #[test]
    fn examples_cover_all_but_the_first_frame() {
        let clip = generate_sequence(MotionCategory::Walk, 5.0, 1).unwrap();
        let ex = build_examples(&clip, &SensorConfig::default(), POINTS_PER_FRAME, 4).unwrap();
        assert_eq!(ex.len(), 99);
        let e = &ex[10];
        assert_eq!((e.history.frames(), e.history.points_per_frame()), (5, 256));
        assert_eq!(e.cur.global.to_array().len(), 17);
        assert_eq!(e.cur.local.len(), 21);
        assert_eq!(ex, build_examples(&clip, &SensorConfig::default(), POINTS_PER_FRAME, 4).unwrap());
    }

    #[test]
    fn stored_sequence_rebuilds_ring_histories() {
        let spec = MotionSpec::new(MotionCategory::Squat, 2.0);
        let seq = simulate_sequence("a".into(), &spec, &SensorConfig::default(), Split::Train, 8).unwrap();
        seq.validate(21).unwrap();
        let clip = generate(&spec.resolved(8), 8).unwrap();
        let ex = build_examples(&clip, &SensorConfig::default(), 256, 8).unwrap();
        for t in [1, 7, 30] {
            let e = seq.example(t, 256, 21).unwrap();
            assert_eq!(e.history, ex[t - 1].history);
            // stored poses are f32
            let d: f64 = e.cur.to_vec().iter().zip(ex[t - 1].cur.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-5);
        }
        assert!(seq.example(0, 256, 21).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let specs: Vec<_> = (0..5).map(|_| MotionSpec::new(MotionCategory::Idle, 1.0)).collect();
        let d = generate_dataset(&specs, &SensorConfig::default(), 5, 3).unwrap();
        d.validate().unwrap();
        assert_eq!(d.split(Split::Train).count(), 4);
        assert_eq!(d.split(Split::Test).count(), 1);
        assert!(d.split(Split::Train).all(|s| s.info.id != "004"));
    }
}
