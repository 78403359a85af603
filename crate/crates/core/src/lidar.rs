//! Virtual solid-state LiDAR: ray grid over a capsule body proxy, fixed-size
//! resampling and the five-frame scan history.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{rot_x, rot_y};
use crate::seed;
use crate::skeleton::Skeleton;

/// Points per resampled frame.
pub const POINTS_PER_FRAME: usize = 256;
/// Frame offsets of the scan history, newest first.
pub const HISTORY_OFFSETS: [u64; 5] = [0, 5, 10, 15, 20];
/// Range noise is truncated at this many standard deviations.
pub const NOISE_CLIP_SIGMAS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Sensor origin in the world, meters.
    pub position: [f64; 3],
    /// Heading about +Y, degrees; 0 looks along +Z.
    pub yaw_deg: f64,
    /// Upward tilt, degrees.
    pub pitch_deg: f64,
    pub h_fov: f64,
    pub v_fov: f64,
    pub h_res: usize,
    pub v_res: usize,
    pub rate: f64,
    pub max_range: f64,
    /// Standard deviation of the range noise, meters.
    pub noise_sigma: f64,
    /// Probability that a ray hitting the body produces a return.
    pub return_probability: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            position: [0.0, 1.0, 0.0],
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            h_fov: 120.0,
            v_fov: 35.0,
            h_res: 192,
            v_res: 56,
            rate: 20.0,
            max_range: 12.0,
            noise_sigma: 0.01,
            return_probability: 0.55,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("sensor: {m}")));
        if !(self.h_fov > 0.0 && self.h_fov < 360.0 && self.v_fov > 0.0 && self.v_fov < 180.0) {
            return bad("field of view out of range");
        }
        if self.h_res == 0 || self.v_res == 0 {
            return bad("resolution must be positive");
        }
        if !(self.rate > 0.0 && self.max_range > 0.0 && self.noise_sigma >= 0.0) {
            return bad("rate and range must be positive, noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.return_probability) {
            return bad("return probability must lie in [0, 1]");
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("position must be finite");
        }
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn orientation(&self) -> Matrix3<f64> {
        rot_y(self.yaw_deg.to_radians()) * rot_x(-self.pitch_deg.to_radians())
    }

    /// Unit direction of grid cell `(row, col)` in the world frame; row 0 is the top.
    pub fn ray_direction(&self, row: usize, col: usize) -> Vector3<f64> {
        let az = (-0.5 * self.h_fov + (col as f64 + 0.5) * self.h_fov / self.h_res as f64).to_radians();
        let el = (0.5 * self.v_fov - (row as f64 + 0.5) * self.v_fov / self.v_res as f64).to_radians();
        let local = Vector3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
        self.orientation() * local
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub joint_a: usize,
    pub joint_b: usize,
    pub radius: f64,
}

/// Capsule set approximating the subject's body surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyProxy {
    pub capsules: Vec<Capsule>,
}

impl BodyProxy {
    pub fn new(capsules: Vec<Capsule>, joint_count: usize) -> Result<Self> {
        for c in &capsules {
            if c.joint_a >= joint_count || c.joint_b >= joint_count {
                return Err(Error::InvalidConfig(format!("capsule references joint beyond {joint_count}")));
            }
            if !(c.radius > 0.0) {
                return Err(Error::InvalidConfig("capsule radius must be positive".into()));
            }
        }
        Ok(Self { capsules })
    }

    /// 17 capsules over the bundled humanoid; radii scale with `scale`.
    pub fn humanoid(skeleton: &Skeleton, scale: f64) -> Result<Self> {
        const TABLE: [(&str, &str, f64); 17] = [
            ("Hips", "Spine", 0.12),
            ("Spine", "Chest", 0.13),
            ("Chest", "Neck", 0.14),
            ("Neck", "Head", 0.05),
            ("Head", "Head", 0.10),
            ("LeftShoulder", "LeftArm", 0.05),
            ("LeftArm", "LeftForeArm", 0.045),
            ("LeftForeArm", "LeftHand", 0.04),
            ("RightShoulder", "RightArm", 0.05),
            ("RightArm", "RightForeArm", 0.045),
            ("RightForeArm", "RightHand", 0.04),
            ("LeftUpLeg", "LeftLeg", 0.07),
            ("LeftLeg", "LeftFoot", 0.05),
            ("LeftFoot", "LeftToe", 0.04),
            ("RightUpLeg", "RightLeg", 0.07),
            ("RightLeg", "RightFoot", 0.05),
            ("RightFoot", "RightToe", 0.04),
        ];
        let find = |n: &str| skeleton.index_of(n).ok_or_else(|| Error::InvalidConfig(format!("skeleton lacks joint {n}")));
        let capsules = TABLE
            .iter()
            .map(|(a, b, r)| Ok(Capsule { joint_a: find(a)?, joint_b: find(b)?, radius: r * scale }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(capsules, skeleton.len())
    }

    /// Capsule set scaled to a skeleton's size relative to the bundled humanoid.
    pub fn for_skeleton(skeleton: &Skeleton) -> Result<Self> {
        let length = |s: &Skeleton| s.joints().iter().map(|j| j.offset().norm()).sum::<f64>();
        let scale = length(skeleton) / length(&Skeleton::default_humanoid());
        Self::humanoid(skeleton, scale)
    }

    /// Sphere enclosing every capsule, if any.
    pub fn bounding_sphere(&self, joints: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
        if self.capsules.is_empty() {
            return None;
        }
        let center =
            self.capsules.iter().map(|c| (joints[c.joint_a] + joints[c.joint_b]) * 0.5).sum::<Vector3<f64>>() / self.capsules.len() as f64;
        let radius = self
            .capsules
            .iter()
            .map(|c| (joints[c.joint_a] - center).norm().max((joints[c.joint_b] - center).norm()) + c.radius)
            .fold(0.0, f64::max);
        Some((center, radius * (1.0 + 1e-9)))
    }

    /// Distance from `p` to the nearest capsule surface.
    pub fn surface_distance(&self, joints: &[Vector3<f64>], p: &Vector3<f64>) -> f64 {
        self.capsules
            .iter()
            .map(|c| {
                let (a, b) = (joints[c.joint_a], joints[c.joint_b]);
                let ab = b - a;
                let l2 = ab.norm_squared();
                let t = if l2 > 0.0 { ((p - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
                ((p - (a + ab * t)).norm() - c.radius).abs()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Entry distance of a unit ray into a sphere, if ahead of the origin.
fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let h = b * b - (oc.norm_squared() - r * r);
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Entry distance of a unit ray into the capsule `a-b` of radius `r`: the
/// nearest hit over the finite cylinder and both end spheres.
pub fn ray_capsule(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> Option<f64> {
    let mut best = ray_sphere(o, d, a, r);
    let mut keep = |t: Option<f64>| {
        if let Some(t) = t {
            if best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    };
    keep(ray_sphere(o, d, b, r));
    let ba = b - a;
    let baba = ba.norm_squared();
    if baba > 1e-18 {
        let oa = o - a;
        let bard = ba.dot(d);
        let baoa = ba.dot(&oa);
        let rdoa = d.dot(&oa);
        let qa = baba - bard * bard;
        let qb = baba * rdoa - baoa * bard;
        let qc = baba * oa.norm_squared() - baoa * baoa - r * r * baba;
        let h = qb * qb - qa * qc;
        if qa > 1e-18 && h >= 0.0 {
            let t = (-qb - h.sqrt()) / qa;
            let y = baoa + t * bard;
            if t > 0.0 && y > 0.0 && y < baba {
                keep(Some(t));
            }
        }
    }
    best
}

/// One scan, world frame, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<[f32; 3]>,
    pub frame_index: u64,
}

impl PointCloudFrame {
    pub fn new(points: Vec<[f32; 3]>, frame_index: u64) -> Result<Self> {
        let f = Self { points, frame_index };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinitePoint)
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Casts the full ray grid against the posed proxy. `joints` are world joint
/// positions. Background returns never occur: only body capsules are traced.
pub fn simulate_scan(proxy: &BodyProxy, joints: &[Vector3<f64>], cfg: &SensorConfig, frame_index: u64, seed: u64) -> PointCloudFrame {
    let mut rng = seed::rng(seed, &[frame_index]);
    let origin = cfg.origin();
    let mut points = Vec::new();
    let bound = proxy.bounding_sphere(joints);
    for row in 0..cfg.v_res {
        for col in 0..cfg.h_res {
            let d = cfg.ray_direction(row, col);
            if let Some((c, r)) = bound {
                if ray_sphere(&origin, &d, &c, r).is_none() && (origin - c).norm() > r {
                    continue;
                }
            }
            let hit = proxy
                .capsules
                .iter()
                .filter_map(|c| ray_capsule(&origin, &d, &joints[c.joint_a], &joints[c.joint_b], c.radius))
                .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))));
            let Some(t) = hit else { continue };
            if t > cfg.max_range {
                continue;
            }
            // draws happen per hit so the stream stays aligned across configs
            let keep = rng.random::<f64>() < cfg.return_probability;
            let z: f64 = StandardNormal.sample(&mut rng);
            if !keep {
                continue;
            }
            let noise = (z * cfg.noise_sigma).clamp(-NOISE_CLIP_SIGMAS * cfg.noise_sigma, NOISE_CLIP_SIGMAS * cfg.noise_sigma);
            let p = origin + d * (t + noise);
            points.push([p.x as f32, p.y as f32, p.z as f32]);
        }
    }
    PointCloudFrame { points, frame_index }
}

/// Fixed-size cloud: a seeded uniform subset (kept in input order) when there
/// are too many points, zero rows appended when there are too few.
pub fn sample_or_pad(frame: &PointCloudFrame, target: usize, seed: u64) -> Vec<[f32; 3]> {
    let n = frame.points.len();
    if n > target {
        let mut rng = seed::rng(seed, &[frame.frame_index]);
        let mut idx = rand::seq::index::sample(&mut rng, n, target).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| frame.points[i]).collect()
    } else {
        let mut out = frame.points.clone();
        out.resize(target, [0.0; 3]);
        out
    }
}

/// Stack of resampled clouds `[t, t-5, t-10, t-15, t-20]`, `frames x points x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudHistory {
    points: usize,
    data: Vec<[f32; 3]>,
}

impl PointCloudHistory {
    pub fn from_clouds(clouds: Vec<Vec<[f32; 3]>>) -> Result<Self> {
        let points = clouds.first().map_or(0, Vec::len);
        if clouds.len() != HISTORY_OFFSETS.len() {
            return Err(Error::Dimension { what: "history frames", expected: HISTORY_OFFSETS.len(), got: clouds.len() });
        }
        if let Some(c) = clouds.iter().find(|c| c.len() != points) {
            return Err(Error::Dimension { what: "history points", expected: points, got: c.len() });
        }
        Ok(Self { points, data: clouds.into_iter().flatten().collect() })
    }

    pub fn frames(&self) -> usize {
        HISTORY_OFFSETS.len()
    }

    pub fn points_per_frame(&self) -> usize {
        self.points
    }

    pub fn cloud(&self, k: usize) -> &[[f32; 3]] {
        &self.data[k * self.points..(k + 1) * self.points]
    }

    pub fn as_flat(&self) -> &[[f32; 3]] {
        &self.data
    }
}

/// Bounded window of recent scans keyed by frame index.
#[derive(Clone, Debug)]
pub struct FrameRing {
    capacity: usize,
    frames: VecDeque<PointCloudFrame>,
    first_index: Option<u64>,
}

impl FrameRing {
    /// Capacity is raised to cover the deepest history offset.
    pub fn new(capacity: usize) -> Self {
        let min = HISTORY_OFFSETS[HISTORY_OFFSETS.len() - 1] as usize + 1;
        Self { capacity: capacity.max(min), frames: VecDeque::new(), first_index: None }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the first frame ever pushed; history offsets clamp to it.
    pub fn first_index(&self) -> Option<u64> {
        self.first_index
    }

    pub fn push(&mut self, frame: PointCloudFrame) {
        self.first_index.get_or_insert(frame.frame_index);
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn get(&self, index: u64) -> Option<&PointCloudFrame> {
        let front = self.frames.front()?.frame_index;
        let k = index.checked_sub(front)? as usize;
        self.frames.get(k).filter(|f| f.frame_index == index)
    }
}

/// Frame indices a history at `t` draws from, clamped to `first`.
pub fn history_indices(t: u64, first: u64) -> [u64; 5] {
    HISTORY_OFFSETS.map(|o| t.saturating_sub(o).max(first))
}

/// Resamples and stacks the history of frame `t`. Each slot is resampled with
/// its own seed.
pub fn assemble_history(ring: &FrameRing, t: u64, points: usize, seed: u64) -> Result<PointCloudHistory> {
    let first = ring.first_index().ok_or(Error::MissingFrame(t))?;
    build_history(t, first, points, seed, |i| ring.get(i))
}

/// [`assemble_history`] over any frame store.
pub fn build_history<'f>(
    t: u64,
    first: u64,
    points: usize,
    seed: u64,
    lookup: impl Fn(u64) -> Option<&'f PointCloudFrame>,
) -> Result<PointCloudHistory> {
    lookup(t).ok_or(Error::MissingFrame(t))?;
    let clouds = history_indices(t, first)
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let f = lookup(i).ok_or(Error::MissingFrame(i))?;
            Ok(sample_or_pad(f, points, seed::derive(seed, &[t, slot as u64])))
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloudHistory::from_clouds(clouds)
}
