//! Per-feature standardization of network inputs and outputs.
//!
//! The network reads and writes standardized pose features; losses and
//! every public pose stay in physical units. Statistics come from the
//! training split and travel with the model.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::skeleton::{CONTACT_START, GLOBAL_WIDTH, JOINT_WIDTH};
use crate::tensor::Tensor;

/// Smallest scale a feature can have; constant features (bone offsets,
/// zero rates) map to zero instead of blowing up.
pub const SCALE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    /// `n_joints * 15`, joint-major.
    pub local_mean: Vec<f64>,
    pub local_scale: Vec<f64>,
    /// 17 entries; the contact entries stay at mean 0, scale 1.
    pub global_mean: Vec<f64>,
    pub global_scale: Vec<f64>,
    /// Centroid and isotropic spread of training points, applied to the
    /// absolute coordinates read by the final set-abstraction stage.
    pub cloud_center: [f64; 3],
    pub cloud_scale: f64,
}

fn mean_and_scale(sum: &[f64], sq: &[f64], n: f64) -> (Vec<f64>, Vec<f64>) {
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(SCALE_FLOOR)).collect();
    (mean, scale)
}

impl FeatureScaling {
    /// The identity map.
    pub fn identity(n_joints: usize) -> Self {
        Self {
            local_mean: vec![0.0; n_joints * JOINT_WIDTH],
            local_scale: vec![1.0; n_joints * JOINT_WIDTH],
            global_mean: vec![0.0; GLOBAL_WIDTH],
            global_scale: vec![1.0; GLOBAL_WIDTH],
            cloud_center: [0.0; 3],
            cloud_scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.n_joints())
    }

    pub fn n_joints(&self) -> usize {
        self.local_mean.len() / JOINT_WIDTH
    }

    /// Statistics over every frame and every raw scan point of the training split.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let j = dataset.skeleton.len();
        let lw = j * JOINT_WIDTH;
        let (mut ls, mut lq) = (vec![0.0; lw], vec![0.0; lw]);
        let (mut gs, mut gq) = (vec![0.0; GLOBAL_WIDTH], vec![0.0; GLOBAL_WIDTH]);
        let (mut ps, mut pq) = ([0.0; 3], 0.0);
        let (mut frames, mut points) = (0usize, 0usize);
        for s in dataset.split(Split::Train) {
            for t in 0..s.len() {
                let pose = s.pose(t, j)?;
                for (k, v) in pose.local.to_vec().into_iter().enumerate() {
                    ls[k] += v;
                    lq[k] += v * v;
                }
                for (k, v) in pose.global.to_array().into_iter().enumerate() {
                    gs[k] += v;
                    gq[k] += v * v;
                }
                frames += 1;
            }
            for scan in &s.scans {
                for p in &scan.points {
                    for d in 0..3 {
                        let v = p[d] as f64;
                        ps[d] += v;
                        pq += v * v;
                    }
                    points += 1;
                }
            }
        }
        if frames == 0 {
            return Err(Error::EmptyTrainSplit);
        }
        let (local_mean, local_scale) = mean_and_scale(&ls, &lq, frames as f64);
        let (mut global_mean, mut global_scale) = mean_and_scale(&gs, &gq, frames as f64);
        for k in CONTACT_START..GLOBAL_WIDTH {
            global_mean[k] = 0.0;
            global_scale[k] = 1.0;
        }
        let (cloud_center, cloud_scale) = if points == 0 {
            ([0.0; 3], 1.0)
        } else {
            let n = points as f64;
            let c = ps.map(|s| s / n);
            let var = pq / n - c.iter().map(|v| v * v).sum::<f64>();
            (c, (var / 3.0).max(0.0).sqrt().max(SCALE_FLOOR))
        };
        Ok(Self { local_mean, local_scale, global_mean, global_scale, cloud_center, cloud_scale })
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(alloc::format!("scaling: {m}")));
        if self.local_mean.len() != n_joints * JOINT_WIDTH || self.local_scale.len() != self.local_mean.len() {
            return bad("local statistics do not match the joint count");
        }
        if self.global_mean.len() != GLOBAL_WIDTH || self.global_scale.len() != GLOBAL_WIDTH {
            return bad("global statistics must have 17 entries");
        }
        let means = self.local_mean.iter().chain(&self.global_mean).chain(&self.cloud_center);
        let scales = self.local_scale.iter().chain(&self.global_scale).chain(core::iter::once(&self.cloud_scale));
        if !means.into_iter().all(|v| v.is_finite()) || !scales.into_iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("statistics must be finite with positive scales");
        }
        Ok(())
    }

    /// Standardizes stacked `B*J x 15` local rows.
    pub fn normalize_local(&self, x: &Tensor) -> Tensor {
        let w = self.local_mean.len();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let i = k % w;
            *v = (*v - self.local_mean[i]) / self.local_scale[i];
        }
        out
    }

    /// Standardizes stacked `B x 17` global rows.
    pub fn normalize_global(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let i = k % GLOBAL_WIDTH;
            *v = (*v - self.global_mean[i]) / self.global_scale[i];
        }
        out
    }

    /// `(scale, mean)` tiled over `rows` stacked local rows, for mapping
    /// network outputs back to physical units.
    pub fn local_affine(&self, rows: usize) -> (Tensor, Tensor) {
        let j = self.n_joints().max(1);
        let tile = |v: &[f64]| Tensor::from_vec(rows, JOINT_WIDTH, v.iter().copied().cycle().take(rows * JOINT_WIDTH).collect());
        debug_assert_eq!(rows % j, 0);
        (tile(&self.local_scale), tile(&self.local_mean))
    }

    /// `(scale, mean)` of the first `CONTACT_START` global entries tiled over `rows`.
    pub fn global_affine(&self, rows: usize) -> (Tensor, Tensor) {
        let tile = |v: &[f64]| Tensor::from_vec(rows, CONTACT_START, (0..rows).flat_map(|_| v[..CONTACT_START].iter().copied()).collect());
        (tile(&self.global_scale), tile(&self.global_mean))
    }

    pub fn normalize_point(&self, p: &[f64; 3]) -> [f64; 3] {
        core::array::from_fn(|d| (p[d] - self.cloud_center[d]) / self.cloud_scale)
    }
}
