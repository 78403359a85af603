//! Dataset directories and pose files.
//!
//! A dataset directory holds `manifest.json` plus two blobs per sequence:
//!
//! * `seq_<id>.pose.bin`: magic `MVNPOSE\0`, dims `[frames, 17 + 15 * joints]`,
//!   then the pose rows as f32.
//! * `seq_<id>.pc.bin`: magic `MVNSCAN\0`, dims `[frames, points]`, then one
//!   u32 point count per frame, then `points x 3` f32 coordinates.
//!
//! Pose files written by inference share the pose blob layout, so a stored
//! sequence's pose blob is directly usable as ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use movin_core::dataset::{Dataset, Sequence, SequenceInfo};
use movin_core::lidar::{PointCloudFrame, SensorConfig};
use movin_core::skeleton::{PoseFeatures, Skeleton, GLOBAL_WIDTH, JOINT_WIDTH};

use crate::blob::{product, BlobReader, BlobWriter};
use crate::error::{Error, FormatError, Result};

pub const POSE_MAGIC: &[u8; 8] = b"MVNPOSE\0";
pub const SCAN_MAGIC: &[u8; 8] = b"MVNSCAN\0";
pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub info: SequenceInfo,
    pub resample_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub skeleton: Skeleton,
    pub sensor: SensorConfig,
    pub sequences: Vec<ManifestEntry>,
}

pub fn pose_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("seq_{id}.pose.bin"))
}

pub fn scan_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("seq_{id}.pc.bin"))
}

/// Pose rows of equal width, f32 as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTable {
    pub width: usize,
    pub rows: Vec<f32>,
}

impl PoseTable {
    pub fn from_poses(poses: &[PoseFeatures]) -> Self {
        let width = poses.first().map_or(GLOBAL_WIDTH, |p| PoseFeatures::width(p.local.len()));
        Self { width, rows: poses.iter().flat_map(|p| p.to_vec()).map(|v| v as f32).collect() }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_joints(&self) -> Result<usize> {
        if self.width < GLOBAL_WIDTH || (self.width - GLOBAL_WIDTH) % JOINT_WIDTH != 0 {
            return Err(Error::PoseWidth(self.width));
        }
        Ok((self.width - GLOBAL_WIDTH) / JOINT_WIDTH)
    }

    pub fn poses(&self) -> Result<Vec<PoseFeatures>> {
        let j = self.n_joints()?;
        self.rows
            .chunks_exact(self.width)
            .map(|r| Ok(PoseFeatures::from_slice(&r.iter().map(|&v| v as f64).collect::<Vec<_>>(), j)?))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(POSE_MAGIC, &[self.len() as u32, self.width as u32]);
        w.f32s(self.rows.iter().copied());
        w.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Self, FormatError> {
        let (mut r, dims) = BlobReader::open(data, POSE_MAGIC)?;
        let [frames, width] = dims[..] else {
            return Err(FormatError::Header(format!("pose blob has rank {}, expected 2", dims.len())));
        };
        let n = product(&dims)?;
        r.require(n.saturating_mul(4))?;
        let rows = r.f32s(n)?;
        r.finish()?;
        if width == 0 && frames > 0 {
            return Err(FormatError::Header("zero pose width".into()));
        }
        Ok(Self { width: width as usize, rows })
    }
}

pub fn encode_scans(scans: &[PointCloudFrame]) -> Vec<u8> {
    let total: usize = scans.iter().map(|s| s.points.len()).sum();
    let mut w = BlobWriter::new(SCAN_MAGIC, &[scans.len() as u32, total as u32]);
    for s in scans {
        w.u32(s.points.len() as u32);
    }
    for s in scans {
        w.f32s(s.points.iter().flatten().copied());
    }
    w.finish()
}

pub fn decode_scans(data: &[u8]) -> Result<Vec<PointCloudFrame>, FormatError> {
    let (mut r, dims) = BlobReader::open(data, SCAN_MAGIC)?;
    let [frames, total] = dims[..] else {
        return Err(FormatError::Header(format!("scan blob has rank {}, expected 2", dims.len())));
    };
    let (frames, total) = (frames as usize, total as usize);
    r.require(frames.saturating_mul(4).saturating_add(total.saturating_mul(12)))?;
    let counts = (0..frames).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>, _>>()?;
    if counts.iter().sum::<usize>() != total {
        return Err(FormatError::Header("per-frame point counts do not add up".into()));
    }
    let mut out = Vec::with_capacity(frames);
    for (t, n) in counts.into_iter().enumerate() {
        let flat = r.f32s(n * 3)?;
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        out.push(PointCloudFrame { points, frame_index: t as u64 });
    }
    r.finish()?;
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn write_pose_file(path: &Path, poses: &[PoseFeatures]) -> Result<()> {
    write(path, &PoseTable::from_poses(poses).encode())
}

pub fn read_pose_table(path: &Path) -> Result<PoseTable> {
    PoseTable::decode(&read(path)?).map_err(Error::format(path))
}

pub fn read_pose_file(path: &Path) -> Result<Vec<PoseFeatures>> {
    read_pose_table(path)?.poses()
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let width = PoseFeatures::width(dataset.skeleton.len());
    for s in &dataset.sequences {
        let table = PoseTable { width, rows: s.poses.clone() };
        write(&pose_file(dir, &s.info.id), &table.encode())?;
        write(&scan_file(dir, &s.info.id), &encode_scans(&s.scans))?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        skeleton: dataset.skeleton.clone(),
        sensor: dataset.sensor.clone(),
        sequences: dataset.sequences.iter().map(|s| ManifestEntry { info: s.info.clone(), resample_seed: s.resample_seed }).collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json { path: path.clone(), source })?;
    write(&path, text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = read(&path)?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            file: MANIFEST.into(),
            detail: format!("manifest version {} (this build reads {MANIFEST_VERSION})", manifest.version),
        });
    }
    Ok(manifest)
}

/// Loads every sequence, or nothing: the first bad file aborts the load.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let width = PoseFeatures::width(manifest.skeleton.len());
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for entry in manifest.sequences {
        let id = entry.info.id.clone();
        let pose_path = pose_file(dir, &id);
        let table = PoseTable::decode(&read(&pose_path)?).map_err(Error::format(&pose_path))?;
        let scan_path = scan_file(dir, &id);
        let scans = decode_scans(&read(&scan_path)?).map_err(Error::format(&scan_path))?;
        let file = |p: &Path| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        if table.width != width {
            return Err(Error::Manifest { file: file(&pose_path), detail: format!("pose width {} != {width}", table.width) });
        }
        if table.len() != entry.info.frame_count || scans.len() != entry.info.frame_count {
            return Err(Error::Manifest {
                file: file(&pose_path),
                detail: format!(
                    "manifest lists {} frames, files hold {} poses and {} scans",
                    entry.info.frame_count,
                    table.len(),
                    scans.len()
                ),
            });
        }
        sequences.push(Sequence { info: entry.info, poses: table.rows, scans, resample_seed: entry.resample_seed });
    }
    let dataset = Dataset { skeleton: manifest.skeleton, sensor: manifest.sensor, sequences };
    dataset.validate()?;
    Ok(dataset)
}
