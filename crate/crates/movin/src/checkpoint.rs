//! Model checkpoints.
//!
//! ```text
//! blob header    magic `MVNCKPT\0`, version, rank 0
//! u32            header length, then that many bytes of TOML {config, skeleton}
//! u32            tensor count
//! per tensor     u16 name length, name (UTF-8), u32 rows, u32 cols, rows * cols f64
//! ```
//!
//! Parameters are stored in the model's allocation order followed by the
//! feature statistics, at full precision so a reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use movin_core::network::{ModelConfig, MovinModel};
use movin_core::scaling::FeatureScaling;
use movin_core::skeleton::Skeleton;
use movin_core::tensor::Tensor;

use crate::blob::{BlobReader, BlobWriter};
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVNCKPT\0";

const SCALING_LOCAL_MEAN: &str = "scaling.local_mean";
const SCALING_LOCAL_SCALE: &str = "scaling.local_scale";
const SCALING_GLOBAL_MEAN: &str = "scaling.global_mean";
const SCALING_GLOBAL_SCALE: &str = "scaling.global_scale";
/// Cloud center xyz followed by the cloud scale.
const SCALING_CLOUD: &str = "scaling.cloud";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    skeleton: Skeleton,
}

struct NamedTensor {
    name: String,
    value: Tensor,
}

fn scaling_tensors(s: &FeatureScaling) -> Vec<NamedTensor> {
    let row = |name: &str, v: &[f64]| NamedTensor { name: name.into(), value: Tensor::row_vector(v.to_vec()) };
    let cloud = [s.cloud_center[0], s.cloud_center[1], s.cloud_center[2], s.cloud_scale];
    vec![
        row(SCALING_LOCAL_MEAN, &s.local_mean),
        row(SCALING_LOCAL_SCALE, &s.local_scale),
        row(SCALING_GLOBAL_MEAN, &s.global_mean),
        row(SCALING_GLOBAL_SCALE, &s.global_scale),
        row(SCALING_CLOUD, &cloud),
    ]
}

pub fn encode_checkpoint(model: &MovinModel) -> Vec<u8> {
    let header = Header { config: model.config().clone(), skeleton: model.skeleton().clone() };
    let text = toml::to_string(&header).expect("model config and skeleton serialize to TOML");
    let mut w = BlobWriter::new(CHECKPOINT_MAGIC, &[]);
    w.u32(text.len() as u32).bytes(text.as_bytes());
    let tensors: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let scaling = scaling_tensors(model.scaling());
    w.u32((tensors.len() + scaling.len()) as u32);
    for (name, value) in tensors.into_iter().chain(scaling.iter().map(|t| (t.name.as_str(), &t.value))) {
        w.u16(name.len() as u16).bytes(name.as_bytes());
        w.u32(value.rows() as u32).u32(value.cols() as u32);
        w.f64s(value.data().iter().copied());
    }
    w.finish()
}

fn decode_tensors(r: &mut BlobReader<'_>) -> Result<Vec<NamedTensor>, FormatError> {
    let count = r.u32()? as usize;
    // each entry takes at least 10 bytes, which bounds the allocation
    r.require(count.saturating_mul(10))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?).map_err(|_| FormatError::Header("tensor name is not UTF-8".into()))?.to_owned();
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let n = rows.checked_mul(cols).ok_or_else(|| FormatError::Header("tensor shape overflows".into()))?;
        r.require(n.saturating_mul(8))?;
        out.push(NamedTensor { name, value: Tensor::from_vec(rows, cols, r.f64s(n)?) });
    }
    Ok(out)
}

/// Rebuilds a model from checkpoint bytes. Names and shapes must match what
/// the stored configuration allocates.
pub fn decode_checkpoint(data: &[u8]) -> Result<MovinModel, DecodeError> {
    let (mut r, dims) = BlobReader::open(data, CHECKPOINT_MAGIC)?;
    if !dims.is_empty() {
        return Err(FormatError::Header(format!("checkpoint has rank {}, expected 0", dims.len())).into());
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| FormatError::Header("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| FormatError::Header(e.to_string()))?;
    let tensors = decode_tensors(&mut r)?;
    r.finish()?;

    let mut model = MovinModel::new(header.config, header.skeleton, 0).map_err(DecodeError::Model)?;
    let n_params = model.params().len();
    if tensors.len() != n_params + 5 {
        return Err(DecodeError::Layout(format!("{} tensors, the configuration allocates {}", tensors.len(), n_params + 5)));
    }
    let (params, stats) = tensors.split_at(n_params);
    for (slot, stored) in model.params_mut().iter_mut().zip(params) {
        if slot.name != stored.name || slot.value.shape() != stored.value.shape() {
            return Err(DecodeError::Layout(format!(
                "tensor `{}` {:?} where `{}` {:?} was expected",
                stored.name,
                stored.value.shape(),
                slot.name,
                slot.value.shape()
            )));
        }
        slot.value = stored.value.clone();
    }
    let expect = |i: usize, name: &str, len: usize| -> Result<Vec<f64>, DecodeError> {
        let t = &stats[i];
        if t.name != name || t.value.len() != len {
            return Err(DecodeError::Layout(format!("expected `{name}` with {len} values, found `{}`", t.name)));
        }
        Ok(t.value.data().to_vec())
    };
    let width = model.scaling().local_mean.len();
    let cloud = expect(4, SCALING_CLOUD, 4)?;
    let scaling = FeatureScaling {
        local_mean: expect(0, SCALING_LOCAL_MEAN, width)?,
        local_scale: expect(1, SCALING_LOCAL_SCALE, width)?,
        global_mean: expect(2, SCALING_GLOBAL_MEAN, 17)?,
        global_scale: expect(3, SCALING_GLOBAL_SCALE, 17)?,
        cloud_center: [cloud[0], cloud[1], cloud[2]],
        cloud_scale: cloud[3],
    };
    model.set_scaling(scaling).map_err(DecodeError::Model)?;
    Ok(model)
}

/// Why checkpoint bytes did not yield a model.
#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("tensor layout does not match the stored configuration: {0}")]
    Layout(String),
    #[error("stored configuration is invalid: {0}")]
    Model(movin_core::Error),
}

impl DecodeError {
    fn at(self, path: &Path) -> Error {
        match self {
            DecodeError::Format(source) => Error::Format { path: path.to_path_buf(), source },
            DecodeError::Layout(detail) => Error::ConfigMismatch(format!("{}: {detail}", path.display())),
            DecodeError::Model(e) => Error::Core(e),
        }
    }
}

pub fn save_checkpoint(model: &MovinModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model)).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<MovinModel> {
    let data = fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&data).map_err(|e| e.at(path))
}

/// Loads a checkpoint and insists it was trained with `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<MovinModel> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "{} holds {}, the run asks for {}",
            path.display(),
            summarize(model.config()),
            summarize(expected)
        )));
    }
    Ok(model)
}

fn summarize(c: &ModelConfig) -> String {
    format!("C={} points={} joints={} past_clouds={} autoregressive={}", c.channels, c.points, c.n_joints, c.past_clouds, c.autoregressive)
}
