#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod ik;
pub mod inference;
pub mod lidar;
pub mod metrics;
pub mod motion;
pub mod network;
pub mod postprocess;
pub mod rotation;
pub mod scaling;
pub mod seed;
pub mod skeleton;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
