//! Coarse-to-fine cost-volume depth and disparity estimation.
//!
//! A cascade sweeps a wide, coarse hypothesis ladder at low resolution and
//! then re-centers progressively narrower ladders on the upsampled previous
//! prediction at higher resolutions. Matching uses classical descriptors
//! (census, zero-mean patches) in place of learned features, with variance,
//! Hamming or group-wise correlation costs and a soft-argmin readout.

pub mod cascade;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod hypothesis;
pub mod image;
pub mod io;
pub mod metrics;
pub mod pyramid;
pub mod regress;
pub mod synth;
pub mod volume;

pub use cascade::{run_mvs, run_stereo, CascadeOptions, CascadeRun, PerStage, StageResult, View};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{Camera, CameraIntrinsics, CameraPose};
pub use hypothesis::{schedule_from_config, CascadeSchedule, HypothesisField, StageSpec, SweepMode};
pub use image::GrayImage;
pub use regress::DepthMap;
