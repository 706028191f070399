//! Joint perception-generation diffusion pipeline on a procedural voxel
//! world: a minimal autodiff tensor core, a DDPM-style schedule, a synthetic
//! paired dataset, an image-to-occupancy perception net, a state-space
//! conditioning module with camera-aware deformable sampling, a small
//! conditional denoiser, the joint training/sampling engine, Frechet-style
//! evaluation metrics, and the command surface behind the `occscene` binary.

pub mod autodiff;
pub mod config;
pub mod commands;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod mda;
pub mod params;
pub mod perception;
pub mod rng;
pub mod schedule;
pub mod synthworld;
pub mod tensor;
pub mod verify;

pub use error::{OccError, Result};
