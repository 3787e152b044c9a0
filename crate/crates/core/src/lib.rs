//! Face reenactment by hypernetwork-predicted generator weight offsets.
//!
//! A frozen StyleGAN2-style generator is driven by W+ codes from a pluggable
//! inversion interface. Source appearance features and target pose features
//! are fused by the reenactment module; the hypernetwork turns the fused map
//! into multiplicative per-layer kernel offsets; training follows a
//! three-phase curriculum (inversion, self-reenactment, mixed self/cross).

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod facegeom;
pub mod fusion;
pub mod generator;
pub mod hypernet;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
