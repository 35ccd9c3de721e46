//! Feature-Gaussian splatting into bird's-eye-view (BEV) maps.
//!
//! Ground-view depth and feature maps are lifted into anisotropic 3D Gaussians
//! and rendered top-down into BEV feature/confidence maps by front-to-back
//! alpha compositing. The result is matched against a satellite feature map by
//! confidence-weighted cosine similarity. Every stage from raw primitive
//! attributes to the localization losses has an analytic backward pass.
//!
//! Module map:
//! - [`tensor_io`]: `.bvt` binary container for dense arrays.
//! - [`geometry`]: camera models and the metric BEV grid.
//! - [`primitives`]: attribute activation and Gaussian generation.
//! - [`renderer`]: orthographic splatting and its gradient.
//! - [`matching`]: sliding-window cosine similarity and peak extraction.
//! - [`losses`]: weakly supervised and GPS-window objectives.
//! - [`baselines`]: inverse perspective mapping and direct point projection.
//! - [`synth`]: synthetic scenes and the localization harness.
//! - [`objective`]: the end-to-end differentiable chain used for gradient
//!   checks and optimization.

pub mod baselines;
pub mod config;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod maps;
pub mod matching;
pub mod objective;
pub mod primitives;
pub mod renderer;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};
