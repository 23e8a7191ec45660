//! Differentiable 3D Gaussian splatting with multi-view alignment losses and
//! TSDF surface extraction.

pub mod error;
pub mod features;
pub mod fusion;
pub mod gaussians;
pub mod geometry;
pub mod gradcheck;
pub mod imageproc;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rasterizer;
pub mod scenes;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
pub use gaussians::GaussianCloud;
pub use geometry::{Camera, CameraIntrinsics, CameraPose};
pub use rasterizer::{render, render_backward, CloudGradients, DepthMode, MapGradients, RenderBuffers, RenderSettings};
