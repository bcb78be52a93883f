//! Geometry kernels for equirectangular panoramas and a staged pipeline that
//! turns a panorama corpus into object removal / addition training records.

pub mod boxfusion;
pub mod error;
pub mod maskops;
pub mod pipeline;
pub mod projection;
pub mod raster;
pub mod refine_filter;
pub mod seam;
pub mod services;
pub mod spe;
pub mod sphere;
pub mod synth;
pub mod tensorfile;
pub mod viewport_adapt;

pub use error::{Error, Result};
