//! Volumetric particle analysis for X-ray micro-tomography.
//!
//! The crate covers the whole chain from a noisy 16-bit grayscale volume to
//! per-particle statistics:
//!
//! * [`prefilter`]: non-local means denoising and unsharp masking,
//! * [`binarize`]: Sauvola local thresholds, morphological opening and an
//!   exact Euclidean distance transform,
//! * [`watershed`]: extended-minima markers and priority-flood watershed,
//! * [`mergegraph`] and [`neuralnet`]: region adjacency graph, edge features
//!   and the small feed-forward network deciding which regions to merge,
//! * [`descriptors`]: 2D size and shape descriptors of particle sections,
//! * [`register`]: rigid placement of a 2D section inside the volume,
//! * [`attenuation`]: linear calibration of grayscale against `rho * mu_m`,
//! * [`phantom`]: synthetic ground-truth particle systems.

pub mod attenuation;
pub mod binarize;
pub mod descriptors;
pub mod error;
pub mod mergegraph;
pub mod metrics;
pub mod neuralnet;
pub mod phantom;
pub mod prefilter;
pub mod register;
pub mod volgrid;
pub mod watershed;

pub use error::{Error, Result};
pub use volgrid::{
    Axis, BinaryPlane, BinaryVolume, Dims, Element, Grid2, Grid3, LabelPlane, LabelVolume,
    RealGrid, ScalarVolume,
};
