//! POVM reconstruction and photon-number inference for detectors with a continuous
//! output, such as transition-edge sensors.
//!
//! The pipeline runs in the same order as the modules below:
//!
//! 1. [`pca`] compresses raw detector traces to principal-component scores.
//! 2. [`density`] turns the first-component scores of each coherent probe into
//!    a kernel density estimate on a shared outcome grid.
//! 3. [`tomo`] inverts the Born rule for the coherent probes, either with the
//!    Gaussian-mixture maximum-likelihood routine or the constrained
//!    least-squares baseline.
//! 4. [`calibration`] handles probe-energy calibration and folds its
//!    uncertainty into the reconstructed POVM.
//! 5. [`inference`] estimates the detection efficiency and quantifies
//!    photon-number resolution through posteriors and confidence values.
//!
//! [`sim`] generates synthetic traces from a known detector so the whole chain
//! can be checked against ground truth, and [`io`] holds the binary trace and
//! basis formats.

pub mod calibration;
pub mod density;
pub mod error;
pub mod inference;
pub mod io;
pub mod pca;
pub mod povm;
pub mod sim;
pub mod tomo;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
