//! Engine for a human-in-the-loop workbench that finds and removes data
//! biases in image classifiers.
//!
//! The crate covers the whole loop: generate (or load) a dataset, train a
//! small convolutional classifier, inspect its errors through latent
//! projections, Grad-CAM heatmaps and confusion-matrix diffs, synthesize
//! counter-bias images by translating sources toward a cluster's style, and
//! retrain. See the `book/` directory for a narrative guide.

pub mod cluster;
pub mod dataset;
pub mod diff;
pub mod engine;
pub mod explain;
pub mod error;
pub mod image;
pub mod projection;
pub mod replay;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/dataset.md")]
    struct Dataset;
    #[doc = include_str!("../../../book/src/engine.md")]
    struct Engine;
    #[doc = include_str!("../../../book/src/gradcam.md")]
    struct GradCam;
    #[doc = include_str!("../../../book/src/projection.md")]
    struct Projection;
    #[doc = include_str!("../../../book/src/clustering.md")]
    struct Clustering;
    #[doc = include_str!("../../../book/src/diffing.md")]
    struct Diffing;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
