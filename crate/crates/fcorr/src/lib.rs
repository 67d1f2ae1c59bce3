//! One-pass coarse-to-fine functional image correspondence.
//!
//! Given a pair of images and arbitrary query coordinates in the first
//! image, the matcher predicts the corresponding coordinate in the second
//! image plus a confidence score, in a single feed-forward pass over a
//! shared feature pyramid: a residual backbone runs once per image, and
//! three transformer stages (coarse, middle, fine) refine each estimate on
//! progressively higher-resolution feature patches cropped straight from
//! the pyramid. Query-correspondence pairs are grouped into shared patches
//! by adaptive query clustering so the refinement stages process few,
//! well-filled patches.
//!
//! The crate also ships synthetic-homography training, flow metrics
//! (AEPE / PCK / Fl), Delaunay densification, outlier filters, and a
//! benchmark harness that contrasts the one-pass engine with a recursive
//! re-crop baseline.

pub mod backbone;
pub mod cluster;
pub mod config;
pub mod delaunay;
pub mod bench;
pub mod error;
pub mod filters;
pub mod image;
pub mod loss;
pub mod matcher;
pub mod matchio;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pe;
pub mod pyramid;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
