//! Few-point point-cloud completion.
//!
//! A desk-scale completion pipeline: an ensemble set encoder (PointNet-style
//! branch plus a Transformer-augmented branch) produces a multi-level global
//! feature vector, a feature-space WGAN-GP corrects that vector, and a
//! coarse-to-fine folding decoder turns it back into a dense cloud. The crate
//! also ships the metrics (Chamfer distance, exact and auction-approximated
//! Earth Mover's Distance), a synthetic dataset generator, the three-stage
//! training protocol, and the evaluation/report tooling, all on top of a
//! small reverse-mode autodiff engine with second-order support for the
//! critic's gradient penalty.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod pointcloud;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
