//! Context-aware deep kernel maps for multi-label image annotation.
//!
//! Images are grids of cells carrying precomputed features. Each cell gets an
//! explicit, layered kernel map whose layers mix in the maps of its typed
//! spatial neighbors through per-layer, per-sector adjacency weights. Maps are
//! sum-pooled per image, one-vs-rest linear SVMs are trained on the pooled
//! maps, and the adjacency weights are learned by backpropagating the SVM
//! hinge objective, alternating with SVM retraining.
//!
//! - [`grid`]: cell grids and handcrafted sector adjacency
//! - [`featio`]: feature files, initial maps, labels, synthetic data
//! - [`kernelcore`]: explicit maps, pooling, gram recursion oracle
//! - [`svm`]: dual coordinate descent SVMs, scoring and annotation
//! - [`ctxlearn`]: context gradients and alternating optimization
//! - [`evalmetrics`]: MF-S, MF-C and MAP
//! - [`checkpoint`], [`config`], [`cli`]: persistence and the command surface

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ctxlearn;
pub mod error;
pub mod evalmetrics;
pub mod featio;
pub mod grid;
pub mod kernelcore;
pub mod svm;

pub use error::{Error, Result};
