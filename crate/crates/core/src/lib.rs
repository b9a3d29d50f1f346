//! A desk-scale laboratory for attacks on vertical federated learning (VFL) inference.
//!
//! The crate contains everything needed to train a split neural network across
//! several parties, guard its inference path with label-aware anomaly detectors,
//! and run a two-stage targeted-label attack from a compromised passive party:
//!
//! - [`nn`]: a small deterministic MLP engine with exact backpropagation.
//! - [`data`]: tabular/synthetic datasets and vertical feature partitioning.
//! - [`detectors`]: KDE and deep-autoencoder anomaly scoring with per-class thresholds.
//! - [`vfl`]: split training and detector-enhanced inference returning a class or `REJ`.
//! - [`clustering`]: constrained seed K-Means.
//! - [`selection`]: MMD-based greedy selection with incremental kernel caches.
//! - [`attack`]: preparation stage, PGD attack stage and the ablation variants.
//! - [`defenses`]: noisy, discrete and compressed embeddings.
//! - [`protocol`]: the length-prefixed binary wire format and transports.
//! - [`harness`]: configuration, metrics, experiment orchestration and results files.

pub mod attack;
pub mod clustering;
pub mod data;
pub mod defenses;
pub mod detectors;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod selection;
pub mod vfl;

pub use error::{Error, Result};
pub use matrix::Matrix;
