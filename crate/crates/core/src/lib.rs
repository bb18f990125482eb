//! Manifold approximation and on-manifold projection for text embeddings.
//!
//! A generator with a discrete latent code learns the (possibly disconnected)
//! manifold of natural embeddings; incoming embeddings are replaced by their
//! nearest point on the generator's image before classification. The distance
//! between an embedding and its projection is a manifold-membership score.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration
//! parsing and the command line live in the companion `tmd` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bundle;
pub mod dataset;
pub mod defense;
pub mod error;
pub mod nets;
pub mod projection;
pub mod rng;
pub mod training;

pub use bundle::ModelBundle;
pub use dataset::{Direction, EmbeddingDataset, Scaler, SyntheticSpec};
pub use defense::{ClassifierHead, Space};
pub use error::{Error, Result};
pub use nets::{ArchConfig, Network, Preset};
pub use projection::{CandidateMode, GdConfig, ProjectionResult};
pub use training::{LatentBatch, PriorState, TrainConfig, TrainReport};
