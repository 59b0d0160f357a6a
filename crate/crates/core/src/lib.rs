//! Analysis core for small Vision Transformers.
//!
//! The crate contains an inference-only ViT that records every head's
//! attention matrix, the ablation machinery used to score heads
//! ([`importance`], [`pruning`]), k-hop spatial attention profiles
//! ([`strength`]), attention-pattern extraction and clustering
//! ([`patterns`], [`autoencoder`], [`embed`]) and the on-disk formats plus
//! the offline pipeline that fills an analysis cache ([`store`],
//! [`precompute`]).

pub mod autoencoder;
pub mod crafted;
pub mod embed;
pub mod error;
pub mod importance;
pub mod numerics;
pub mod patterns;
pub mod precompute;
pub mod pruning;
pub mod store;
pub mod strength;
pub mod synth;
pub mod vit;

pub use error::{Error, LoadError, Result};
pub use numerics::{Matrix, ProbVector};
pub use pruning::{PruneMode, PruneSpec};
pub use vit::{ForwardTrace, Image, ModelConfig, ModelWeights};
