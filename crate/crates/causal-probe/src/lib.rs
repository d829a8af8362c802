//! Causal-effect probing of convolutional classifiers.
//!
//! The crate trains small convolutional networks with a hand-rolled
//! reverse-mode tape, inserts concept autoencoders at chosen activation
//! levels, measures causal effects of do-interventions on concept
//! channels, generates adversarial examples, and renders per-pixel
//! causal-effect heatmaps. Everything is deterministic for a fixed seed.

pub mod attack;
pub mod causal;
pub mod checkpoint;
pub mod concept;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod net;
pub mod optim;
pub mod parallel;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, GradientSet, NodeId};
pub use tensor::Tensor;
