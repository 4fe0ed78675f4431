//! Tri-modal contrastive pre-training at desk scale.
//!
//! Aligns three modalities — X-ray-like grayscale images, 12-lead ECG-like
//! signals and their paired text reports — in one embedding space via a
//! symmetric InfoNCE objective, then evaluates the space with zero-shot
//! classification, cross-modal retrieval and gradient-weighted attention
//! explanations. Everything runs on the CPU over a hand-rolled reverse-mode
//! tensor tape; synthetic generators stand in for hospital corpora.

pub mod config;
pub mod data;
pub mod preprocess;
pub mod rng;
pub mod encoders;
pub mod eval;
pub mod explain;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod trainer;
pub mod tensor;
pub mod testing;
