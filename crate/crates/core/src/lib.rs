//! Multi-teacher dense-feature distillation at desk scale.
//!
//! A small ViT-like student learns to reproduce the patch-token features of
//! several frozen teachers through per-teacher projection heads. Per-teacher
//! losses are combined with weights from a uniform, MLP-based or
//! attention-based balancer, and teacher targets are standardized first
//! (L2 or a Hadamard-rotation "PHI-S" standardizer). A second phase fits a
//! toy segmentation decoder on the frozen student and scores it with Dice
//! and HD95.

pub mod balancing;
pub mod config;
pub mod error;
pub mod export;
pub mod features;
pub mod linalg;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod segmetrics;
pub mod standardize;
pub mod student;
pub mod trainer;

pub use error::{Error, Result};
