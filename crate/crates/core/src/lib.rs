//! Reason-guided open-vocabulary segmentation.
//!
//! A chat multimodal model describes each image, picks the classes it sees and
//! explains them coarse-to-fine; off-vocabulary names are aligned by embedding
//! similarity; classes it missed get image-independent explanations. Every
//! (class, reason) pair becomes a segmentor prompt, the resulting logit maps are
//! averaged per class, squashed and thresholded, and predictions are scored
//! with mIoU and PQ/SQ/RQ.

pub mod aligner;
pub mod backends;
pub mod composer;
pub mod ensemble;
pub mod manifest;
pub mod metrics;
pub mod panoptic;
pub mod pipeline;
pub mod reasoner;
pub mod raster;
pub mod scalar;
pub mod vocab;

pub use scalar::Scalar;
pub use vocab::{normalize_class_name, ClassId, ClassVocabulary, IGNORE_ID};

/// Single-precision logit map, the wire representation.
pub type LogitMap32 = raster::LogitMap<f32>;
pub type LogitMap64 = raster::LogitMap<f64>;
pub type MaskStack32 = raster::MaskStack<f32>;
pub type MaskStack64 = raster::MaskStack<f64>;
pub type ClassScoreMap32 = ensemble::ClassScoreMap<f32>;
pub type ClassScoreMap64 = ensemble::ClassScoreMap<f64>;
pub type Embedding32 = aligner::EmbeddingVector<f32>;
pub type Embedding64 = aligner::EmbeddingVector<f64>;
pub type Embedder32 = aligner::Embedder<f32>;
pub type Embedder64 = aligner::Embedder<f64>;
