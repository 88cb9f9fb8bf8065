//! Length-aware multi-kernel transformer for long document classification.
//!
//! A document is segmented under several kernel sizes, each chunk encoded
//! by its own small Transformer, and the CLS vectors are combined with
//! sinusoidal segment positions and per-kernel length vectors before a
//! document encoder, a length encoder, max-then-average pooling, and a
//! two-layer head. Everything runs on a self-contained `f64` tape with
//! reverse-mode gradients, so training and finite-difference checking need
//! no external framework.
//!
//! The companion harness trains ablation variants (`full`, `wo_mk`,
//! `wo_lav`, `wo_both`) over multiple seeds and reports micro/macro F1 and
//! ROC-AUC overall and per length quartile.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod lav;
pub mod model;
pub mod numerics;
pub mod segmentation;
pub mod training;

pub use error::{Error, Result};
