//! Mixture-aware masked-prediction pre-training for few-shot keyword spotting.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic keyword corpus,
//! waveform mixing with label union, a clean-speech k-means tokenizer producing
//! n-hot frame targets, a small convolution + transformer backbone trained by
//! masked unit prediction (softmax NLL or per-unit sigmoid BCE), frozen-backbone
//! few-shot adaptation, and EER / Top-k evaluation.

pub mod adapt;
pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod mixing;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
