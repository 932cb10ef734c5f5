//! Multi-task grounded speech learning.
//!
//! A desk-scale implementation of a three-task architecture that matches
//! speech with images, speech with text, and text with images through shared
//! and task-specific encoders trained with a batch-contrastive margin loss.
//! The crate also ships the feature pipeline (MFCC extraction, dataset
//! formats, a synthetic data generator) and a representation-analysis suite
//! (retrieval metrics, representational similarity, diagnostic probes).

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod loss;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
