//! Desk-scale pipeline for multi-label ophthalmic biomarker detection from
//! OCT B-scans: a synthetic dataset generator with planted local/global
//! features, seeded augmentation recipes, a small attention model zoo
//! (CBAM conv net, windowed-attention and full-attention transformers),
//! 5-fold cross-validated training with confidence accumulation, two
//! ensembling schemes, and image-wise / patient-wise F1 evaluation.

pub mod augment;
pub mod autodiff;
pub mod cv;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod seeding;

pub use error::{Error, Result};
