//! Front-seat occupancy detection from grayscale windshield crops.
//!
//! Dense gradient descriptors are reduced by PCA, aggregated against a
//! vocabulary into bag-of-words, VLAD or Fisher vectors, and classified by a
//! linear SVM. A deformable part model face detector provides the baseline.

pub mod classifier;
pub mod codebooks;
pub mod dataset;
pub mod descriptors;
pub mod dpm;
pub mod encoders;
pub mod error;
pub mod image;
pub mod matrix_file;
pub mod metrics;
pub mod model_file;
pub mod par;
pub mod pca;
pub mod pipeline;

pub use error::{Error, Result, Stage};
pub use par::Parallelism;
