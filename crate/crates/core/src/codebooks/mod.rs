//! Visual vocabularies: k-means codebooks (BoW, VLAD) and diagonal GMMs (Fisher vectors).

mod gmm;
mod kmeans;

pub use gmm::{
    gaussian_density, train_gmm, train_gmm_traced, GmmConfig, GmmFit, GmmModel, SAMPLES_PER_COMPONENT, VARIANCE_FLOOR,
    WEIGHT_FLOOR,
};
pub use kmeans::{train_kmeans, train_kmeans_traced, KmeansCodebook, KmeansConfig, KmeansFit};
