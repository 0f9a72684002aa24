//! Dense kernels plus PCA, k-means and orthogonal Procrustes.
//!
//! Everything here works in `f64`; 32-bit values only appear at file
//! boundaries.

mod kmeans;
mod matrix;
mod pca;
mod procrustes;
mod stats;

pub use kmeans::{assign_nearest, kmeans_fit, lloyd, KmeansModel};
pub use matrix::{cosine, dot, norm, squared_distance, Matrix};
pub use pca::{pca_fit, PcaModel};
pub use procrustes::procrustes;
pub use stats::percentiles;
