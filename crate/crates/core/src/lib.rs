//! Data-consistent inversion driven by learned quantities of interest.
//!
//! Noisy spatio-temporal data ensembles are filtered, optionally clustered,
//! and reduced with kernel PCA to low-dimensional quantities of interest whose
//! observed and predicted densities define a ratio `r` that updates an initial
//! parameter distribution.

pub mod clustering;
pub mod densities;
pub mod ensemble;
pub mod filtering;
pub mod instrument;
pub mod inversion;
pub mod iterative;
pub mod kpca;
pub mod linalg;
pub mod points;
pub mod sufficiency;
pub mod wave;

pub use ensemble::{DataEnsemble, FilteredEnsemble, Sample};
pub use points::Points;
