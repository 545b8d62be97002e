//! Image classification on CIFAR-10 from hand-crafted and deep features.
//!
//! SIFT descriptors are pooled into Fisher Vectors against a diagonal GMM codebook,
//! stored deep-network activations are optionally reduced with PCA, one linear SVM is
//! trained per feature stream, and the streams vote.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below pick
//! `f64` unless suffixed with `32`.

mod binio;
pub mod codebook;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod featstore;
pub mod fisher;
pub mod pca;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod sift;
pub mod svm;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Gmm = codebook::GmmParams<f64>;
pub type Gmm32 = codebook::GmmParams<f32>;
pub type Fv = fisher::FisherVector<f64>;
pub type Fv32 = fisher::FisherVector<f32>;
pub type Pca = pca::PcaModel<f64>;
pub type Pca32 = pca::PcaModel<f32>;
pub type Svm = svm::MulticlassModel<f64>;
pub type Svm32 = svm::MulticlassModel<f32>;
pub type Descriptors = sift::DescriptorSet<f64>;
pub type Descriptors32 = sift::DescriptorSet<f32>;
pub type Gray = dataset::GrayImage<f64>;
pub type Gray32 = dataset::GrayImage<f32>;
pub type Ensemble = ensemble::EnsembleModel<f64>;
pub type Ensemble32 = ensemble::EnsembleModel<f32>;
