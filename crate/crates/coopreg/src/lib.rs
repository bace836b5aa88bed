//! Unsupervised deformable image registration with cooperative autoencoder
//! regularization.
//!
//! A primary encoder-decoder network regresses per-pixel displacement fields
//! between image pairs and is trained without supervision through a
//! differentiable warping unit. A secondary bottleneck autoencoder is trained
//! jointly on the predicted fields; its reconstruction loss pulls the fields
//! onto a low-dimensional manifold shared across the population, which
//! recovers meaningful correspondences where plain smoothness-regularized
//! registration does not.
//!
//! The crate ships the synthetic box-bump shape families, the registration
//! and autoencoder networks, the combined training objective, evaluation
//! metrics (Dice, landmark error, autoencoder reconstruction error), and an
//! experiment driver used by the `coopreg` CLI.

pub mod error;
pub mod experiment;
pub mod field;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nets;
pub mod rawio;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use field::{
    bilinear_sample, spatial_gradient, to_signed_distance, warp_image, Coordinate,
    DisplacementField, Image,
};
pub use synth::{
    build_pair_dataset, make_linear_boxbump, make_rotating_boxbump, PairDataset,
    RegistrationPair, ShapeFamily, ShapeSample,
};
