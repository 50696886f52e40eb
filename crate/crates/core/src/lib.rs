//! Photorealistic style transfer with a dense-block U-Net encoder/decoder
//! and a multi-level feature-aggregation + AdaIN transfer module.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`graph`], [`ops`]), the network ([`net`]), a frozen VGG16-topology
//! loss network ([`vgg`]), the training objective ([`losses`]), training and
//! checkpointing ([`trainer`], [`checkpoint`]), evaluation ([`metrics`]) and
//! finite-difference verification ([`gradcheck`]).

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod vgg;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Eager, Graph, Tape, Var};
pub use losses::{LossReport, LossWeights};
pub use net::{AggregationStrategy, FeaturePyramid, ModelParams};
pub use optim::Adam;
pub use tensor::{Real, Shape, Tensor};
pub use trainer::TrainConfig;
pub use vgg::{LossNetwork, TapId};
