//! Augmentation-conditioned self-supervised pretraining at desk scale.
//!
//! The crate trains small contrastive models (SimCLR, MoCo-v2, Barlow Twins,
//! SimSiam) whose projector head can be conditioned on a vector describing the
//! augmentations that produced each view. Everything downstream of that idea
//! lives here too: the augmentation pipeline that records its own parameters,
//! the conditioned projector and its hypernetwork variant, a single-machine
//! trainer with resumable checkpoints, linear/few-shot/rotation probes, and
//! representation analyses (conditioning dependency, stagewise augmentation
//! sensitivity, eigenspectrum decay, retrieval).
//!
//! All randomness flows through [`rng::stream`], so every artifact is
//! reproducible from a root seed.

pub mod analysis;
pub mod augpipe;
pub mod checkpoint;
pub mod condproj;
pub mod datahub;
pub mod evalsuite;
pub mod lbfgs;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod sslcore;
pub mod trainer;

pub use error::{Error, Result};
