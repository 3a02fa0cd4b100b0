//! Contrastive self-supervised backbone pre-training and frozen-backbone
//! linear-probe object detection (one object per image).
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] ingests VOC-style annotations, builds per-class subsets and
//!   train/val splits, and renders deterministic synthetic datasets.
//! * [`augment`] holds the view-pair policy used for pre-training and the
//!   pixel-only policy used while training the detector.
//! * [`nn`] is a small CPU tensor/layer toolkit with hand-written backward
//!   passes; [`model`] builds backbones, heads and checkpoints on top of it.
//! * [`losses`] contains every objective together with its analytic gradient.
//! * [`train`] runs the two optimisation loops.
//! * [`metrics`] and [`explain`] evaluate and inspect trained detectors.

pub mod augment;
pub mod data;
pub mod error;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
