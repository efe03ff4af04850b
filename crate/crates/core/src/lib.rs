//! Unsupervised metric learning with a cluster-contrast memory bank, a
//! mean-teacher encoder and centroid-probability distillation, run on
//! synthetic multi-camera identity data.
//!
//! The pipeline: [`synthdata`] generates a dataset, [`trainer::fit`]
//! alternates DBSCAN pseudo-labeling ([`clustering`]) with contrastive
//! training of a small MLP ([`encoder`], [`losses`], [`memory`]), and
//! [`evaluation`] scores cross-camera retrieval.

pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod report;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
