//! Prototype-part image classification for planetary surface imagery.
//!
//! The pipeline is: [`dataset`] ingestion and augmentation, the [`protonet`]
//! model (backbone, prototype layer, evidence layer), the four-term training
//! [`objectives`], the [`trainer`] schedule, [`explain`] evidence panels,
//! [`analytics`] for accuracy and prototype-quality curves, and post-hoc
//! [`calibrate`] scaling that feeds the confidence gate used when serving.

pub mod analytics;
pub mod calibrate;
pub mod config;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod heatmap;
pub mod objectives;
pub mod protonet;
pub mod trainer;

pub use error::{Error, Result};
