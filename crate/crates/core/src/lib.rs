//! Photosensor-oculography (PS-OG) simulation and shift-robust gaze mapping.
//!
//! The crate is organised as a pipeline:
//!
//! - [`synth_eye`]: parametric periocular images with known gaze and head offset
//! - [`shift`]: sensor-shift generation (Gaussian and rectangular grid) and binning
//! - [`array`]: the 3×5 photosensor array with Gaussian receptive fields
//! - [`dataset`]: supervised datasets, split protocols and normalisation
//! - [`nn`]: the low-power CNN with hand-written backpropagation and Adam
//! - [`trainer`]: from-scratch (FS) and fine-tuning (FT) training regimens
//! - [`metrics`]: spatial accuracy, accuracy maps and per-shift-bin accuracy
//! - [`experiment`]: configuration-driven studies emitting CSV tables and SVG plots

pub mod array;
pub mod dataset;
mod error;
pub mod experiment;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod pgm;
pub mod seed;
pub mod shift;
pub mod synth_eye;
pub mod trainer;

pub use error::{Error, Result};

/// Identifier of a (simulated or recorded) subject.
pub type SubjectId = u32;
