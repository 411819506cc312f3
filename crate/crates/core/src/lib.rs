//! Core building blocks for fiber-composite stress/damage surrogates.
//!
//! The crate covers everything that is not a neural network: random fiber
//! microstructures ([`microgen`]), the per-pixel elasto-plastic damage
//! oracle that produces ground-truth deformation histories ([`material`]),
//! grid ingestion and normalization ([`mesh_ingest`], [`case_io`]), the
//! training objectives ([`losses`]) and the evaluation metrics
//! ([`crackpath`], [`report`]).

pub mod case_io;
pub mod crackpath;
pub mod error;
pub mod fields;
pub mod losses;
pub mod material;
pub mod mesh_ingest;
pub mod microgen;
pub mod report;
pub mod scalar;

pub use error::{Error, Result};
pub use fields::{Channel, DeformationSequence, FieldFrame, Grid};
pub use scalar::Scalar;
