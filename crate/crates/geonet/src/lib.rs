//! Random neural architectures generated from an anisotropic Gaussian random
//! field on a triangulated torus.

pub mod basis_fields;
pub mod chaos_verify;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod latent_field;
pub mod likelihood;
pub mod neuron_process;
pub mod rng;
pub mod solver;
pub mod sparse;
pub mod topology;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
