//! Evolutionary search for convolutional architectures that align random-weight
//! network features with voxel response data.
//!
//! The crate is organized around the stages of the search pipeline:
//!
//! - [`genome`]: the architecture genome, its constrained grammar and serialization
//! - [`randnet`]: deterministic random-weight initialization and forward passes
//! - [`metrics`]: ridge-regression encoding, RSA, and noise-ceiling scoring
//! - [`evolve`]: selection, mutation, crossover, and the generation loop
//! - [`data`]: dataset files, the `.evot` tensor format, and synthetic data
//! - [`rng`]: the seeded random stream everything derives from

pub mod data;
pub mod evolve;
pub mod genome;
pub mod metrics;
pub mod randnet;
pub mod rng;
