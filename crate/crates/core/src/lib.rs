//! Hierarchy-aware contrastive training of class embeddings for zero-shot
//! classification over a class taxonomy.

pub mod error;
pub mod experiment;
pub mod featurestore;
pub mod formats;
pub mod hgrloss;
pub mod hierarchy;
pub mod levelweights;
pub mod negsampling;
pub mod rng;
pub mod synthgen;
pub mod trainer;
pub mod zsmetrics;

pub use error::{Error, Result};
