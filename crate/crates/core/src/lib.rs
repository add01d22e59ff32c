pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scenegen;
pub mod spatial;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
