pub mod cli;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod neighborhood;
pub mod pipeline;
pub mod ply;
pub mod predictor;
pub mod renderer;
pub mod rng;
pub mod sampling;
pub mod scene;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
