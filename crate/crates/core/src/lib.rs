pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod diffusion;
pub mod model;
pub mod params;
pub mod render;
pub mod synthetic;
pub mod training;
pub mod tape;
pub mod temporal_map;
pub mod tensor;

pub use error::{Error, Result};
