pub mod bundle;
pub mod camera;
pub mod checkpoint;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod renderer;
pub mod shape_gen;
pub mod texture_style;
pub mod trainer;

pub use error::{Error, Result};
