pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod layers;
pub mod numerics;
pub mod text;
pub mod trainer;
pub mod unet;
pub mod vico;

pub use error::{Error, Result};
