pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod guided;
pub mod imageio;
pub mod latent;
pub mod latent_opt;
pub mod nets;
pub mod pipeline;
pub mod text_align;
pub mod toyfaces;
pub mod util;

pub use error::{Error, Result};
