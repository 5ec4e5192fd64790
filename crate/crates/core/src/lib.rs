pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod nn;
pub mod structure;
pub mod train;
pub mod vae;
pub mod video;

pub use error::{Error, Result};
