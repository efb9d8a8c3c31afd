pub mod config;
pub mod coreferring;
pub mod data;
pub mod desk;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lm;
pub mod model;
pub mod nn;
pub mod textcodec;
pub mod training;
pub mod verify;
pub mod visual;

pub use error::{Error, Result};
