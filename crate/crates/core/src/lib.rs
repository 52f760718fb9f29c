//! Encoder-decoder sequence recognition with auxiliary classifiers on
//! intermediate decoder layers.

pub mod calibration;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod ilm;
pub mod model;
pub mod objective;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
