pub mod aie;
pub mod checkpoint;
pub mod clue;
pub mod error;
pub mod evalkit;
pub mod m2d;
pub mod mixsim;
pub mod model;
pub mod nn;
pub mod signal;
pub mod soundbeam;
pub mod trainer;
pub mod waveformer;

pub use candle_core::DType;
pub use error::{Error, Result};
