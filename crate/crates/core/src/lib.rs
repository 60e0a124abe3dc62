pub mod bbox;
pub mod checks;
pub mod csif;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod evalkit;
pub mod gradcheck;
pub mod nn;
pub mod srm;
pub mod synth;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use tensor::Tensor;
