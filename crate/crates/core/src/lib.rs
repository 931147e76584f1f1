//! Contextual recurrent units: GRU cells whose gate inputs come from
//! same-length convolutions over a local window of word embeddings.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rc_features;
pub mod recurrent;
pub mod tensor;
pub mod verify;

pub use autodiff::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use params::Parameters;
pub use tensor::Tensor;
