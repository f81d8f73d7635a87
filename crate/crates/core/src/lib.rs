pub mod data;
pub mod error;
pub mod evalscore;
pub mod exec;
pub mod gating;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Real, Rng, Tensor};
