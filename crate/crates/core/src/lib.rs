pub mod archspace;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod partaware;
pub mod retrieval;
pub mod searcher;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
