pub mod analysis;
pub mod autodiff;
pub mod bank;
pub mod error;
pub mod eval;
pub mod kde;
pub mod network;
pub mod objective;
pub mod pdf;
pub mod persist;
pub mod rng;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
