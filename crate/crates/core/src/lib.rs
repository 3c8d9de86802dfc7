pub mod encoders;
pub mod error;
pub mod harness;
pub mod heads;
pub mod numerics;
pub mod objective;
pub mod repspace;
pub mod trainer;

pub use error::{MmrlError, Result};
