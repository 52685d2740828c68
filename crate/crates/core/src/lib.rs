pub mod analysis;
pub mod boxsim;
pub mod crr;
pub mod error;
pub mod harness;
pub mod kv;
pub mod mpo;
pub mod replay;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
