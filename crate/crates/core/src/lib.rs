pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod formula;
pub mod functional;
pub mod measure;
pub mod numeric;
pub mod process;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
