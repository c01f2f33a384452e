pub mod architecture;
pub mod em;
pub mod experiments;
pub mod metrics;
pub mod optimization;
pub mod error;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};
