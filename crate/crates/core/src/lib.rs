pub mod corpus;
pub mod cpc;
pub mod envelope;
pub mod error;
pub mod features;
pub mod gmm;
pub mod scoring;
pub mod selection;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
