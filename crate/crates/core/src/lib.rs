pub mod chain;
pub mod engine;
pub mod error;
pub mod netgraph;
pub mod oracle;
pub mod pruning;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
