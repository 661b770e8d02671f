pub mod bench;
pub mod blackbox;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod ndt;
pub mod tree;

pub use error::{Error, Result};
