//! File formats, training sessions and the command line around
//! [`msfnet_core`].

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod pfm;
pub mod session;
pub mod study;

pub use error::{IoError, Result};
