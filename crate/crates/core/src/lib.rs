#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod cbamp;
pub mod channel;
pub mod config;
pub mod decoupling;
pub mod detection;
pub mod error;
pub mod experiments;
pub mod mmv;
pub mod numerics;
pub mod oracle;

pub use error::{Error, Result};
