//! Direct distribution matching for unsupervised domain adaptation of
//! segmentation networks.

mod binio;
pub mod data;
pub mod ddmloss;
pub mod discrepancy;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
