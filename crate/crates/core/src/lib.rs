//! Label-conditioned, multi-domain restoration of short-acquisition image
//! volumes with a wavelet encoder-decoder trained in a cycle-consistent
//! adversarial setting.

pub mod conditioning;
pub mod data;
pub mod error;
pub mod label_estimation;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
