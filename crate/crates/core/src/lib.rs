pub mod assembly;
pub mod backbone;
pub mod datapipe;
pub mod describe;
pub mod efficiency;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mic;
pub mod nn;
pub mod ops;
pub mod params;
pub mod rsl;
pub mod run;

pub use error::{Error, Result};
