//! Hierarchical language-embedded Gaussian splatting on synthetic scenes.

pub mod embed;
pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod plot;
pub mod query;
pub mod raster;
pub mod scene;
pub mod train;
pub mod view;

pub use error::{Error, Result};
