pub mod config;
pub mod cpa;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod pga;
pub mod polarization;
pub mod run;
pub mod stages;

pub use error::{Error, Result};
pub use model::{ModelConfig, ShareCmp};
pub use stages::StageSet;

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/polarization.md")]
    mod polarization {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
