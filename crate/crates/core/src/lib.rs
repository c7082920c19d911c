pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fdaf;
pub mod grad;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod prompt;
pub mod train;
pub mod warping;

pub use config::{Profile, RunConfig};
pub use error::{Error, Result};
pub use model::MirrorSegModel;
