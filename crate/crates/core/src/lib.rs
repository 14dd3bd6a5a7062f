pub mod autograd;
pub mod config;
pub mod decode_eval;
pub mod error;
pub mod experiment;
pub mod lbc;
pub mod lm;
pub mod model;
pub mod nn;
pub mod projection;
pub mod synthdata;
pub mod task;
pub mod train;
pub mod vision;

pub use config::RunConfig;
pub use error::{EivenError, Result};
pub use model::{count_trainable, EivenModel, ModelConfig};
