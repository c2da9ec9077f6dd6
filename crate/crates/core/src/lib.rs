//! Expert-specialized fine-tuning laboratory for toy mixture-of-experts
//! transformers.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod model;
pub mod routing;
pub mod select;
pub mod train;
pub mod workbench;

pub use autodiff::{Tape, Tensor, Var};
pub use corpus::Corpus;
pub use error::{Error, Result};
pub use model::{MoEModel, MoEModelConfig};
pub use routing::RoutingLog;
