pub mod adapt;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io_util;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, BnMode, Pass};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, MaskKind};
pub use rng::SeededRng;
pub use tensor::{Gradients, Graph, Tensor, Var};
