//! Federated growth of transformers from heterogeneous pre-trained small models.
//!
//! Each simulated client expands its own small encoder into a shared
//! intermediate shape with a private growth operator, then into a common large
//! shape with a second operator that is averaged across clients by a parameter
//! server. Only the second operator ever leaves a client.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ligo;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod server;
pub mod tape;
pub mod tensor;

pub use error::{ConfigIssue, Error, Result};
pub use ligo::{GrowthOperator, InitScheme, WidthMaps};
pub use model::ModelConfig;
pub use params::{BoundParams, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
