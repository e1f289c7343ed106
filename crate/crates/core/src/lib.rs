//! Multimodal entity linking: feature encoding, attention-based fusion of
//! mention, text and visual features, contrastive training objectives,
//! candidate retrieval and ranking, and entity-representation construction.

pub mod attributes;
pub mod autograd;
pub mod datamodel;
pub mod encoders;
pub mod erpipeline;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod harness;
pub mod objectives;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Matrix;
