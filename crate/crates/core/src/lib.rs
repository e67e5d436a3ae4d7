//! Out-of-distribution detection lab: small dense networks trained from
//! scratch, weight averaging, iterative magnitude pruning with rewinding,
//! post-hoc OOD scorers, detection metrics, and the Gaussian-model theory of
//! why averaging and sparsity help.

pub mod averaging;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod landscape;
pub mod metrics;
pub mod netcore;
pub mod pruning;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use netcore::{MlpSpec, ParamSet, SgdConfig};
pub use tensor::Tensor2;
