//! Graph pooling through a learned grouping matrix.
//!
//! The crate bundles everything the pooling layer needs: dense tensors, a
//! tape-based reverse-mode autodiff engine, a Jacobi eigensolver with a
//! stabilized backward rule, a DMPNN encoder, the GMPool and NGMPool
//! layers, training utilities and cluster analysis.

pub mod analysis;
pub mod autodiff;
pub mod dmpnn;
pub mod error;
pub mod graph_data;
pub mod linalg;
pub mod model;
pub mod pooling;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use graph_data::{Dataset, Graph, SyntheticSpec, TargetRule, Task};
pub use linalg::{EigBackwardConfig, SymEig};
pub use model::{Model, ModelConfig, Pooling, Readout};
pub use pooling::{GroupingMatrix, PoolingOperator};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainOutcome};
