//! Cellular sheaves over directed graphs, their in/out-degree Laplacians, and
//! cooperative sheaf diffusion networks trained with a small reverse-mode engine.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod laplacian;
pub mod model;
pub mod params;
pub mod sheaf;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use graph::DirectedGraph;
pub use autodiff::{Tape, Var};
pub use laplacian::{compose_apply, BlockOperator};
pub use params::ParameterStore;
pub use sheaf::{ConformalMap, ConformalMapPair, DirectedSheaf, Role};
pub use tensor::{FeatureMatrix, Tensor};
