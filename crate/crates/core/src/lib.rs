//! Attention with learned tangent-space transforms, metric tensors and
//! parallel transport between token positions, plus Gaussian locality
//! focusing, on top of a small reverse-mode engine and a tiny Vision
//! Transformer training stack.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod positional;
pub mod presets;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use geometry::{TangentTransform, TransformKind};
pub use model::{InputSpec, ViTConfig, Vit};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use positional::{Layout, Mechanism};
pub use tensor::Tensor;
