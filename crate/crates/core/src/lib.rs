//! Adaptive-region slide encoder: patch-grid partitioning, region attention,
//! fusion pooling, two-stage pretraining and linear-probe evaluation.

pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pretrain;
pub mod region;
pub mod spf;
pub mod synth;
pub mod tensor;

pub use error::{CareError, Result};
pub use model::{CareEncoder, CareForward, ModelConfig};
pub use region::{Anchor, PatchSet, RegionAssignment, SubregionGrid};
pub use spf::SlideEmbedding;
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
