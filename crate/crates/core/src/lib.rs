//! Sumformer models, from-scratch attention heads (softmax, Linformer,
//! Performer), the fixed-weight constructions that make those heads compute
//! sums of token features, and the tooling to check and train all of them.

pub mod attention;
pub mod construction;
pub mod discrete;
pub mod equivariance;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod mlp;
pub mod multisym;
pub mod sumformer;
pub mod tape;
pub mod targets;
pub mod tensor;
pub mod train;
pub mod verify;

pub use attention::{AttentionHead, AttentionKind};
pub use construction::{build_sum_extraction, PhiMap, SumExtraction, SumExtractionConfig};
pub use discrete::{build_discrete_sumformer, DiscreteSumformer};
pub use error::{Error, Result};
pub use sumformer::{build_continuous_sumformer, SumformerModel};
pub use targets::TargetFunction;
pub use tensor::Matrix;
