//! Masked-autoencoder pretraining and segmentation fine-tuning for 3D volumes.
//!
//! The pipeline: cut a volume into `s³` patches, mask most of them, encode
//! the visible ones with a shifted linear-window ViT, decode the full
//! sequence with a shared mask token, and score reconstructions with
//! per-patch weights derived from 3D gradient-orientation histograms.
//! Position encodings give left-right mirrored patches identical codes.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64`.

pub mod asa;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod informativeness;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patching;
pub mod phantom;
pub mod position;
pub mod rng;
pub mod seg;
pub mod tape;
pub mod tensor;
pub mod volume;

pub use asa::{AsaConfig, AsaModel, LossKind, PretrainState};
pub use attention::AttentionConfig;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{AsaError, Result};
pub use informativeness::{GradientField, InformativenessMap};
pub use metrics::SegMetrics;
pub use optim::{OptimizerConfig, SgdConfig};
pub use params::{ParamId, ParamStore};
pub use patching::{MaskPlan, PatchGrid};
pub use phantom::PhantomSpec;
pub use position::{EncodingKind, EncodingTable};
pub use seg::{SegConfig, SegModel};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use volume::Volume;
