//! Decomposition adapters for frozen vision backbones: tensors and autodiff,
//! robust PCA, the adapters themselves, a toy segmentation backbone,
//! synthetic manipulation data, training and evaluation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod rng;
pub mod rpca;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use param::{Graph, ParamId, ParamStore};
pub use tensor::Tensor;

pub use adapter::{AdapterConfig, AdapterKind, Placement};
pub use backbone::{BackboneConfig, Model};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Distortion, Kind, KindMix, Sample};
pub use loss::LossConfig;
pub use optim::{AdamW, OptimConfig};
pub use param::Census;
pub use rpca::{RpcaConfig, RpcaResult};
pub use train::{EvalConfig, EvalReport, F1Mode, TrainConfig};
