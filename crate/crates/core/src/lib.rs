//! Noise-injected spiking networks: trained as single-step networks, run as
//! multistep LIF networks.

// NaN-rejecting validation reads as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod kernels;
pub mod rng;
pub mod runtime;
pub mod spiking;
pub mod tensor;
pub mod trainer;

pub use arch::{init_params, parse_arch, LayerSpec, NetworkSpec, ParamSet, Readout};
pub use autodiff::{Graph, NodeId, SurrogateParams};
pub use dataio::{Checkpoint, Dataset, Split};
pub use error::{Error, Result};
pub use runtime::{EvalOptions, EvalResult, NoiseKeys, RunMode, Stage};
pub use spiking::{LIFParams, LIFState, NoiseFamily, NoiseSpec, RenormParams};
pub use tensor::Tensor;
pub use trainer::{train_stage1, EpochMetrics, TrainConfig, Trainer};
