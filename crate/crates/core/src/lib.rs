//! Training of QCFS-activation networks, ANN→SNN conversion, and
//! integrate-and-fire simulation with conversion-error analysis.

pub mod analysis;
pub mod checkpoint;
pub mod converter;
pub mod data;
pub mod error;
pub mod kernels;
pub mod network;
pub mod qcfs;
pub mod snn;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{Checkpoint, Metadata, Model};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use network::{
    ActivationKind, AnnModel, AnnOutput, Architecture, IfParams, Layer, LayerSpec, LinearOp, ParamKind, SnnLayer,
    SnnModel,
};
pub use qcfs::QcfsParams;
pub use snn::{SimOutput, SimState, SimTrace};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
pub use trainer::{EpochStats, TrainConfig, TrainOutcome};
