//! Adaptive mixture of LoRA experts.
//!
//! A frozen linear layer is adapted by several low-rank experts. A softmax
//! gate scores the experts per input and a small threshold network decides,
//! per input, how many of them take part. The crate carries the layer with
//! hand-written backward passes, a toy transformer built from it, a training
//! loop, activation telemetry and the finite-difference oracles that check
//! all of it.

pub mod error;
pub mod gradcheck;
pub mod gating;
pub mod lora;
pub mod model;
pub mod moe_layer;
pub mod numeric;
pub mod oracle;
pub mod telemetry;
pub mod training;

pub use error::{Error, Result};
pub use gating::{adaptive_weights, threshold_weights, topk_weights, GateNetwork, MixWeights, ThresholdNetwork};
pub use lora::LoraExpert;
pub use model::{ModelInput, ToyModel, ToyModelConfig};
pub use moe_layer::{count_active, ActivationRecord, AdaMoleLinear, AdapterConfig, MixMode};
pub use numeric::{Matrix, ParamGroup, Parameter, Parameterized};
pub use telemetry::{ActivationStats, Projection};
pub use training::{train, AdamWState, SyntheticTask, TaskSpec, TrainConfig, TrainReport};
