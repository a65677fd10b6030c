//! The detail-fidelity attention network: residual channel-attention blocks,
//! attention modules, the full super-resolution network, complexity counters
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod network;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::{Components, ModelConfig, DIV2K_RGB_MEAN};
pub use count::{count_flops, count_params, count_reference_flops, expected_params, ParamCount};
pub use network::{Attention, DefianModel, Rcab};
