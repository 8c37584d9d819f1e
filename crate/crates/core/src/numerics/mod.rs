//! Deterministic dense arrays, reverse-mode gradients over registered
//! trainables, the AdamW update rule, and the seeded random stream.

pub mod autodiff;
pub mod finite_diff;
pub mod optimizer;
pub mod rng;
pub mod tensor;

pub use autodiff::{param_constructions, ParamSet, Tape, TrainableParam, Value};
pub use optimizer::{adamw_step, AdamWConfig, OptimizerState};
pub use rng::{derive_seed, RandomStream};
pub use tensor::{l2_normalize_rows, matmul, matmul_at, matmul_bt, mse, softmax, Tensor};
