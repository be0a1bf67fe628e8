//! Dense tensors, reverse-mode differentiation, optimizers and schedules.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{LayerNorm, Linear};
pub use optim::{clip_gradients, global_norm, LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, ScheduleKind};
pub use params::{glorot, Bound, ParamId, ParamSet};
pub use tape::{cosine, softmax, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
