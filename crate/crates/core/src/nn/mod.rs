//! Dense 64-bit tensors, a reverse-mode tape, attention building blocks and
//! an Adam optimiser.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, Adam};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheck};
pub use layers::{DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{huber_value, AttentionBlock, AttentionPlan, Axis, SparseMatrix, Tape, Var};
pub use tensor::{sinusoidal_positions, Tensor};
