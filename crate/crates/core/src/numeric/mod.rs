//! Dense `f64` arithmetic, the differentiation tape, parameters and Adam.

pub mod activation;
pub mod checkpoint;
pub mod params;
pub mod tape;
pub mod tensor;

pub use activation::{leaky_relu, relu, sigmoid, softmax, ATTENTION_SLOPE};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{
    adam_step, finite_difference_grad, AdamConfig, AdamState, Binding, GradCheckReport, Param,
    ParamGrads, ParamStore,
};
pub use tape::{AttentionPlan, Gradients, Segments, Tape, Var};
pub use tensor::{dot, Tensor};
