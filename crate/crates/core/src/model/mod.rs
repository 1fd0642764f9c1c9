//! The content-attentive message-passing model.

pub mod config;
pub mod forward;
pub mod layers;

pub use config::{
    layer_param, Aggregation, AttentionKind, Combination, DropoutConfig, Model, ModelConfig,
    ModelKind, Task,
};
pub use forward::{
    attention_for_pairs, eval_loss, forward, loss_and_grad, predict, AttentionRecord,
    LayerAttention, LayerState, Mode,
};
