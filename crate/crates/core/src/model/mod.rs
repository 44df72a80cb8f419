//! The annotator-query transformer, its ablation variants, the training loss
//! and checkpoint storage.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod loss;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, Variant, FF_MULT};
pub use forward::{
    forward, forward_image, forward_on_tape, forward_sequence, predict, AttentionRecord, BlockAttention,
    ForwardPass, FrameLayout, PerAnnotatorLogits,
};
pub use loss::total_loss;
pub use params::{init_model, ModelParams, Param, ParamKind, Pid};
