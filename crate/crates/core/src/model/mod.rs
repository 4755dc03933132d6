//! The gaze decoder: feature projection, head-prompt embedding,
//! transformer blocks with Mixture-of-Experts feed-forward, and the two
//! output heads, plus checkpoint I/O.

mod checkpoint;
mod forward;
mod params;
#[cfg(test)]
mod tests;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{
    attention, decoder_block, embed_head_prompt, expert_mlp, forward_on_tape, gate,
    heatmap_head, inout_head, moe_forward, project_features, rasterize_bbox_mask,
    top_k_indices, BoundDecoder, BoundExpert, ForwardVars, GatingOutput, GazePrediction,
    MoeStats,
};
pub use params::{
    AttentionParams, BlockParams, DecoderConfig, DecoderParams, ExpertParams,
    FeedForwardParams, MoEConfig,
};
