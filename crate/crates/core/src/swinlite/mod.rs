//! Small shifted-window transformer: patch embedding, (shifted) window
//! attention blocks, patch merging, pooled classification head.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod state;
pub mod window;

pub use config::BackboneConfig;
pub use model::{
    encode, forward_backbone, head, im2col, patch_embed, patch_merging, pool, w_msa, AttnWeights, NoPrompts,
    PromptFeed, Streams, Tag, TokenSequence, View,
};
pub use state::{backbone_specs, head_specs, init_backbone, Bound, ModelState, ParamSpec};
pub use window::{stack_grids, window_partition, window_reverse, ViewGrid, WindowLayout};
