//! The CST-former network.
//!
//! Three ConvBlocks encode `[B, 7, T, 64]` to `[B, C, T', F']`; `N_CST` CST
//! blocks each apply a local perception unit, the configured sequence of
//! channel (unfolded local embedding), spectral and temporal attentions, and
//! an inverted residual feed-forward network; an FC head maps to
//! multi-ACCDOA vectors through `tanh`.
//!
//! Attention sublayers are post-norm: `LN(x + dropout(MHSA(x)))`. The channel
//! attention normalizes over the channel axis after folding back. Every
//! attention uses `H` heads of width `ceil(D / H)`, so embeddings that are not
//! a multiple of `H` (such as a 25x4 patch) are projected to `H * ceil(D / H)`
//! inside the attention and back to `D` by the output projection.

pub mod analysis;
pub mod config;
pub mod network;
pub mod params;

pub use analysis::{column_cosine_similarity, export_channel_attention, within_cross_similarity, ReshapedAttention};
pub use config::{parse_order, Domain, KernelScheme, ModelConfig, PoolingProfile, Preset};
pub use network::{
    multi_head_attention, stack_features, AttentionMapBundle, AttentionWeights, BlockAttention, Bound, ForwardOutput,
};
pub use params::Model;
