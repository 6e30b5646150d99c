//! Network building blocks: dilated 1-D convolutions (masked and
//! unmasked), sub-batch normalization, n-gram embedding bags, and the two
//! residual block variants.

pub mod blocks;
pub mod conv;
pub mod embed;
pub mod norm;

pub use blocks::{
    block_forward, mu_block, relu_block, AnyBlockParams, AnyBlockVars, BlockSpec, BlockVariant,
    MuBlockParams, MuParams, NormCtx, ReluBlockParams,
};
pub use conv::{conv1d, Conv1dSpec, ConvParams};
pub use embed::{embed_bag, EmbedParams};
pub use norm::{sub_batch_norm, BnMode, RunningStats, SubBnParams};
