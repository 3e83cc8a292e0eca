//! Differentiable building blocks: graph operations plus the small
//! parameterized layers composed from them.

pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod layers;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod roi_align;
pub mod shape;

pub use attention::attention_weights;
pub use layers::{drop_path, Cbam, Conv2d, CrossAttention, FeedForward, LayerNorm, Linear};
pub use norm::{BatchNormState, BN_MOMENTUM, NORM_EPS};
pub use roi_align::RoiBox;

#[cfg(test)]
mod tests;
