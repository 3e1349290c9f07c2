//! Neural primitives with analytic forward and backward passes.
//!
//! Every op reads parameters from a [`ParamStore`] snapshot and accumulates
//! parameter gradients into a separate [`Grads`] map, so forward/backward can
//! fan out over tiles or batch items with read-only parameter access.

pub mod attention;
pub mod gradcheck;
pub mod gumbel;
pub mod linalg;
pub mod ops;
pub mod params;
pub mod patches;
pub mod transformer;

pub use attention::{CrossAttention, WindowAttention};
pub use gradcheck::grad_check;
pub use gumbel::{gumbel_noise, gumbel_softmax, gumbel_softmax_backward};
pub use linalg::{matmul, Dims};
pub use ops::{Conv2d, LayerNorm, Linear, Mlp};
pub use params::{Grads, ParamStore};
pub use patches::{pixel_shuffle, pixel_unshuffle, PatchMerge};
pub use transformer::TransformerLayer;
