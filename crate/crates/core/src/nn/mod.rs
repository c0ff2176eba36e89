//! Neural-network operators and parameterized layers.

pub mod attention;
pub mod conv;
pub mod deform;
pub mod interp;
pub mod layers;
pub mod norm;
pub mod params;
pub mod pool;

pub use attention::{scaled_dot_product, AttentionParams, KeyMask, MultiHeadAttention};
pub use conv::ConvParams;
pub use deform::MsDeformAttn;
pub use interp::resize_bilinear;
pub use layers::{Activation, BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp};
pub use norm::{BatchStats, NORM_EPS};
pub use params::{Ctx, Init, ParamBuilder, ParamEntry, ParamGroup, ParamId, ParamRole, ParamStore};
