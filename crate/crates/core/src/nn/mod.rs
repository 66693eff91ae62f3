//! Small tensor engine: tape autodiff, layers, Adam, checkpoints.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{
    dropout, kaiming_uniform, normal_init, sinusoidal_encoding, BatchNorm, Conv3d, ConvTranspose3d, LayerNorm,
    Linear, Mlp, MlpConfig, MultiHeadAttention, NormKind,
};
pub use optim::Adam;
pub use params::{Binding, Mode, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Scalar, Tensor};

