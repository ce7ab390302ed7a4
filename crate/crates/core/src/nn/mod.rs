//! Dense f32 numerics: parameter storage with a binary checkpoint format, a
//! SiLU feed-forward network with exact backpropagation, Adam, and sinusoidal
//! timestep features.

mod adam;
mod embed;
mod gemm;
mod mlp;
mod params;

pub use adam::{adam_step, Adam};
pub use embed::sinusoidal_embed;
pub use mlp::{init_network, Activation, ForwardCache, NetConfig, Network};
pub use params::{Grads, ParamStore, Tensor, CHECKPOINT_MAGIC};

pub(crate) use params::Reader;
