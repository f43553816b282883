//! Small fully connected networks with hand-written reverse-mode gradients.

mod adam;
mod denoiser;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use denoiser::{
    loss_dm, loss_kd, time_embedding, Denoiser, DenoiserConfig, DenoiserTape, Gradients, ParamEntry,
};
pub use mlp::{Activation, Mlp, MlpTape};
