//! Conditional noise predictor: a 3D U-Net over latents with cross-attention
//! to image tokens and a control branch fed by the partial scan.

mod blocks;
mod config;
mod model;
mod tokens;
mod unet;

pub use blocks::{sinusoidal, Attention, SpatialTransformer, TimeEmbedding, TimeResBlock};
pub use config::DenoiserConfig;
pub use model::{
    encode_targets, fit_latent_scale, latent_batch, train_diffusion, Condition, DiffusionEvent,
    DiffusionLogEntry, DiffusionModel, DiffusionTrainConfig, ImageCondition, TrainingExample,
};
pub use tokens::{
    image_tensor, load_tokens, save_tokens, tokens_tensor, FeatureTokens, TokenEncoder,
};
pub use unet::{
    partial_tensor, CondVars, ControlBranch, DecoderLevel, DenoiserNet, EncoderLevel, UNetEncoder,
};
