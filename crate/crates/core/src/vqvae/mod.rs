//! Vector-quantised autoencoder over TSDF grids: encoder, nearest-codebook
//! quantisation with straight-through gradients, decoder, the combined 3D /
//! rendered-2D / adversarial objective, and training.

mod disc;
mod loss;
mod model;
mod quantize;
mod train;

pub use disc::{discriminator_loss, normals_tensor, PatchDiscriminator};
pub use loss::{render_l1, vqvae_loss, FrozenState, LossOutput, LossTerms, QuantMode, ViewTarget};
pub use model::{Decoder, Encoder, LatentCode, ResBlock, VqVaeConfig, VqVaeNet};
pub use quantize::{nearest_indices, quantize, Codebook};
pub use train::{train_vqvae, TrainEvent, TrainLogEntry, VqVae, VqVaeTrainConfig};
