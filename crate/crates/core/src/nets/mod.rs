//! Toy-scale networks: autoencoder, latent UNet, adapters, and the composed
//! one-step generator with its checkpoint format.

pub mod checkpoint;
pub mod generator;
pub mod pretrain;
pub mod unet;
pub mod vae;

pub use checkpoint::Checkpoint;
pub use generator::{Generator, GeneratorConfig, Prepared, RTS_PLACEMENT};
pub use unet::{Unet, UnetConfig, UNET_RTS_SITES};
pub use vae::{Vae, VaeConfig, VAE_DOWNSAMPLE, VAE_RTS_SITES};
