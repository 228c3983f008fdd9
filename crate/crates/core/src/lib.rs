//! Fixed-rate compression of MIMO channel state information.
//!
//! An encoder network maps a cropped angular-delay CSI block to 64 continuous
//! vectors, each replaced by its nearest entry in a trainable codebook; the
//! selected indices form a `64 * log2(N_v)`-bit codeword. The decoder
//! dequantizes the codeword, up-projects it into conditioning features and
//! runs a deterministic conditional diffusion backward process, optionally
//! conditioned on uplink CSI available only at the receiver.
//!
//! Module map:
//!
//! * [`data`]: synthetic UL/DL multipath generator and the dataset file format.
//! * [`transform`]: angular-delay transforms, normalization and NMSE.
//! * [`vq`]: codebook quantization, codeword packing and the codeword container.
//! * [`nn`]: encoder, up-projection and conditional U-Net denoiser.
//! * [`diffusion`]: noise schedule, forward perturbation and the DDIM decoder.
//! * [`model`]: the assembled diffusion codec.
//! * [`training`]: the training loop, Adam and checkpoints.
//! * [`baseline`]: uniform-quantization autoencoder baseline.
//! * [`eval`]: NMSE evaluation, rate-distortion sweeps and reports.

pub mod baseline;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;
pub mod transform;
pub mod vq;

pub use baseline::{BaselineCodec, BaselineConfig};
pub use data::{ChannelConfig, CsiSample, Dataset, Split};
pub use diffusion::NoiseSchedule;
pub use error::{Error, Result};
pub use eval::{Codec, RdPoint};
pub use model::DiffusionCodec;
pub use nn::ArchDescriptor;
pub use training::{TrainState, TrainingConfig};
pub use transform::{AngularDelayBlock, Normalizer};
pub use vq::{Codebook, Codeword};

/// Number of vectors per codeword (the 8x8 encoder output grid).
pub const CODE_VECTORS: usize = 64;
/// Side length of the encoder's output grid.
pub const CODE_GRID: usize = 8;
/// Angle and delay extent of a cropped angular-delay block.
pub const AD_SIZE: usize = 32;
