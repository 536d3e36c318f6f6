//! Loop-consistent sequential image-to-image translation.
//!
//! A single generator `G(x, i) = Dec(T^k(Enc(x)))` is applied recurrently
//! around a cycle of `n` domains. Each domain has its own PatchGAN
//! discriminator, and an L1 loop-consistency term ties the full `n`-step
//! loop back to the input.
//!
//! Module map:
//! - [`seq`]: domain cycle, step indices and the loop schedule
//! - [`model`]: generator (with per-step AdaIN bank) and discriminators
//! - [`objective`]: losses, the n-loop train step, Adam and the LR schedule
//! - [`data`]: per-domain datasets, augmentation and synthetic generators
//! - [`eval`]: loop reconstruction, domain-classifier metrics, grids
//! - [`checkpoint`]: manifest + raw little-endian f32 arrays
//! - [`cli`]: the `loopgan` command line

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod objective;
pub mod params;
pub mod rng;
pub mod seq;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ArchConfig, DiscriminatorSet, FeatureMap, Generator, ImageBatch};
pub use seq::{SequenceSpec, StepIndex};
pub use tensor::{Float, Tensor};
