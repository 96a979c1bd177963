//! Shared neural latent space for RGB and RAW images.
//!
//! An encoder maps an image to a two-scale latent `z = [z_t, z_b]`
//! (`z_b` at half resolution, `z_t` at quarter resolution). A decoder maps
//! the latent back to RGB, and task heads (denoising, segmentation, stereo
//! disparity) consume the latent directly instead of pixels. The latent is
//! trained to commute with affine warps, so geometric edits can be applied
//! in latent space.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient verification); the aliases below fix the usual choices.

pub mod affine;
pub mod error;
pub mod eval;
pub mod heads;
pub mod imaging;
pub mod scalar;
pub mod space;
pub mod tensor;
pub mod training;

pub use affine::{AffineRanges, AffineTransform};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tape, Tensor};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "NS_THREADS";

/// Reads [`THREADS_ENV`]; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} = {v:?}; expected a positive integer"))),
        },
    }
}

/// Sizes the global worker pool. Call once, before any numeric work.
/// Results do not depend on the thread count.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
