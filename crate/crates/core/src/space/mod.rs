//! The latent space: latent values, encoder and decoder models, latent-space
//! warps and the on-disk formats.

mod codec;
mod format;
pub mod nn;

pub use codec::{DecoderModel, EncoderModel};
pub use format::{
    load_checkpoint, load_latent, read_checkpoint, read_latent, save_checkpoint, save_latent, write_checkpoint,
    write_latent, Checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION, LATENT_MAGIC, SUPPORTED_VERSIONS,
};
pub use nn::{ConvSpec, Layer, Model, ModelKind, Network, ResBlock};

use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{PadMode, Tape, Tensor, Var};

/// Two-scale latent: `z_t` at quarter and `z_b` at half the source resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T> {
    pub z_t: Tensor<T>,
    pub z_b: Tensor<T>,
}

impl<T: Scalar> Latent<T> {
    pub fn new(z_t: Tensor<T>, z_b: Tensor<T>) -> Result<Self> {
        check_streams(z_t.shape(), z_b.shape())?;
        Ok(Latent { z_t, z_b })
    }

    pub fn batch(&self) -> usize {
        self.z_b.shape().n
    }

    pub fn channels(&self) -> usize {
        self.z_b.shape().c
    }

    /// Source image `(H, W)`.
    pub fn source_dims(&self) -> (usize, usize) {
        (self.z_b.shape().h * 2, self.z_b.shape().w * 2)
    }

    pub fn sample(&self, i: usize) -> Latent<T> {
        Latent { z_t: self.z_t.sample(i), z_b: self.z_b.sample(i) }
    }

    pub fn stack(items: &[Latent<T>]) -> Result<Self> {
        let z_t: Vec<_> = items.iter().map(|l| l.z_t.clone()).collect();
        let z_b: Vec<_> = items.iter().map(|l| l.z_b.clone()).collect();
        Latent::new(Tensor::stack(&z_t)?, Tensor::stack(&z_b)?)
    }

    pub fn is_finite(&self) -> bool {
        self.z_t.is_finite() && self.z_b.is_finite()
    }

    /// Flattened `[z_t, z_b]` of one sample.
    pub fn features(&self, i: usize) -> Vec<T> {
        let mut v = self.z_t.sample(i).into_data();
        v.extend(self.z_b.sample(i).into_data());
        v
    }

    pub fn cast<U: Scalar>(&self) -> Latent<U> {
        Latent { z_t: self.z_t.cast(), z_b: self.z_b.cast() }
    }

    pub fn record(&self, tape: &mut Tape<T>) -> LatentVar {
        LatentVar { z_t: tape.constant(self.z_t.clone()), z_b: tape.constant(self.z_b.clone()) }
    }
}

fn check_streams(t: crate::tensor::Shape, b: crate::tensor::Shape) -> Result<()> {
    if t.n != b.n || t.c != b.c {
        return Err(Error::shape("latent", format!("z_t {t} and z_b {b} disagree in batch or channels")));
    }
    if b.h != 2 * t.h || b.w != 2 * t.w {
        return Err(Error::shape("latent", format!("z_b {b} must be exactly twice z_t {t} spatially")));
    }
    Ok(())
}

/// A latent recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentVar {
    pub z_t: Var,
    pub z_b: Var,
}

impl LatentVar {
    pub fn value<T: Scalar>(&self, tape: &Tape<T>) -> Latent<T> {
        Latent { z_t: tape.value(self.z_t).clone(), z_b: tape.value(self.z_b).clone() }
    }

    pub fn check<T: Scalar>(&self, tape: &Tape<T>) -> Result<()> {
        check_streams(tape.shape(self.z_t), tape.shape(self.z_b))
    }
}

/// Validity masks of a latent warp, one per stream (`N×1×h×w`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMasks<T> {
    pub z_t: Tensor<T>,
    pub z_b: Tensor<T>,
}

/// Applies the same normalized-coordinate warp to both streams with zero padding.
pub fn latent_affine_var<T: Scalar>(
    tape: &mut Tape<T>,
    z: LatentVar,
    transforms: &[AffineTransform],
) -> Result<(LatentVar, LatentMasks<T>)> {
    let (z_t, m_t) = tape.affine_warp(z.z_t, transforms, PadMode::Zeros)?;
    let (z_b, m_b) = tape.affine_warp(z.z_b, transforms, PadMode::Zeros)?;
    Ok((LatentVar { z_t, z_b }, LatentMasks { z_t: m_t, z_b: m_b }))
}

/// Warps a latent. One transform for the whole batch or one per sample.
pub fn latent_affine<T: Scalar>(z: &Latent<T>, transforms: &[AffineTransform]) -> Result<(Latent<T>, LatentMasks<T>)> {
    let mut tape = Tape::new();
    let v = z.record(&mut tape);
    let (out, masks) = latent_affine_var(&mut tape, v, transforms)?;
    Ok((out.value(&tape), masks))
}
