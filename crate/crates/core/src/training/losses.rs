use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{latent_affine_var, DecoderModel, EncoderModel, LatentMasks, LatentVar, Model};
use crate::tensor::{Binding, PadMode, Tape, Tensor, Var};

/// Weights of the L1 and `1 − SSIM` parts of the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconWeights {
    pub l1: f64,
    pub ssim: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        ReconWeights { l1: 0.85, ssim: 0.15 }
    }
}

fn combine<T: Scalar>(tape: &mut Tape<T>, l1: Var, ssim: Var, w: ReconWeights) -> Result<Var> {
    let dissim = tape.scale(ssim, -T::one());
    let dissim = tape.offset(dissim, T::one());
    let a = tape.scale(l1, T::c(w.l1));
    let b = tape.scale(dissim, T::c(w.ssim));
    tape.add(a, b)
}

/// `w_l1·L1 + w_ssim·(1 − SSIM)`.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, w: ReconWeights) -> Result<Var> {
    let l1 = tape.l1_loss(pred, target)?;
    let s = tape.ssim(pred, target)?;
    combine(tape, l1, s, w)
}

/// Reconstruction loss restricted to `mask` (`N×1×H×W`).
pub fn masked_reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    mask: &Tensor<T>,
    w: ReconWeights,
) -> Result<Var> {
    let l1 = tape.masked_l1(pred, target, mask)?;
    let s = tape.masked_ssim(pred, target, mask)?;
    combine(tape, l1, s, w)
}

/// Mean squared difference of `z_t` plus that of `z_b`.
pub fn latent_l2<T: Scalar>(tape: &mut Tape<T>, a: LatentVar, b: LatentVar) -> Result<Var> {
    let t = tape.l2_loss(a.z_t, b.z_t)?;
    let bb = tape.l2_loss(a.z_b, b.z_b)?;
    tape.add(t, bb)
}

pub fn masked_latent_l2<T: Scalar>(tape: &mut Tape<T>, a: LatentVar, b: LatentVar, masks: &LatentMasks<T>) -> Result<Var> {
    let t = tape.masked_l2(a.z_t, b.z_t, &masks.z_t)?;
    let bb = tape.masked_l2(a.z_b, b.z_b, &masks.z_b)?;
    tape.add(t, bb)
}

#[derive(Clone, Copy, Debug)]
pub struct EquivarianceTerms {
    /// Masked L2 between the warped latent and the latent of the warped image.
    pub latent: Var,
    /// Masked reconstruction loss between the warped image and the decoded warped latent.
    pub recon: Var,
}

/// Both terms of the equivariance regularizer for an image batch `x` whose
/// latent `z` is already on the tape. One transform per sample, or one shared.
#[allow(clippy::too_many_arguments)]
pub fn equivariance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &EncoderModel<T>,
    enc_bind: &Binding,
    decoder: &DecoderModel<T>,
    dec_bind: &Binding,
    x: Var,
    z: LatentVar,
    transforms: &[AffineTransform],
    w: ReconWeights,
) -> Result<EquivarianceTerms> {
    let (zf, masks) = latent_affine_var(tape, z, transforms)?;
    let (xf, image_mask) = tape.affine_warp(x, transforms, PadMode::Zeros)?;
    check_mask(&masks.z_t)?;
    check_mask(&masks.z_b)?;
    check_mask(&image_mask)?;
    let ze = encoder.forward(tape, enc_bind, xf)?;
    let latent = masked_latent_l2(tape, zf, ze, &masks)?;
    let decoded = decoder.forward(tape, dec_bind, zf)?;
    let recon = masked_reconstruction_loss(tape, decoded, xf, &image_mask, w)?;
    Ok(EquivarianceTerms { latent, recon })
}

fn check_mask<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    if mask.sum() <= T::zero() {
        return Err(Error::invalid("equivariance_loss", "transform leaves no valid pixels"));
    }
    Ok(())
}

/// Values of the two equivariance terms, without gradients.
pub fn equivariance_terms<T: Scalar>(
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
    x: &Tensor<T>,
    transforms: &[AffineTransform],
    w: ReconWeights,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let eb = encoder.params().bind_frozen(&mut tape);
    let db = decoder.params().bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let z = encoder.forward(&mut tape, &eb, xv)?;
    let t = equivariance_loss(&mut tape, encoder, &eb, decoder, &db, xv, z, transforms, w)?;
    Ok((tape.value(t.latent).item().f64(), tape.value(t.recon).item().f64()))
}

/// Mean over `transforms` of the masked latent L2 between `encode(warp(X))`
/// and `warp(encode(X))`, each transform applied to the whole batch.
pub fn equivariance_residual<T: Scalar>(encoder: &EncoderModel<T>, x: &Tensor<T>, transforms: &[AffineTransform]) -> Result<f64> {
    if transforms.is_empty() {
        return Err(Error::invalid("equivariance_residual", "no transforms"));
    }
    let mut total = 0.0;
    for f in transforms {
        let mut tape = Tape::new();
        let eb = encoder.params().bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let z = encoder.forward(&mut tape, &eb, xv)?;
        let (zf, masks) = latent_affine_var(&mut tape, z, std::slice::from_ref(f))?;
        let (xf, _) = tape.affine_warp(xv, std::slice::from_ref(f), PadMode::Zeros)?;
        let ze = encoder.forward(&mut tape, &eb, xf)?;
        let l = masked_latent_l2(&mut tape, zf, ze, &masks)?;
        total += tape.value(l).item().f64();
    }
    Ok(total / transforms.len() as f64)
}

/// Label value skipped by the segmentation loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Pixel-wise cross-entropy of full-resolution logits.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let labels: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    tape.cross_entropy(logits, &labels, IGNORE_LABEL as u32)
}

/// `SL1(learned, d) + α·SL1(bilinear, d)`, both masked by validity.
pub fn depth_loss<T: Scalar>(
    tape: &mut Tape<T>,
    learned: Var,
    bilinear: Var,
    target: Var,
    mask: &Tensor<T>,
    alpha: f64,
) -> Result<(Var, Var, Var)> {
    let a = tape.smooth_l1(learned, target, mask)?;
    let b = tape.smooth_l1(bilinear, target, mask)?;
    let bw = tape.scale(b, T::c(alpha));
    Ok((tape.add(a, bw)?, a, b))
}
