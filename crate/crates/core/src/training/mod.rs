//! Training stages, their losses, configs and run reports.

mod config;
mod losses;
mod report;
mod stages;

pub use config::{DenoiseTarget, Stage, TrainConfig};
pub use losses::{
    depth_loss, equivariance_loss, equivariance_residual, equivariance_terms, latent_l2, masked_latent_l2,
    masked_reconstruction_loss, reconstruction_loss, seg_loss, EquivarianceTerms, ReconWeights, IGNORE_LABEL,
};
pub use report::{RunDir, StageReport, CONFIG_ECHO, REPORT_FILE};
pub use stages::{
    denoise_scores, depth_scores, equivariance_transforms, held_out_equivariance, init_denoiser, init_raw_encoder,
    seg_scores, train_denoiser, train_denoiser_from, train_depth, train_depth_from, train_raw_encoder,
    train_raw_encoder_from, train_rgb_autoencoder, train_rgb_autoencoder_from, train_seg, train_seg_from, Autoencoder,
    DenoiseScores, EQUIVARIANCE_IMAGES, EQUIVARIANCE_TRANSFORMS,
};

use crate::error::{Error, Result};
use crate::imaging::{BayerImage, Image, LabelMap, Manifest, Split, StereoPair};

fn missing(what: &str, id: &str) -> Error {
    Error::Data(format!("record `{id}` has no {what}"))
}

/// RGB images of one split.
pub fn load_rgb(m: &Manifest, split: Split) -> Result<Vec<Image>> {
    m.split(split).map(|r| m.rgb(r)).collect()
}

/// `(bayer, rgb)` pairs of one split.
pub fn load_raw_pairs(m: &Manifest, split: Split) -> Result<Vec<(BayerImage, Image)>> {
    m.split(split)
        .map(|r| {
            r.bayer.as_ref().ok_or_else(|| missing("paired bayer mosaic", &r.id))?;
            Ok((m.bayer(r)?, m.rgb(r)?))
        })
        .collect()
}

/// `(noisy, clean)` pairs of one split.
pub fn load_noise_pairs(m: &Manifest, split: Split) -> Result<Vec<(Image, Image)>> {
    m.split(split)
        .map(|r| {
            r.noisy.as_ref().ok_or_else(|| missing("noisy image", &r.id))?;
            Ok((m.noisy(r)?, m.rgb(r)?))
        })
        .collect()
}

pub fn load_seg(m: &Manifest, split: Split) -> Result<Vec<(Image, LabelMap)>> {
    m.split(split)
        .map(|r| {
            r.labels.as_ref().ok_or_else(|| missing("label map", &r.id))?;
            Ok((m.rgb(r)?, m.labels(r)?))
        })
        .collect()
}

pub fn load_stereo(m: &Manifest, split: Split) -> Result<Vec<StereoPair>> {
    m.split(split)
        .map(|r| {
            r.right.as_ref().ok_or_else(|| missing("right view", &r.id))?;
            Ok(StereoPair { left: m.rgb(r)?, right: m.right(r)?, disparity: m.disparity(r)? })
        })
        .collect()
}
