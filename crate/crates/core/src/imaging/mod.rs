//! Images, Bayer mosaics, corruption suite and synthetic scene generation.

mod corrupt;
mod dataset;
mod io;
mod synth;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use dataset::{generate_dataset, DatasetKind, DatasetSpec, Manifest, SampleRecord, Split, MANIFEST_FILE};
pub use io::{load_disparity, load_image, load_labels, save_disparity, save_image, save_labels, DISPARITY_SCALE};
pub use synth::{gen_noise_pair, gen_seg_scene, gen_stereo_pair, gen_texture_scene, StereoPair, MAX_CLASSES, MAX_DISPARITY};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Planar image with values in `[0, 1]`; 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar `C×H×W` data, clamping into `[0, 1]`.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("image", format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape("image", format!("{} values for {channels}x{height}x{width}", data.len())));
        }
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        Tensor::new(shape, self.data.iter().map(|&v| T::c(v as f64)).collect()).expect("shape matches")
    }

    /// Sample `n` of a tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::shape("image", format!("sample {n} of batch {}", s.n)));
        }
        let len = s.sample_len();
        let data = t.data()[n * len..(n + 1) * len].iter().map(|v| v.f64() as f32).collect();
        Self::new(s.c, s.h, s.w, data)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| (v * 255.0).round() / 255.0).collect();
        Image { data, ..self.clone() }
    }

    /// Errors unless both dims are divisible by `multiple`.
    pub fn check_divisible(&self, multiple: usize) -> Result<()> {
        check_divisible(self.height, self.width, multiple)
    }
}

pub(crate) fn check_divisible(h: usize, w: usize, multiple: usize) -> Result<()> {
    if h % multiple == 0 && w % multiple == 0 && h > 0 && w > 0 {
        return Ok(());
    }
    let up = |v: usize| v.div_ceil(multiple).max(1) * multiple;
    Err(Error::Indivisible { h, w, multiple, need_h: up(h), need_w: up(w) })
}

/// Colour recorded at a Bayer site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BayerSite {
    Red,
    Green,
    Blue,
}

impl BayerSite {
    pub fn channel(self) -> usize {
        match self {
            BayerSite::Red => 0,
            BayerSite::Green => 1,
            BayerSite::Blue => 2,
        }
    }
}

/// Single-channel RGGB mosaic.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl BayerImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::invalid("bayer", format!("dims {height}x{width} must be even")));
        }
        if data.len() != height * width {
            return Err(Error::shape("bayer", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(BayerImage { height, width, data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    /// RGGB: R at (even, even), G at (even, odd) and (odd, even), B at (odd, odd).
    pub fn site(y: usize, x: usize) -> BayerSite {
        match (y % 2, x % 2) {
            (0, 0) => BayerSite::Red,
            (1, 1) => BayerSite::Blue,
            _ => BayerSite::Green,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape = Shape::new(1, 1, self.height, self.width);
        Tensor::new(shape, self.data.iter().map(|&v| T::c(v as f64)).collect()).expect("shape matches")
    }

    pub fn to_image(&self) -> Image {
        Image { channels: 1, height: self.height, width: self.width, data: self.data.clone() }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::invalid("bayer", "mosaic must be single-channel"));
        }
        Self::new(img.height(), img.width(), img.data().to_vec())
    }
}

/// Samples an RGB image on the RGGB pattern.
pub fn mosaic(rgb: &Image) -> Result<BayerImage> {
    if rgb.channels() != 3 {
        return Err(Error::invalid("mosaic", format!("expected RGB, got {} channels", rgb.channels())));
    }
    let (h, w) = (rgb.height(), rgb.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("mosaic", format!("dims {h}x{w} must be even")));
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(rgb.get(BayerImage::site(y, x).channel(), y, x));
        }
    }
    BayerImage::new(h, w, data)
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes.max(1)];
        for &l in &self.labels {
            if (l as usize) < h.len() {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Dense disparity in pixels with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Disparity {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Disparity {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape = Shape::new(1, 1, self.height, self.width);
        Tensor::new(shape, self.values.iter().map(|&v| T::c(v as f64)).collect()).expect("shape matches")
    }

    pub fn mask_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape = Shape::new(1, 1, self.height, self.width);
        Tensor::new(shape, self.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect())
            .expect("shape matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gray_mosaic_is_constant() {
        let img = Image::filled(3, 4, 6, 0.37).unwrap();
        let b = mosaic(&img).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn pure_red_lands_on_red_sites_only() {
        let img = Image::from_fn(3, 4, 4, |c, _, _| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let b = mosaic(&img).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(b.get(y, x), expect);
            }
        }
    }

    #[test]
    fn odd_dims_rejected() {
        let img = Image::filled(3, 5, 4, 0.5).unwrap();
        assert!(mosaic(&img).is_err());
        assert!(BayerImage::new(4, 3, vec![0.0; 12]).is_err());
    }

    #[test]
    fn indivisible_names_padding() {
        let err = check_divisible(50, 48, 4).unwrap_err().to_string();
        assert!(err.contains("pad to 52x48"), "{err}");
    }
}
