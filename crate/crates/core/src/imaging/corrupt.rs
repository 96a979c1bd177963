//! Appearance corruptions in the spirit of ImageNet-C.
//!
//! Severity tables (index = severity − 1):
//!
//! | kind           | parameter                         | 1     | 2     | 3     | 4     | 5     |
//! |----------------|-----------------------------------|-------|-------|-------|-------|-------|
//! | gaussian_noise | noise std                         | 0.04  | 0.06  | 0.08  | 0.10  | 0.12  |
//! | shot_noise     | photons at full scale             | 60    | 25    | 12    | 5     | 3     |
//! | motion_blur    | line kernel length (px)           | 3     | 5     | 7     | 9     | 11    |
//! | defocus_blur   | disk radius (px)                  | 1     | 2     | 3     | 4     | 5     |
//! | brightness     | additive offset                   | 0.1   | 0.2   | 0.3   | 0.4   | 0.5   |
//! | contrast       | contrast factor about the mean    | 0.4   | 0.3   | 0.2   | 0.1   | 0.05  |
//! | jpeg_blocking  | JPEG quality for 8×8 DCT quant.   | 25    | 18    | 15    | 10    | 7     |
//! | pixelate       | downscale factor                  | 0.6   | 0.5   | 0.4   | 0.3   | 0.25  |
//!
//! Every kind is a pure function of `(image, severity, seed)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    MotionBlur,
    DefocusBlur,
    Brightness,
    Contrast,
    JpegBlocking,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::JpegBlocking,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::JpegBlocking => "jpeg_blocking",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// The table value for `severity` in `1..=5`.
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.10, 0.12],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 5.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
            CorruptionKind::JpegBlocking => [25.0, 18.0, 15.0, 10.0, 7.0],
            CorruptionKind::Pixelate => [0.6, 0.5, 0.4, 0.3, 0.25],
        };
        table[(severity.clamp(1, 5) - 1) as usize]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("corrupt", format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid("corrupt", format!("severity {severity} not in 1..=5")));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }
}

pub fn corrupt(img: &Image, spec: &CorruptionSpec) -> Result<Image> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::invalid("corrupt", format!("severity {} not in 1..=5", spec.severity)));
    }
    let p = spec.kind.parameter(spec.severity);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let data: Vec<f32> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p).expect("positive std");
            img.data().iter().map(|&v| (v as f64 + normal.sample(&mut rng)) as f32).collect()
        }
        CorruptionKind::ShotNoise => img
            .data()
            .iter()
            .map(|&v| {
                let rate = v as f64 * p;
                let k = if rate > 0.0 { Poisson::new(rate).expect("positive rate").sample(&mut rng) } else { 0.0 };
                (k / p) as f32
            })
            .collect(),
        CorruptionKind::MotionBlur => {
            let angle = rng.random_range(0.0..PI);
            convolve(img, &line_kernel(p as usize, angle))
        }
        CorruptionKind::DefocusBlur => convolve(img, &disk_kernel(p as usize)),
        CorruptionKind::Brightness => img.data().iter().map(|&v| (v as f64 + p) as f32).collect(),
        CorruptionKind::Contrast => {
            let mut out = Vec::with_capacity(img.data().len());
            for ch in 0..c {
                let plane = img.plane(ch);
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
                out.extend(plane.iter().map(|&v| ((v as f64 - mean) * p + mean) as f32));
            }
            out
        }
        CorruptionKind::JpegBlocking => {
            let mut out = Vec::with_capacity(img.data().len());
            for ch in 0..c {
                out.extend(dct_quantize(img.plane(ch), h, w, p));
            }
            out
        }
        CorruptionKind::Pixelate => {
            let mut out = Vec::with_capacity(img.data().len());
            for ch in 0..c {
                out.extend(pixelate(img.plane(ch), h, w, p));
            }
            out
        }
    };
    Image::new(c, h, w, data)
}

/// Weighted taps `(dy, dx, weight)`, weights summing to one.
type Kernel = Vec<(isize, isize, f64)>;

fn line_kernel(len: usize, angle: f64) -> Kernel {
    let (s, c) = angle.sin_cos();
    let half = (len as f64 - 1.0) / 2.0;
    let mut taps: Kernel = Vec::new();
    for i in 0..len {
        let t = i as f64 - half;
        let (dy, dx) = ((t * s).round() as isize, (t * c).round() as isize);
        if let Some(tap) = taps.iter_mut().find(|tap| tap.0 == dy && tap.1 == dx) {
            tap.2 += 1.0;
        } else {
            taps.push((dy, dx, 1.0));
        }
    }
    taps.iter_mut().for_each(|t| t.2 /= len as f64);
    taps
}

fn disk_kernel(radius: usize) -> Kernel {
    let r = radius as isize;
    let mut taps: Kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as f64 <= (radius as f64 + 0.5).powi(2) {
                taps.push((dy, dx, 1.0));
            }
        }
    }
    let n = taps.len() as f64;
    taps.iter_mut().for_each(|t| t.2 /= n);
    taps
}

/// Edge-clamped convolution; a constant image maps to itself.
fn convolve(img: &Image, k: &Kernel) -> Vec<f32> {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut out = Vec::with_capacity(img.data().len());
    for ch in 0..img.channels() {
        let plane = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, wt) in k {
                    let yy = (y + dy).clamp(0, h - 1);
                    let xx = (x + dx).clamp(0, w - 1);
                    acc += wt * plane[(yy * w + xx) as usize] as f64;
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

fn quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(JPEG_LUMA.iter()) {
        *o = ((b * scale + 50.0) / 100.0).floor().max(1.0);
    }
    t
}

/// 8×8 block DCT, coefficient quantization with the scaled JPEG table, and
/// inverse DCT. Partial edge blocks replicate the border.
fn dct_quantize(plane: &[f32], h: usize, w: usize, quality: f64) -> Vec<f32> {
    let table = quant_table(quality);
    let basis: Vec<f64> = (0..64)
        .map(|i| {
            let (u, x) = (i / 8, i % 8);
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
        })
        .collect();
    let mut out = vec![0.0f32; h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0f64; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                    block[y * 8 + x] = plane[yy * w + xx] as f64 * 255.0 - 128.0;
                }
            }
            let mut coef = [0.0f64; 64];
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += basis[u * 8 + y] * basis[v * 8 + x] * block[y * 8 + x];
                        }
                    }
                    let q = table[u * 8 + v];
                    coef[u * 8 + v] = (acc / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            acc += basis[u * 8 + y] * basis[v * 8 + x] * coef[u * 8 + v];
                        }
                    }
                    out[(by + y) * w + bx + x] = ((acc + 128.0) / 255.0) as f32;
                }
            }
        }
    }
    out
}

/// Box-average down to `factor` of the size, then nearest-neighbour back up.
fn pixelate(plane: &[f32], h: usize, w: usize, factor: f64) -> Vec<f32> {
    let sh = ((h as f64 * factor).round() as usize).max(1);
    let sw = ((w as f64 * factor).round() as usize).max(1);
    let mut small = vec![0.0f64; sh * sw];
    for sy in 0..sh {
        let (y0, y1) = (sy * h / sh, ((sy + 1) * h / sh).max(sy * h / sh + 1));
        for sx in 0..sw {
            let (x0, x1) = (sx * w / sw, ((sx + 1) * w / sw).max(sx * w / sw + 1));
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += plane[y * w + x] as f64;
                }
            }
            small[sy * sw + sx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = (y * sh / h).min(sh - 1);
        for x in 0..w {
            let sx = (x * sw / w).min(sw - 1);
            out.push(small[sy * sw + sx] as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_gray() -> Image {
        Image::filled(3, 64, 64, 0.5).unwrap()
    }

    fn textured() -> Image {
        Image::from_fn(3, 32, 32, |c, y, x| 0.5 + 0.3 * ((x as f32 * 0.4 + c as f32).sin() * (y as f32 * 0.3).cos()))
            .unwrap()
    }

    #[test]
    fn gaussian_noise_std_matches_table() {
        for severity in 1..=5 {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, severity, 42).unwrap();
            let out = corrupt(&mid_gray(), &spec).unwrap();
            let n = out.data().len() as f64;
            let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = CorruptionKind::GaussianNoise.parameter(severity);
            assert!((var.sqrt() - target).abs() < 0.1 * target, "severity {severity}: {} vs {target}", var.sqrt());
        }
    }

    #[test]
    fn brightness_offset_is_exact_before_clamping() {
        let img = Image::filled(3, 16, 16, 0.25).unwrap();
        for severity in 1..=5 {
            let out = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Brightness, severity, 0).unwrap()).unwrap();
            let shift = out.mean() - img.mean();
            assert!((shift - CorruptionKind::Brightness.parameter(severity)).abs() < 1e-6);
        }
    }

    #[test]
    fn blurs_preserve_constant_images() {
        let img = Image::filled(3, 20, 20, 0.3).unwrap();
        for kind in [CorruptionKind::MotionBlur, CorruptionKind::DefocusBlur, CorruptionKind::Pixelate] {
            for severity in 1..=5 {
                let out = corrupt(&img, &CorruptionSpec::new(kind, severity, 9).unwrap()).unwrap();
                assert_eq!(out, img, "{kind} severity {severity}");
            }
        }
    }

    #[test]
    fn every_kind_is_deterministic_and_in_range() {
        let img = textured();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 3, 77).unwrap();
            let a = corrupt(&img, &spec).unwrap();
            let b = corrupt(&img, &spec).unwrap();
            assert_eq!(a, b, "{kind}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(a, img, "{kind} left the image unchanged");
        }
    }

    #[test]
    fn names_parse_and_unknown_rejected() {
        for kind in CorruptionKind::ALL {
            assert_eq!(kind.name().parse::<CorruptionKind>().unwrap(), kind);
        }
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0, 1).is_err());
        assert_eq!(CorruptionKind::ALL.len(), 8);
    }

    #[test]
    fn jpeg_quantization_keeps_flat_blocks() {
        let img = Image::filled(1, 16, 16, 128.0 / 255.0).unwrap();
        let out = corrupt(&img, &CorruptionSpec::new(CorruptionKind::JpegBlocking, 5, 0).unwrap()).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-5);
    }
}
