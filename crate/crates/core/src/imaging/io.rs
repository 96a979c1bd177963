//! PNG / PPM reading and writing.
//!
//! Images are 8-bit gray or RGB (an alpha channel is dropped on load).
//! Disparity maps are 16-bit gray PNG storing `round(d·256)`, with 0
//! reserved for invalid pixels, so valid disparities must be at least
//! `1/256` px.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage};

use super::{Disparity, Image, LabelMap};
use crate::error::{Error, Result};

/// Stored units per pixel of disparity.
pub const DISPARITY_SCALE: f32 = 256.0;

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        other => Err(Error::Format(format!("{}: unsupported image extension {other:?}", path.display()))),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let format = format_for(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory_with_format(&bytes, format)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let to_f = |v: u8| v as f32 / 255.0;
    match decode(path)? {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Image::new(1, h as usize, w as usize, g.into_raw().into_iter().map(to_f).collect())
        }
        DynamicImage::ImageLumaA8(g) => {
            let (w, h) = g.dimensions();
            Image::new(1, h as usize, w as usize, g.pixels().map(|p| to_f(p.0[0])).collect())
        }
        DynamicImage::ImageRgb8(rgb) => planar_rgb(rgb.width(), rgb.height(), rgb.pixels().map(|p| p.0)),
        DynamicImage::ImageRgba8(rgba) => {
            planar_rgb(rgba.width(), rgba.height(), rgba.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]))
        }
        other => Err(Error::Format(format!(
            "{}: unsupported pixel format {:?}; expected 8-bit gray or RGB",
            path.display(),
            other.color()
        ))),
    }
}

fn planar_rgb(w: u32, h: u32, pixels: impl Iterator<Item = [u8; 3]>) -> Result<Image> {
    let n = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * n];
    for (i, p) in pixels.enumerate() {
        for c in 0..3 {
            data[c * n + i] = p[c] as f32 / 255.0;
        }
    }
    Image::new(3, h as usize, w as usize, data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, img.data().iter().map(|&v| to_u8(v)).collect()).expect("buffer size"),
        )
    } else {
        let n = img.height() * img.width();
        let mut buf = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                buf.push(to_u8(img.data()[c * n + i]));
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, buf).expect("buffer size"))
    };
    if format == ImageFormat::Pnm && img.channels() == 1 {
        return Err(Error::Format("PPM output requires an RGB image; use PNG for gray".into()));
    }
    dynamic.save_with_format(path, format)?;
    Ok(())
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let img = GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.labels.clone())
        .ok_or_else(|| Error::shape("labels", "buffer does not match dims"))?;
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok(LabelMap { height: h as usize, width: w as usize, labels: g.into_raw() })
        }
        other => Err(Error::Format(format!("{}: label maps must be 8-bit gray, got {:?}", path.display(), other.color()))),
    }
}

pub fn save_disparity(d: &Disparity, path: impl AsRef<Path>) -> Result<()> {
    let mut raw = Vec::with_capacity(d.values.len());
    for (&v, &ok) in d.values.iter().zip(&d.valid) {
        let code = if ok { (v * DISPARITY_SCALE).round().clamp(1.0, u16::MAX as f32) as u16 } else { 0 };
        raw.push(code);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(d.width as u32, d.height as u32, raw).ok_or_else(|| Error::shape("disparity", "buffer"))?;
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

pub fn load_disparity(path: impl AsRef<Path>) -> Result<Disparity> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            let raw = g.into_raw();
            Ok(Disparity {
                height: h as usize,
                width: w as usize,
                values: raw.iter().map(|&v| v as f32 / DISPARITY_SCALE).collect(),
                valid: raw.iter().map(|&v| v != 0).collect(),
            })
        }
        other => Err(Error::Format(format!("{}: disparity must be 16-bit gray PNG, got {:?}", path.display(), other.color()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f32 / 255.0).unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back, img.quantized());
        }
        let gray = Image::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32 / 15.0).unwrap();
        let p = dir.path().join("g.png");
        save_image(&gray, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), gray.quantized());
    }

    #[test]
    fn single_red_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.ppm");
        std::fs::write(&p, b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 1, 1));
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn corrupt_header_and_sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"\x89PNX garbage").unwrap();
        assert!(load_image(&p).is_err());

        let d = Disparity { height: 2, width: 2, values: vec![1.0, 2.5, 0.0, 16.0], valid: vec![true, true, false, true] };
        let p = dir.path().join("d.png");
        save_disparity(&d, &p).unwrap();
        assert!(load_image(&p).is_err());
        assert_eq!(load_disparity(&p).unwrap(), d);
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelMap { height: 2, width: 3, labels: vec![0, 1, 2, 3, 4, 255] };
        let p = dir.path().join("l.png");
        save_labels(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
    }
}
