//! Procedural scenes standing in for natural-image corpora.
//!
//! All generators are pure functions of their arguments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_divisible, Disparity, Image, LabelMap};
use crate::error::{Error, Result};

pub const MAX_CLASSES: usize = 8;
pub const MAX_DISPARITY: usize = 16;

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 16 || w < 16 {
        return Err(Error::invalid("generate", format!("size {h}x{w} below the 16x16 minimum")));
    }
    check_divisible(h, w, 4)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
struct ValueNoise {
    cell: f64,
    cols: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, cell: f64, h: usize, w: usize) -> Self {
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let rows = (h as f64 / cell).ceil() as usize + 2;
        ValueNoise { cell, cols, grid: (0..rows * cols).map(|_| rng.random::<f64>()).collect() }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x.max(0.0) / self.cell, y.max(0.0) / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(gx - ix as f64), s(gy - iy as f64));
        let g = |r: usize, c: usize| self.grid[r.min(self.grid.len() / self.cols - 1) * self.cols + c.min(self.cols - 1)];
        let top = g(iy, ix) * (1.0 - fx) + g(iy, ix + 1) * fx;
        let bot = g(iy + 1, ix) * (1.0 - fx) + g(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

#[derive(Clone, Copy, Debug)]
enum Shape2 {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape2 {
    fn random(rng: &mut impl Rng, h: usize, w: usize, min_r: f64, max_r: f64) -> Self {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(min_r..max_r);
        let ry = rng.random_range(min_r..max_r);
        if rng.random_bool(0.5) {
            Shape2::Ellipse { cx, cy, rx, ry }
        } else {
            Shape2::Rect { x0: cx - rx, y0: cy - ry, x1: cx + rx, y1: cy + ry }
        }
    }

    /// Signed coverage in `[0, 1]` with a one-pixel soft edge.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let d = match *self {
            Shape2::Ellipse { cx, cy, rx, ry } => {
                let q = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
                (q - 1.0) * rx.min(ry)
            }
            Shape2::Rect { x0, y0, x1, y1 } => (x0 - x).max(x - x1).max(y0 - y).max(y - y1),
        };
        (0.5 - d).clamp(0.0, 1.0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.coverage(x, y) >= 0.5
    }
}

/// Smooth colour field with gradients, lattice noise, sinusoids and soft shapes.
pub fn gen_texture_scene(seed: u64, h: usize, w: usize) -> Result<Image> {
    check_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = random_color(&mut rng, 0.15, 0.85);
    let c1 = random_color(&mut rng, 0.15, 0.85);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let coarse = ValueNoise::new(&mut rng, 16.0, h, w);
    let fine = ValueNoise::new(&mut rng, 8.0, h, w);
    let tint_coarse = random_color(&mut rng, -0.2, 0.2);
    let tint_fine = random_color(&mut rng, -0.12, 0.12);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=2))
        .map(|_| {
            let f = rng.random_range(0.03..0.12) * std::f64::consts::TAU;
            let th = rng.random_range(0.0..std::f64::consts::PI);
            (f * th.cos(), f * th.sin(), rng.random_range(0.0..std::f64::consts::TAU), random_color(&mut rng, -0.1, 0.1))
        })
        .collect();
    let shapes: Vec<(Shape2, [f64; 3], f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let s = Shape2::random(&mut rng, h, w, 4.0, (h.min(w) as f64 / 4.0).max(5.0));
            (s, random_color(&mut rng, 0.05, 0.95), rng.random_range(0.6..1.0))
        })
        .collect();
    let (hf, wf) = (h as f64, w as f64);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let t = (((xf / wf - 0.5) * ga + (yf / hf - 0.5) * gb) + 0.75) / 1.5;
            let nc = coarse.at(xf, yf) - 0.5;
            let nf = fine.at(xf, yf) - 0.5;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t + 2.0 * tint_coarse[c] * nc + 2.0 * tint_fine[c] * nf;
                for &(kx, ky, ph, amp) in &waves {
                    px[c] += amp[c] * (kx * xf + ky * yf + ph).sin();
                }
            }
            for (shape, color, alpha) in &shapes {
                let a = alpha * shape.coverage(xf, yf);
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c] as f32;
            }
        }
    }
    Image::new(3, h, w, data)
}

/// Base colours and stripe patterns that identify each class.
const CLASS_COLORS: [[f64; 3]; MAX_CLASSES] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
    [0.75, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

fn class_pattern(class: usize, x: f64, y: f64) -> f64 {
    let th = class as f64 * 0.7;
    let f = 0.25 + 0.08 * class as f64;
    (f * (x * th.cos() + y * th.sin())).sin()
}

/// Overlapping shapes with class-specific colour and stripe texture; the
/// label of a pixel is the class of the topmost shape covering it.
pub fn gen_seg_scene(seed: u64, classes: usize, h: usize, w: usize) -> Result<(Image, LabelMap)> {
    check_size(h, w)?;
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::invalid("gen_seg_scene", format!("class count {classes} not in 1..={MAX_CLASSES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_noise = ValueNoise::new(&mut rng, 8.0, h, w);
    let bg_jitter = random_color(&mut rng, -0.06, 0.06);
    let min_r = (h.min(w) as f64 / 10.0).max(3.0);
    let max_r = h.min(w) as f64 / 4.0;
    let mut shapes: Vec<(Shape2, usize, [f64; 3])> = Vec::new();
    if classes > 1 {
        for _ in 0..rng.random_range(3..=6) {
            let s = Shape2::random(&mut rng, h, w, min_r, max_r);
            let class = rng.random_range(1..classes);
            shapes.push((s, class, random_color(&mut rng, -0.06, 0.06)));
        }
    }
    let render = |shapes: &[(Shape2, usize, [f64; 3])]| {
        let mut data = vec![0.0f32; 3 * h * w];
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut class = 0;
                let mut jitter = bg_jitter;
                for (s, c, j) in shapes {
                    if s.contains(xf, yf) {
                        class = *c;
                        jitter = *j;
                    }
                }
                let tex = if class == 0 { 0.25 * (bg_noise.at(xf, yf) - 0.5) } else { 0.08 * class_pattern(class, xf, yf) };
                for c in 0..3 {
                    data[(c * h + y) * w + x] = (CLASS_COLORS[class][c] + jitter[c] + tex) as f32;
                }
                labels[y * w + x] = class as u8;
            }
        }
        (data, labels)
    };
    let (mut data, mut labels) = render(&shapes);
    if classes > 1 && labels.iter().all(|&l| l == labels[0]) {
        // guarantee at least two classes: a central shape of a class not yet shown
        let shown = labels[0] as usize;
        let class = if shown == 1 && classes > 2 { 2 } else if shown == 0 { 1 } else { 0 };
        let s = Shape2::Rect { x0: w as f64 * 0.3, y0: h as f64 * 0.3, x1: w as f64 * 0.7, y1: h as f64 * 0.7 };
        if class == 0 {
            shapes.retain(|_| false);
            shapes.push((s, 1, [0.0; 3]));
        } else {
            shapes.push((s, class, [0.0; 3]));
        }
        (data, labels) = render(&shapes);
    }
    let img = Image::new(3, h, w, data)?;
    Ok((img, LabelMap { height: h, width: w, labels }))
}

#[derive(Clone, Debug)]
pub struct StereoPair {
    pub left: Image,
    pub right: Image,
    /// Left-view disparity: `left[y][x]` matches `right[y][x - d]`.
    pub disparity: Disparity,
}

struct Layer {
    shape: Option<Shape2>,
    disparity: usize,
    noise: [ValueNoise; 3],
    base: [f64; 3],
    tint: [f64; 3],
}

impl Layer {
    fn texture(&self, x: f64, y: f64) -> [f32; 3] {
        let mut px = [0.0f32; 3];
        let coarse = self.noise[0].at(x, y) - 0.5;
        let mid = self.noise[1].at(x, y) - 0.5;
        let fine = self.noise[2].at(x, y) - 0.5;
        for c in 0..3 {
            let v = self.base[c] + 0.35 * coarse * self.tint[c] + 0.45 * mid + 0.35 * fine * (1.0 - self.tint[c]);
            px[c] = v.clamp(0.0, 1.0) as f32;
        }
        px
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        self.shape.is_none_or(|s| s.contains(x, y))
    }
}

/// Fronto-parallel textured layers with integer disparities; occluded and
/// out-of-view pixels are marked invalid. Every valid disparity is ≥ 1.
pub fn gen_stereo_pair(seed: u64, d_max: usize, h: usize, w: usize) -> Result<StereoPair> {
    check_size(h, w)?;
    if !(2..=MAX_DISPARITY).contains(&d_max) {
        return Err(Error::invalid("gen_stereo_pair", format!("d_max {d_max} not in 2..={MAX_DISPARITY}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext_w = w + d_max + 2;
    let make_layer = |rng: &mut ChaCha8Rng, shape: Option<Shape2>, disparity: usize| Layer {
        shape,
        disparity,
        noise: [ValueNoise::new(rng, 12.0, h, ext_w), ValueNoise::new(rng, 5.0, h, ext_w), ValueNoise::new(rng, 2.5, h, ext_w)],
        base: random_color(rng, 0.25, 0.75),
        tint: random_color(rng, 0.2, 1.0),
    };
    let bg_d = rng.random_range(1..=(d_max / 4).max(1));
    let mut layers = vec![make_layer(&mut rng, None, bg_d)];
    let count = rng.random_range(2..=3);
    let mut ds: Vec<usize> = (0..count).map(|_| rng.random_range(bg_d + 1..=d_max)).collect();
    ds.sort_unstable();
    for d in ds {
        let s = Shape2::random(&mut rng, h, w, h.min(w) as f64 / 8.0, h.min(w) as f64 / 3.0);
        layers.push(make_layer(&mut rng, Some(s), d));
    }
    let top_left = |x: f64, y: f64| (0..layers.len()).rev().find(|&i| layers[i].covers(x, y)).expect("background");
    let top_right = |xr: f64, y: f64| {
        (0..layers.len()).rev().find(|&i| layers[i].covers(xr + layers[i].disparity as f64, y)).expect("background")
    };
    let mut left = vec![0.0f32; 3 * h * w];
    let mut right = vec![0.0f32; 3 * h * w];
    let mut values = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let li = top_left(xf, yf);
            let lp = layers[li].texture(xf, yf);
            let ri = top_right(xf, yf);
            let rp = layers[ri].texture(xf + layers[ri].disparity as f64, yf);
            for c in 0..3 {
                left[(c * h + y) * w + x] = lp[c];
                right[(c * h + y) * w + x] = rp[c];
            }
            let d = layers[li].disparity;
            values[y * w + x] = d as f32;
            valid[y * w + x] = x >= d && top_right((x - d) as f64, yf) == li;
        }
    }
    Ok(StereoPair {
        left: Image::new(3, h, w, left)?,
        right: Image::new(3, h, w, right)?,
        disparity: Disparity { height: h, width: w, values, valid },
    })
}

/// `(noisy, clean)` with additive Gaussian noise of std `sigma`, clipped to `[0, 1]`.
pub fn gen_noise_pair(seed: u64, sigma: f64, h: usize, w: usize) -> Result<(Image, Image)> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("gen_noise_pair", format!("sigma {sigma} must be non-negative")));
    }
    let clean = gen_texture_scene(seed, h, w)?;
    if sigma == 0.0 {
        return Ok((clean.clone(), clean));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = clean.data().iter().map(|&v| (v as f64 + normal.sample(&mut rng)) as f32).collect();
    let noisy = Image::new(3, h, w, data)?;
    Ok((noisy, clean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_scene_in_range_and_deterministic() {
        let a = gen_texture_scene(5, 48, 48).unwrap();
        assert_eq!(a, gen_texture_scene(5, 48, 48).unwrap());
        assert_ne!(a, gen_texture_scene(6, 48, 48).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_texture_scene(5, 50, 48).is_err());
        assert!(gen_texture_scene(5, 12, 12).is_err());
    }

    #[test]
    fn seg_scenes_show_at_least_two_classes() {
        for k in 2..=MAX_CLASSES {
            for seed in 0..40 {
                let (_, labels) = gen_seg_scene(seed, k, 48, 48).unwrap();
                let present = labels.histogram(k).iter().filter(|&&c| c > 0).count();
                assert!(present >= 2, "k={k} seed={seed}");
                assert!(labels.labels.iter().all(|&l| (l as usize) < k));
            }
        }
        assert!(gen_seg_scene(0, 9, 48, 48).is_err());
    }

    #[test]
    fn stereo_warp_identity_holds_exactly() {
        for seed in 0..10 {
            let pair = gen_stereo_pair(seed, 16, 64, 64).unwrap();
            let d = &pair.disparity;
            assert!(d.valid_count() > 64 * 64 / 2);
            for y in 0..64 {
                for x in 0..64 {
                    if !d.valid[y * 64 + x] {
                        continue;
                    }
                    let disp = d.values[y * 64 + x] as usize;
                    assert!((1..=16).contains(&disp));
                    for c in 0..3 {
                        assert_eq!(pair.left.get(c, y, x), pair.right.get(c, y, x - disp));
                    }
                }
            }
        }
        assert!(gen_stereo_pair(0, 17, 64, 64).is_err());
    }

    #[test]
    fn noise_pair_without_noise_is_identical() {
        let (noisy, clean) = gen_noise_pair(3, 0.0, 32, 32).unwrap();
        assert_eq!(noisy, clean);
        let (noisy, clean) = gen_noise_pair(3, 0.1, 32, 32).unwrap();
        assert_ne!(noisy, clean);
    }
}
