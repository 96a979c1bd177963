use nspace::eval::psnr;
use nspace::imaging::{corrupt, gen_texture_scene, mosaic, BayerImage, CorruptionKind, CorruptionSpec, Image};
use proptest::prelude::*;

/// Bilinear demosaic: each missing colour is the mean of the nearest
/// same-colour sites in the 3×3 neighbourhood (edge-clamped).
fn bilinear_demosaic(b: &BayerImage) -> Image {
    let (h, w) = (b.height(), b.width());
    Image::from_fn(3, h, w, |c, y, x| {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                if BayerImage::site(yy, xx).channel() != c {
                    continue;
                }
                // prefer the exact site when present
                if dy == 0 && dx == 0 {
                    return b.get(yy, xx);
                }
                let manhattan = dy.abs() + dx.abs();
                // green uses its 4-neighbours only; red/blue use all nearest sites
                if c == 1 && manhattan != 1 {
                    continue;
                }
                sum += b.get(yy, xx) as f64;
                n += 1;
            }
        }
        (sum / n.max(1) as f64) as f32
    })
    .unwrap()
}

#[test]
fn demosaic_oracle_recovers_smooth_scenes() {
    for seed in 0..8 {
        let rgb = gen_texture_scene(seed, 64, 64).unwrap();
        let back = bilinear_demosaic(&mosaic(&rgb).unwrap());
        let p = psnr(back.data(), rgb.data());
        assert!(p > 25.0, "seed {seed}: {p:.2} dB");
    }
}

#[test]
fn mosaic_keeps_site_values() {
    let rgb = gen_texture_scene(11, 32, 32).unwrap();
    let b = mosaic(&rgb).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(b.get(y, x), rgb.get(BayerImage::site(y, x).channel(), y, x));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corruption_is_deterministic_and_bounded(scene in 0u64..1000, kind in 0usize..8, severity in 1u8..=5, seed in 0u64..1000) {
        let img = gen_texture_scene(scene, 32, 32).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::ALL[kind], severity, seed).unwrap();
        let a = corrupt(&img, &spec).unwrap();
        let b = corrupt(&img, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!((a.channels(), a.height(), a.width()), (3, 32, 32));
    }
}

#[test]
fn stronger_noise_hurts_more() {
    let img = gen_texture_scene(2, 48, 48).unwrap();
    let p: Vec<f64> = (1..=5)
        .map(|s| psnr(corrupt(&img, &CorruptionSpec::new(CorruptionKind::GaussianNoise, s, 9).unwrap()).unwrap().data(), img.data()))
        .collect();
    assert!(p.windows(2).all(|w| w[0] > w[1]), "{p:?}");
}
