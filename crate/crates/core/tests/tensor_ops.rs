mod common;

use common::*;
use nspace::tensor::{PadMode, Shape, Tape, Tensor};
use nspace::AffineTransform;
use proptest::prelude::*;

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, err) in gradient_suite(7) {
        if !(err < 1e-5) {
            failures.push(format!("{name}: {err:e}"));
        }
    }
    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}

#[test]
fn conv_matches_direct_sum_on_fixed_case() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let w = random_tensor(&mut r, Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
    let oracle = direct_conv(&x, &w, None, 1, 1);
    assert_eq!(t.value(y).shape(), oracle.shape());
    assert!(t.value(y).max_abs_diff(&oracle) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_sum(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..10, w in 3usize..10, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, pad in 0usize..3, seed in any::<u64>(), bias in any::<bool>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, Shape::new(n, cin, h, w), -1.0, 1.0);
        let wt = random_tensor(&mut r, Shape::new(cout, cin, k, k), -1.0, 1.0);
        let b = random_tensor(&mut r, Shape::new(1, cout, 1, 1), -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bias.then_some(bv), stride, pad).unwrap();
        let oracle = direct_conv(&x, &wt, bias.then_some(b.data()), stride, pad);
        prop_assert_eq!(t.value(y).shape(), oracle.shape());
        prop_assert!(t.value(y).max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_self(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, Shape::new(1, 2, 13, 14), 0.0, 1.0);
        let b = random_tensor(&mut r, Shape::new(1, 2, 13, 14), 0.0, 1.0);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let ab = t.ssim(av, bv).unwrap();
        let ba = t.ssim(bv, av).unwrap();
        let aa = t.ssim(av, av).unwrap();
        prop_assert!((t.value(ab).item() - t.value(ba).item()).abs() < 1e-7);
        prop_assert!((t.value(aa).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warp_composition_agrees_on_joint_mask(seed in any::<u64>()) {
        let mut r = rng(seed);
        use rand::Rng;
        let a = AffineTransform::from_params(r.random_range(-20.0..20.0), r.random_range(0.9..1.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)).unwrap();
        let b = AffineTransform::from_params(r.random_range(-20.0..20.0), r.random_range(0.9..1.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)).unwrap();
        // smooth field so the double-interpolation error stays small
        let img = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, x| {
            let (u, v) = (x as f64 / 64.0, y as f64 / 64.0);
            0.5 + 0.3 * (u + 0.5).sin() * (0.8 * v).cos()
        });
        let mut t = Tape::new();
        let x = t.constant(img);
        let (wb, mb) = t.affine_warp(x, &[b], PadMode::Zeros).unwrap();
        let (wab, mab) = t.affine_warp(wb, &[a], PadMode::Zeros).unwrap();
        let (direct, md) = t.affine_warp(x, &[b.then(&a)], PadMode::Zeros).unwrap();
        // mask of B pulled back through A, combined with the other two
        let mut tm = Tape::new();
        let mbv = tm.constant(mb);
        let (mb_a, _) = tm.affine_warp(mbv, &[a], PadMode::Zeros).unwrap();
        let pulled = tm.value(mb_a).clone();
        let (lhs, rhs) = (t.value(wab), t.value(direct));
        let mut worst: f64 = 0.0;
        for i in 0..lhs.numel() {
            if mab.data()[i] == 1.0 && md.data()[i] == 1.0 && pulled.data()[i] > 1.0 - 1e-12 {
                worst = worst.max((lhs.data()[i] - rhs.data()[i]).abs());
            }
        }
        prop_assert!(worst < 1e-4, "composition gap {}", worst);
    }
}

#[test]
fn warp_identity_is_exact_with_full_mask() {
    let mut r = rng(2);
    let img = random_tensor(&mut r, Shape::new(2, 3, 9, 12), 0.0, 1.0);
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    for pad in [PadMode::Zeros, PadMode::Border] {
        let (y, m) = t.affine_warp(x, &[AffineTransform::IDENTITY], pad).unwrap();
        assert_eq!(t.value(y), &img);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn warp_integer_translation_matches_index_shift() {
    let mut r = rng(3);
    let img = random_tensor(&mut r, Shape::new(1, 2, 10, 10), 0.0, 1.0);
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    let a = AffineTransform::translation_pixels(2.0, 0.0, 10, 10);
    let (y, m) = t.affine_warp(x, &[a], PadMode::Zeros).unwrap();
    let y = t.value(y);
    for c in 0..2 {
        for row in 0..10 {
            for col in 0..8 {
                assert!((y.at(0, c, row, col) - img.at(0, c, row, col + 2)).abs() < 1e-6);
                assert_eq!(m.at(0, 0, row, col), 1.0);
            }
            assert_eq!(m.at(0, 0, row, 9), 0.0);
            assert_eq!(y.at(0, c, row, 9), 0.0);
        }
    }
}

#[test]
fn warp_half_turn_twice_restores_interior() {
    let mut r = rng(4);
    let img = random_tensor(&mut r, Shape::new(1, 1, 16, 16), 0.0, 1.0);
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    let rot = AffineTransform::rotation(180.0);
    let (once, _) = t.affine_warp(x, &[rot], PadMode::Zeros).unwrap();
    let (twice, m) = t.affine_warp(once, &[rot], PadMode::Zeros).unwrap();
    let y = t.value(twice);
    for row in 1..15 {
        for col in 1..15 {
            assert!((y.at(0, 0, row, col) - img.at(0, 0, row, col)).abs() < 1e-5);
            assert_eq!(m.at(0, 0, row, col), 1.0);
        }
    }
}

#[test]
fn warp_rejects_singular_transform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
    let bad: AffineTransform = serde_json::from_str(r#"{"m":[[1.0,1.0,0.0],[1.0,1.0,0.0]]}"#).unwrap();
    assert!(t.affine_warp(x, &[bad], PadMode::Zeros).is_err());
}

#[test]
fn ssim_matches_windowed_oracle() {
    let mut r = rng(5);
    let a = random_tensor(&mut r, Shape::new(1, 1, 16, 16), 0.0, 1.0);
    let b = random_tensor(&mut r, Shape::new(1, 1, 16, 16), 0.0, 1.0);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let s = t.ssim(av, bv).unwrap();
    assert!((t.value(s).item() - windowed_ssim(&a, &b)).abs() < 1e-6);
}

#[test]
fn resize_identity_and_constant() {
    let mut r = rng(6);
    let img = random_tensor(&mut r, Shape::new(1, 2, 5, 7), 0.0, 1.0);
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    let same = t.resize(x, 5, 7).unwrap();
    assert_eq!(t.value(same), &img);
    let k = t.constant(Tensor::full(Shape::new(1, 1, 3, 3), 0.25));
    let up = t.resize(k, 12, 9).unwrap();
    assert!(t.value(up).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn resize_doubling_matches_hand_weights() {
    // align-corners-false ×2: interior outputs are 3:1 blends of neighbours
    let img = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, 4.0, 8.0]).unwrap();
    let mut t = Tape::<f64>::new();
    let x = t.constant(img);
    let y = t.resize(x, 1, 6).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
}

#[test]
fn pixel_shuffle_layout() {
    let img = Tensor::from_fn(Shape::new(1, 4, 1, 1), |_, c, _, _| c as f64);
    let mut t = Tape::new();
    let x = t.constant(img);
    let y = t.pixel_shuffle(x, 2).unwrap();
    assert_eq!(t.value(y).shape(), Shape::new(1, 1, 2, 2));
    assert_eq!(t.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    let bad = t.constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
    assert!(t.pixel_shuffle(bad, 2).is_err());
}

#[test]
fn avg_pool_and_concat_values() {
    let img = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let mut t = Tape::<f64>::new();
    let x = t.constant(img);
    let p = t.avg_pool2(x).unwrap();
    assert_eq!(t.value(p).item(), 3.0);
    let c = t.concat(&[x, x]).unwrap();
    assert_eq!(t.value(c).shape(), Shape::new(1, 2, 2, 2));
    let odd = t.constant(Tensor::zeros(Shape::new(1, 1, 3, 2)));
    assert!(t.avg_pool2(odd).is_err());
    assert!(t.concat(&[x, odd]).is_err());
}

#[test]
fn correlation_peaks_at_true_shift() {
    let mut r = rng(8);
    let right = random_tensor(&mut r, Shape::new(1, 64, 4, 16), -1.0, 1.0);
    // left[x] = right[x - 2]
    let left = Tensor::from_fn(right.shape(), |n, c, y, x| if x >= 2 { right.at(n, c, y, x - 2) } else { 0.0 });
    let mut t = Tape::new();
    let (l, rv) = (t.constant(left), t.constant(right));
    let corr = t.correlation(l, rv, 4).unwrap();
    let v = t.value(corr);
    for y in 0..4 {
        for x in 6..16 {
            let best = (0..5).max_by(|&a, &b| v.at(0, a, y, x).total_cmp(&v.at(0, b, y, x))).unwrap();
            assert_eq!(best, 2);
        }
    }
}

#[test]
fn operations_are_bit_deterministic() {
    let run = || {
        let mut r = rng(99);
        let x = random_tensor(&mut r, Shape::new(2, 3, 12, 12), 0.0, 1.0);
        let w = random_tensor(&mut r, Shape::new(4, 3, 3, 3), -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, wv) = (t.variable(x), t.variable(w));
        let y = t.conv2d(xv, wv, None, 2, 1).unwrap();
        let (yw, _) = t.affine_warp(y, &[AffineTransform::rotation(13.0)], PadMode::Zeros).unwrap();
        let s = t.ssim(xv, xv).unwrap();
        let l = t.mean(yw);
        let l = t.add(l, s).unwrap();
        let out = t.value(l).item();
        let g = t.backward(l).unwrap();
        (out.to_bits(), g.get(wv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
