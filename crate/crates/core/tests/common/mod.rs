#![allow(dead_code)]

//! Shared test oracles: finite-difference gradient checks and brute-force
//! reference kernels written independently of the library kernels.

use nspace::tensor::{PadMode, Shape, Tape, Tensor, Var};
use nspace::{AffineTransform, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Values at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| loop {
        let v: f64 = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Contracts a tensor-valued output with fixed random weights so any op can
/// be checked through a scalar.
pub fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = random_tensor(&mut r, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Relative error `‖g_auto − g_fd‖₂ / max(‖g_auto‖₂, ‖g_fd‖₂)` over every
/// input, using central differences with step [`FD_STEP`].
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs).expect("forward");
        t.value(l).item()
    };

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (k, x) in inputs.iter().enumerate() {
        let auto = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x.data()[i] - FD_STEP;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = auto.data()[i];
            diff += (a - fd).powi(2);
            na += a * a;
            nn += fd * fd;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Direct quadruple-loop cross-correlation.
pub fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let ho = (xs.h + 2 * pad - k) / stride + 1;
    let wo = (xs.w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, ho, wo), |n, co, oy, ox| {
        let mut acc = b.map_or(0.0, |b| b[co]);
        for ci in 0..xs.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

/// Mean SSIM computed window by window with an explicit 2-D Gaussian.
pub fn windowed_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let (size, sigma) = (11usize, 1.5f64);
    let c = 5.0;
    let mut g = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            g[y * size + x] = (-((y as f64 - c).powi(2) + (x as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for ch in 0..s.c {
            for y0 in 0..=s.h - size {
                for x0 in 0..=s.w - size {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in 0..size {
                        for x in 0..size {
                            let wgt = g[y * size + x];
                            let va = a.at(n, ch, y0 + y, x0 + x);
                            let vb = b.at(n, ch, y0 + y, x0 + x);
                            ma += wgt * va;
                            mb += wgt * vb;
                        }
                    }
                    for y in 0..size {
                        for x in 0..size {
                            let wgt = g[y * size + x];
                            let da = a.at(n, ch, y0 + y, x0 + x) - ma;
                            let db = b.at(n, ch, y0 + y, x0 + x) - mb;
                            saa += wgt * da * da;
                            sbb += wgt * db * db;
                            sab += wgt * da * db;
                        }
                    }
                    acc += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
                    count += 1;
                }
            }
        }
    }
    acc / count as f64
}

/// Named gradient checks over every differentiable tape operation.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let sh = |n, c, h, w| Shape::new(n, c, h, w);

    // conv2d over stride/padding/bias combinations
    for (i, &(stride, pad, k, bias)) in [(1, 1, 3, true), (2, 1, 3, true), (1, 0, 1, false), (2, 0, 3, false), (1, 2, 5, true)]
        .iter()
        .enumerate()
    {
        let cin = r.random_range(1..=3);
        let cout = r.random_range(1..=3);
        let hw = r.random_range(5..=8);
        let x = random_tensor(&mut r, sh(2, cin, hw, hw), -1.0, 1.0);
        let w = random_tensor(&mut r, sh(cout, cin, k, k), -1.0, 1.0);
        let b = random_tensor(&mut r, sh(1, cout, 1, 1), -1.0, 1.0);
        let inputs = if bias { vec![x, w, b] } else { vec![x, w] };
        let e = gradcheck(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
            probe(t, y, i as u64)
        });
        out.push((["conv2d s1 p1", "conv2d s2 p1", "conv2d 1x1", "conv2d s2 p0", "conv2d 5x5 p2"][i], e));
    }

    let x = away_from(&mut r, sh(1, 2, 4, 5), -1.0, 1.0, &[0.0], 1e-3);
    out.push(("relu", gradcheck(&[x.clone()], |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, 1)
    })));
    out.push(("abs", gradcheck(&[x.clone()], |t, v| {
        let y = t.abs(v[0]);
        probe(t, y, 2)
    })));
    out.push(("square", gradcheck(&[x.clone()], |t, v| {
        let y = t.square(v[0]);
        probe(t, y, 3)
    })));
    let xc = away_from(&mut r, sh(1, 2, 4, 5), -0.5, 1.5, &[0.0, 1.0], 1e-3);
    out.push(("clamp", gradcheck(&[xc], |t, v| {
        let y = t.clamp(v[0], 0.0, 1.0);
        probe(t, y, 4)
    })));
    out.push(("scale+offset", gradcheck(&[x.clone()], |t, v| {
        let y = t.scale(v[0], -2.5);
        let y = t.offset(y, 0.3);
        probe(t, y, 5)
    })));

    let a = random_tensor(&mut r, sh(2, 2, 3, 3), -1.0, 1.0);
    let b = random_tensor(&mut r, sh(2, 2, 3, 3), 0.5, 1.5);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        out.push((name, gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = match which {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                2 => t.mul(v[0], v[1])?,
                _ => t.div(v[0], v[1])?,
            };
            probe(t, y, 6 + which)
        })));
    }
    out.push(("sum", gradcheck(&[a.clone()], |t, v| {
        let s = t.sum(v[0]);
        let s = t.square(s);
        Ok(t.sum(s))
    })));
    out.push(("mean", gradcheck(&[a.clone()], |t, v| {
        let m = t.mean(v[0]);
        Ok(t.square(m))
    })));
    let mask = Tensor::from_fn(sh(2, 1, 3, 3), |n, _, y, x| ((n + y + x) % 2) as f64);
    out.push(("masked_mean", gradcheck(&[a.clone()], |t, v| {
        let sq = t.square(v[0]);
        t.masked_mean(sq, &mask)
    })));
    let d1 = away_from(&mut r, sh(2, 2, 3, 3), -1.0, 1.0, &[0.0], 1e-2);
    let zero = Tensor::zeros(sh(2, 2, 3, 3));
    out.push(("l1_loss", gradcheck(&[d1.clone(), zero.clone()], |t, v| t.l1_loss(v[0], v[1]))));
    out.push(("l2_loss", gradcheck(&[a.clone(), b.clone()], |t, v| t.l2_loss(v[0], v[1]))));
    out.push(("masked_l2", gradcheck(&[a.clone(), b.clone()], |t, v| t.masked_l2(v[0], v[1], &mask))));
    let sl = away_from(&mut r, sh(2, 2, 3, 3), -3.0, 3.0, &[-1.0, 0.0, 1.0], 1e-2);
    out.push(("smooth_l1", gradcheck(&[sl, zero.clone()], |t, v| t.smooth_l1(v[0], v[1], &mask))));

    let logits = random_tensor(&mut r, sh(2, 4, 3, 3), -2.0, 2.0);
    let labels: Vec<u32> = (0..18).map(|i| if i % 7 == 3 { 255 } else { (i * 5 % 4) as u32 }).collect();
    out.push(("cross_entropy", gradcheck(&[logits.clone()], |t, v| t.cross_entropy(v[0], &labels, 255))));
    out.push(("softmax_channels", gradcheck(&[logits.clone()], |t, v| {
        let s = t.softmax_channels(v[0]);
        probe(t, s, 11)
    })));
    out.push(("normalize_channels", gradcheck(&[logits.clone()], |t, v| {
        let s = t.normalize_channels(v[0], 1e-3);
        probe(t, s, 16)
    })));
    out.push(("channel_weighted_sum", gradcheck(&[logits], |t, v| {
        let s = t.channel_weighted_sum(v[0], &[0.0, 1.0, 2.0, 3.0])?;
        probe(t, s, 12)
    })));

    let img = random_tensor(&mut r, sh(2, 2, 7, 7), 0.0, 1.0);
    let rot = AffineTransform::from_params(23.0, 1.1, 0.07, -0.04).unwrap();
    let rot2 = AffineTransform::from_params(-12.0, 0.9, -0.05, 0.02).unwrap();
    for (name, pad) in [("affine_warp zeros", PadMode::Zeros), ("affine_warp border", PadMode::Border)] {
        out.push((name, gradcheck(&[img.clone()], |t, v| {
            let (y, _) = t.affine_warp(v[0], &[rot, rot2], pad)?;
            probe(t, y, 13)
        })));
    }
    out.push(("resize up", gradcheck(&[img.clone()], |t, v| {
        let y = t.resize(v[0], 11, 14)?;
        probe(t, y, 14)
    })));
    out.push(("resize down", gradcheck(&[img.clone()], |t, v| {
        let y = t.resize(v[0], 3, 4)?;
        probe(t, y, 15)
    })));
    let ps = random_tensor(&mut r, sh(2, 8, 3, 2), -1.0, 1.0);
    out.push(("pixel_shuffle", gradcheck(&[ps], |t, v| {
        let y = t.pixel_shuffle(v[0], 2)?;
        probe(t, y, 16)
    })));
    let c2 = random_tensor(&mut r, sh(2, 3, 7, 7), -1.0, 1.0);
    out.push(("concat", gradcheck(&[img.clone(), c2], |t, v| {
        let y = t.concat(&[v[1], v[0], v[1]])?;
        probe(t, y, 17)
    })));
    let even = random_tensor(&mut r, sh(2, 2, 6, 8), -1.0, 1.0);
    out.push(("avg_pool2", gradcheck(&[even.clone()], |t, v| {
        let y = t.avg_pool2(v[0])?;
        probe(t, y, 18)
    })));
    out.push(("filter_valid", gradcheck(&[even.clone()], |t, v| {
        let y = t.filter_valid(v[0], &[0.2, 0.5, 0.3])?;
        probe(t, y, 19)
    })));
    let l = random_tensor(&mut r, sh(2, 3, 4, 8), -1.0, 1.0);
    let rr = random_tensor(&mut r, sh(2, 3, 4, 8), -1.0, 1.0);
    out.push(("correlation", gradcheck(&[l, rr], |t, v| {
        let y = t.correlation(v[0], v[1], 3)?;
        probe(t, y, 20)
    })));
    let sa = random_tensor(&mut r, sh(1, 2, 12, 12), 0.0, 1.0);
    let sb = random_tensor(&mut r, sh(1, 2, 12, 12), 0.0, 1.0);
    out.push(("ssim", gradcheck(&[sa.clone(), sb.clone()], |t, v| t.ssim(v[0], v[1]))));
    let smask = Tensor::from_fn(sh(1, 1, 12, 12), |_, _, y, _| if y < 11 { 1.0 } else { 0.0 });
    let smask = {
        let mut m = smask;
        m.set(0, 0, 11, 0, 1.0);
        m
    };
    out.push(("masked_ssim", gradcheck(&[sa, sb], |t, v| t.masked_ssim(v[0], v[1], &smask))));

    // composite: conv -> relu -> L2
    let x = random_tensor(&mut r, sh(1, 2, 6, 6), -1.0, 1.0);
    let w = random_tensor(&mut r, sh(3, 2, 3, 3), -0.5, 0.5);
    let bias = random_tensor(&mut r, sh(1, 3, 1, 1), -0.1, 0.1);
    let target = random_tensor(&mut r, sh(1, 3, 6, 6), 0.0, 1.0);
    out.push(("conv->relu->l2", gradcheck(&[x, w, bias], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = t.relu(y);
        let tg = t.constant(target.clone());
        t.l2_loss(y, tg)
    })));
    out
}
