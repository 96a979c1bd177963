//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N: PASS|FAIL` line to stderr (uncaptured) before asserting.
//!
//! The training criteria run at desk scale and take several minutes in total.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nspace::eval::{count_flops, count_params, psnr, run_protocol, seg_metrics, similarity_values, PixelDenoiser};
use nspace::heads::{argmax_labels, DenoiserHead};
use nspace::imaging::{
    corrupt, gen_noise_pair, gen_seg_scene, gen_stereo_pair, gen_texture_scene, mosaic, BayerImage, CorruptionKind,
    CorruptionSpec, Image, LabelMap, StereoPair,
};
use nspace::space::{
    latent_affine, read_checkpoint, read_latent, write_checkpoint, write_latent, DecoderModel, EncoderModel, Latent,
    Model, Network,
};
use nspace::tensor::{Adam, PadMode, Shape, Tape, Tensor};
use nspace::training::{self, Autoencoder, Stage, StageReport, TrainConfig};
use nspace::{AffineTransform, Error};
use rand::Rng;

const SEED: u64 = 1;
const SIZE: usize = 48;
const TRAIN: u64 = 256;
const VAL: std::ops::Range<u64> = 1000..1020;
const STEREO_SIZE: usize = 64;
const STEREO_TRAIN: u64 = 1024;
const STEREO_VAL: std::ops::Range<u64> = 100_000..100_020;
const SIGMA: f64 = 25.0 / 255.0;

fn verdict(n: usize, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn textures(seeds: impl Iterator<Item = u64>) -> Vec<Image> {
    seeds.map(|s| gen_texture_scene(s, SIZE, SIZE).unwrap()).collect()
}

/// Masked squared error between two `1×C×h×w` maps, mean over masked elements.
fn masked_mse(a: &Tensor<f32>, b: &Tensor<f32>, mask: &Tensor<f32>) -> f64 {
    let s = a.shape();
    let plane = s.h * s.w;
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..s.c {
        for i in 0..plane {
            let m = mask.data()[i] as f64;
            let d = (a.data()[c * plane + i] - b.data()[c * plane + i]) as f64;
            num += m * d * d;
            den += m;
        }
    }
    num / den
}

fn latent_gap(a: &Latent<f32>, b: &Latent<f32>) -> f64 {
    let mse = |x: &Tensor<f32>, y: &Tensor<f32>| {
        x.data().iter().zip(y.data()).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / x.data().len() as f64
    };
    mse(&a.z_t, &b.z_t) + mse(&a.z_b, &b.z_b)
}

/// Mean over images × transforms of `‖encode(f(X)) − f(encode(X))‖²` restricted to the warp's valid region.
fn equivariance_oracle(enc: &EncoderModel<f32>, images: &[Image], transforms: &[AffineTransform]) -> f64 {
    let mut total = 0.0;
    for img in images {
        let z = enc.encode_image(img).unwrap();
        for f in transforms {
            let (zf, masks) = latent_affine(&z, std::slice::from_ref(f)).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(img.to_tensor::<f32>());
            let (xf, _) = tape.affine_warp(x, std::slice::from_ref(f), PadMode::Zeros).unwrap();
            let ze = enc.encode(tape.value(xf)).unwrap();
            total += masked_mse(&ze.z_t, &zf.z_t, &masks.z_t) + masked_mse(&ze.z_b, &zf.z_b, &masks.z_b);
        }
    }
    total / (images.len() * transforms.len()) as f64
}

struct Stage1 {
    model: Autoencoder<f32>,
    init: Autoencoder<f32>,
    cfg: TrainConfig,
    report: StageReport,
    elapsed: Duration,
}

fn stage1() -> &'static Stage1 {
    static S: OnceLock<Stage1> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = TrainConfig::new(Stage::RgbAutoencoder, SEED);
        assert_eq!((cfg.steps, cfg.batch, cfg.channels), (3000, 8, 16));
        let (train, val) = (textures(0..TRAIN), textures(VAL));
        let started = Instant::now();
        let (model, report) = training::train_rgb_autoencoder::<f32>(&cfg, &train, &val).unwrap();
        let elapsed = started.elapsed();
        Stage1 { model, init: Autoencoder::init(&cfg).unwrap(), cfg, report, elapsed }
    })
}

#[test]
fn criterion_01_denoiser_parameter_count() {
    let started = Instant::now();
    let head = DenoiserHead::<f32>::new(64, 0).unwrap();
    let params = count_params(&head).unwrap();
    let profiled = count_flops(&head, 64, 64).unwrap().params;
    let stored: usize = head.params().iter().map(|p| p.value.data().len()).sum();
    let elapsed = started.elapsed();
    let pass = params == 443_136 && profiled == 443_136 && stored == 443_136 && elapsed < Duration::from_secs(1);
    verdict(1, pass, format!("params {params} (profile {profiled}, stored {stored}), {:.3} s", elapsed.as_secs_f64()));
}

#[test]
fn criterion_02_latent_shape_law() {
    let mut rng = common::rng(2);
    let mut bad = Vec::new();
    for case in 0..50 {
        let n = rng.random_range(1..=2);
        let cin = [1, 3][rng.random_range(0..2)];
        let c = rng.random_range(1..=8);
        let h = 4 * rng.random_range(1..=12);
        let w = 4 * rng.random_range(1..=12);
        let enc = EncoderModel::<f32>::new(cin, c, rng.random_range(0..=2), case).unwrap();
        let x = common::random_tensor(&mut rng, Shape::new(n, cin, h, w), 0.0, 1.0).cast::<f32>();
        let z = enc.encode(&x).unwrap();
        if z.z_b.shape() != Shape::new(n, c, h / 2, w / 2) || z.z_t.shape() != Shape::new(n, c, h / 4, w / 4) {
            bad.push(format!("{n}x{cin}x{h}x{w} -> {} / {}", z.z_b.shape(), z.z_t.shape()));
        }
    }
    verdict(2, bad.is_empty(), format!("50 random inputs, {} mismatches {bad:?}", bad.len()));
}

#[test]
fn criterion_03_gradient_suite() {
    let started = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in [31, 32] {
        for (name, err) in common::gradient_suite(seed) {
            checked += 1;
            if !(err < 1e-5) {
                failures.push(format!("{name} {err:e}"));
            }
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        3,
        pass,
        format!("{checked} checks, worst {} {:.2e}, {:.1} s {failures:?}", worst.0, worst.1, elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_04_stage1_reconstruction_and_equivariance() {
    let s = stage1();
    let val = textures(VAL);
    let val_t: Vec<Tensor<f32>> = val.iter().map(|i| i.to_tensor()).collect();
    let recon: f64 = val_t
        .iter()
        .map(|x| psnr(x.data(), s.model.decoder.decode(&s.model.encoder.encode(x).unwrap()).unwrap().data()))
        .sum::<f64>()
        / val_t.len() as f64;
    let transforms = training::equivariance_transforms(&s.cfg);
    assert_eq!((val.len(), transforms.len()), (20, 5));
    let before = equivariance_oracle(&s.init.encoder, &val, &transforms);
    let after = equivariance_oracle(&s.model.encoder, &val, &transforms);
    let ratio = after / before;
    let reported = s.report.metric("equivariance_ratio").unwrap();
    let pass = recon >= 25.0 && ratio <= 0.5 && reported <= 0.5 && minutes(s.elapsed) <= 20.0;
    verdict(
        4,
        pass,
        format!(
            "held-out PSNR {recon:.2} dB (>= 25), equivariance {after:.3e} / init {before:.3e} = {ratio:.4} (<= 0.5), {:.1} min",
            minutes(s.elapsed)
        ),
    );
}

#[test]
fn criterion_05_raw_encoder() {
    let s = stage1();
    let cfg = TrainConfig::new(Stage::RawEncoder, SEED);
    let pairs = |seeds: std::ops::Range<u64>| -> Vec<(BayerImage, Image)> {
        textures(seeds).into_iter().map(|i| (mosaic(&i).unwrap(), i)).collect()
    };
    let (train, val) = (pairs(0..TRAIN), pairs(VAL));
    let dec_before = write_checkpoint(&s.model.decoder.to_checkpoint()).unwrap();
    let enc_before = write_checkpoint(&s.model.encoder.to_checkpoint()).unwrap();
    let init = training::init_raw_encoder(&cfg, &s.model.encoder).unwrap();
    let started = Instant::now();
    let (raw, _) = training::train_raw_encoder(&cfg, &train, &val, &s.model.encoder, &s.model.decoder).unwrap();
    let elapsed = started.elapsed();
    let frozen = write_checkpoint(&s.model.decoder.to_checkpoint()).unwrap() == dec_before
        && write_checkpoint(&s.model.encoder.to_checkpoint()).unwrap() == enc_before;
    let (mut db, mut gap0, mut gap1) = (0.0, 0.0, 0.0);
    for (bayer, rgb) in &val {
        let z_rgb = s.model.encoder.encode_image(rgb).unwrap();
        let z_raw = raw.encode_bayer(bayer).unwrap();
        db += psnr(rgb.data(), s.model.decoder.decode(&z_raw).unwrap().data());
        gap0 += latent_gap(&init.encode_bayer(bayer).unwrap(), &z_rgb);
        gap1 += latent_gap(&z_raw, &z_rgb);
    }
    let k = val.len() as f64;
    let (db, gap0, gap1) = (db / k, gap0 / k, gap1 / k);
    let pass = frozen && db >= 23.0 && gap1 < gap0 && minutes(elapsed) <= 20.0;
    verdict(
        5,
        pass,
        format!(
            "decoder frozen {frozen}, decoded-Bayer PSNR {db:.2} dB (>= 23), latent gap {gap0:.3e} -> {gap1:.3e}, {:.1} min",
            minutes(elapsed)
        ),
    );
}

#[test]
fn criterion_06_latent_denoiser() {
    let s = stage1();
    let cfg = TrainConfig::new(Stage::Denoise, SEED);
    let pairs = |seeds: std::ops::Range<u64>| -> Vec<(Image, Image)> {
        seeds.map(|i| gen_noise_pair(i, SIGMA, SIZE, SIZE).unwrap()).collect()
    };
    let (train, val) = (pairs(0..TRAIN), pairs(VAL));
    let started = Instant::now();
    let (head, _) = training::train_denoiser(&cfg, &train, &val, &s.model.encoder, &s.model.decoder).unwrap();
    let elapsed = started.elapsed();
    let (mut noisy, mut denoised, mut zt_same) = (0.0, 0.0, true);
    for (n, c) in &val {
        let z = s.model.encoder.encode_image(n).unwrap();
        let zd = head.denoise_latent(&z).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        zt_same &= bits(&zd.z_t) == bits(&z.z_t);
        noisy += psnr(n.data(), c.data());
        denoised += psnr(s.model.decoder.decode(&zd).unwrap().data(), c.data());
    }
    let k = val.len() as f64;
    let gain = (denoised - noisy) / k;
    let pass = gain >= 3.0 && zt_same && minutes(elapsed) <= 15.0;
    verdict(
        6,
        pass,
        format!(
            "PSNR {:.2} -> {:.2} dB, gain {gain:.2} dB (>= 3), z_t bit-unchanged {zt_same}, {:.1} min",
            noisy / k,
            denoised / k,
            minutes(elapsed)
        ),
    );
}

/// Mean IoU from scratch: per class `tp / (tp + fp + fn)` over classes present in the truth.
fn mean_iou_oracle(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for k in 0..classes as u8 {
        let tp = pred.iter().zip(gt).filter(|&(&p, &g)| p == k && g == k).count();
        let fp = pred.iter().zip(gt).filter(|&(&p, &g)| p == k && g != k).count();
        let fneg = pred.iter().zip(gt).filter(|&(&p, &g)| p != k && g == k).count();
        if tp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn criterion_07_segmentation() {
    let hand = seg_metrics(&[0, 1, 1, 1], &[0, 1, 0, 1], 2, None).unwrap();
    let hand_ok = hand.mean_iu == (1.0 / 2.0 + 2.0 / 3.0) / 2.0 && hand.pixel_acc == 0.75 && hand.mean_acc == 0.75;

    let s = stage1();
    let cfg = TrainConfig::new(Stage::Seg, SEED);
    assert_eq!(cfg.classes, 5);
    let scenes = |seeds: std::ops::Range<u64>| -> Vec<(Image, LabelMap)> {
        seeds.map(|i| gen_seg_scene(i, cfg.classes, SIZE, SIZE).unwrap()).collect()
    };
    let (train, val) = (scenes(0..TRAIN), scenes(VAL));
    let started = Instant::now();
    let (head, _) = training::train_seg(&cfg, &train, &val, &s.model.encoder).unwrap();
    let elapsed = started.elapsed();
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for (img, labels) in &val {
        let logits = head.segment(&s.model.encoder.encode_image(img).unwrap()).unwrap();
        pred.extend(argmax_labels(&logits).remove(0).labels);
        gt.extend_from_slice(&labels.labels);
    }
    let miou = mean_iou_oracle(&pred, &gt, cfg.classes);
    let pass = hand_ok && miou >= 0.7 && minutes(elapsed) <= 15.0;
    verdict(
        7,
        pass,
        format!("hand 2x2 case exact {hand_ok}, held-out mIoU {miou:.4} (>= 0.7), {:.1} min", minutes(elapsed)),
    );
}

#[test]
fn criterion_08_stereo_depth() {
    let s = stage1();
    let cfg = TrainConfig::new(Stage::Depth, SEED);
    assert_eq!((cfg.alpha, cfg.d_max), (0.3, 16));
    let pairs = |seeds: std::ops::Range<u64>| -> Vec<StereoPair> {
        seeds.map(|i| gen_stereo_pair(i, cfg.d_max, STEREO_SIZE, STEREO_SIZE).unwrap()).collect()
    };
    let (train, val) = (pairs(0..STEREO_TRAIN), pairs(STEREO_VAL));
    let started = Instant::now();
    let (head, report) = training::train_depth(&cfg, &train, &val, &s.model.encoder).unwrap();
    let elapsed = started.elapsed();
    let (mut over3, mut valid) = (0usize, 0usize);
    for p in &val {
        let zl = s.model.encoder.encode_image(&p.left).unwrap();
        let zr = s.model.encoder.encode_image(&p.right).unwrap();
        let d = head.estimate_disparity(&zl, &zr).unwrap().learned;
        for ((&pred, &truth), &ok) in d.data().iter().zip(&p.disparity.values).zip(&p.disparity.valid) {
            if ok {
                valid += 1;
                over3 += ((pred - truth).abs() > 3.0) as usize;
            }
        }
    }
    let thresh3 = 100.0 * over3 as f64 / valid as f64;
    let ordered = |r: &StageReport| r.metric("d1_all").unwrap() <= r.metric("thresh3").unwrap();
    let mut rng = common::rng(8);
    let random_reports = (0..20).all(|_| {
        let n = 64;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        let m = nspace::eval::depth_metrics(&pred, &gt, &mask).unwrap();
        m.d1_all <= m.thresh3
    });
    let pass = thresh3 <= 25.0 && ordered(&report) && random_reports && minutes(elapsed) <= 25.0;
    verdict(
        8,
        pass,
        format!(
            "held-out thresh3 {thresh3:.2}% (<= 25), d1_all <= thresh3 on run report {} and 20 random reports {random_reports}, {:.1} min",
            ordered(&report),
            minutes(elapsed)
        ),
    );
}

#[test]
fn criterion_09_similarity_protocol() {
    let mut rng = common::rng(9);
    let set: Vec<Vec<f64>> = (0..4).map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let identical_zero = similarity_values(&set, &set).unwrap().iter().all(|&v| v == 0.0);

    let s = stage1();
    let started = Instant::now();
    let images = textures(2000..2030);
    let noisy: Vec<Tensor<f32>> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 50 + i as u64).unwrap();
            corrupt(img, &spec).unwrap().to_tensor()
        })
        .collect();
    let clean: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    let mut baseline = PixelDenoiser::<f32>::new(s.cfg.channels, SEED).unwrap();
    baseline
        .train(&Tensor::stack(&noisy).unwrap(), &Tensor::stack(&clean).unwrap(), 300, 8, Adam::default())
        .unwrap();
    let (ns, ps) = run_protocol(&images, &s.model.encoder, &baseline, SEED).unwrap();
    let elapsed = started.elapsed();
    let finite = ns.pairs.iter().chain(&ps.pairs).all(|p| p.value.is_finite());
    let complete = ns.pairs.len() == 240 && ps.pairs.len() == 240;
    let trend = if ns.avg_l1 < ps.avg_l1 { "NS lower" } else { "NS not lower" };
    let pass = identical_zero && finite && complete && minutes(elapsed) <= 5.0;
    verdict(
        9,
        pass,
        format!(
            "identical sets -> 0 {identical_zero}, {} pairs finite {finite}; NS avg {:.4} med {:.4} vs pixel avg {:.4} med {:.4} (informational: {trend}), {:.1} min",
            ns.pairs.len(),
            ns.avg_l1,
            ns.med_l1,
            ps.avg_l1,
            ps.med_l1,
            minutes(elapsed)
        ),
    );
}

#[test]
fn criterion_10_formats_and_flops() {
    let mut rng = common::rng(10);
    let z_t = common::random_tensor(&mut rng, Shape::new(2, 3, 2, 3), -5.0, 5.0).cast::<f32>();
    let z_b = common::random_tensor(&mut rng, Shape::new(2, 3, 4, 6), -5.0, 5.0).cast::<f32>();
    let z = Latent::new(z_t, z_b).unwrap();
    let bytes = write_latent(&z).unwrap();
    let back: Latent<f32> = read_latent(&bytes).unwrap();
    let bits = |l: &Latent<f32>| l.z_t.data().iter().chain(l.z_b.data()).map(|v| v.to_bits()).collect::<Vec<_>>();
    let latent_exact = bits(&back) == bits(&z) && write_latent(&back).unwrap() == bytes;

    let dec = DecoderModel::<f32>::new(4, 1, 3).unwrap();
    let ck_bytes = write_checkpoint(&dec.to_checkpoint()).unwrap();
    let restored = DecoderModel::from_checkpoint(&read_checkpoint(&ck_bytes).unwrap()).unwrap();
    let ckpt_exact = restored.params() == dec.params() && write_checkpoint(&restored.to_checkpoint()).unwrap() == ck_bytes;

    let undetected = |b: &[u8], read: &dyn Fn(&[u8]) -> bool| (0..b.len()).filter(|&i| {
        let mut bad = b.to_vec();
        bad[i] ^= 0x01;
        read(&bad)
    }).count();
    let latent_missed = undetected(&bytes, &|b| read_latent::<f32>(b).is_ok());
    let ckpt_missed = undetected(&ck_bytes, &|b| read_checkpoint::<f32>(b).is_ok());
    let mut payload_flip = bytes.clone();
    payload_flip[bytes.len() / 2] ^= 0x80;
    let checksum_named = matches!(read_latent::<f32>(&payload_flip), Err(Error::Checksum { .. }));

    let mut net = Network::<f32>::new(0);
    let i = net.add_conv("c", 16, 16, 3, 1, 1).unwrap();
    let hand: u64 = 2 * 16 * 16 * 3 * 3 * 32 * 32 + 16 * 32 * 32;
    let flops = net.conv_spec(i).flops(32, 32);
    let flops_ok = flops == 4_734_976 && hand == 4_734_976;

    let pass = latent_exact && ckpt_exact && latent_missed == 0 && ckpt_missed == 0 && checksum_named && flops_ok;
    verdict(
        10,
        pass,
        format!(
            "latent round trip {latent_exact}, checkpoint round trip {ckpt_exact}, undetected byte flips {latent_missed}+{ckpt_missed} of {}, conv FLOPs {flops} (hand {hand})",
            bytes.len() + ck_bytes.len()
        ),
    );
}
