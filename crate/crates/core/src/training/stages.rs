use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DenoiseTarget, Stage, TrainConfig};
use super::losses::{
    depth_loss, equivariance_loss, equivariance_residual, latent_l2, reconstruction_loss, seg_loss, ReconWeights,
};
use super::report::StageReport;
use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::eval::{depth_metrics, psnr, seg_metrics};
use crate::heads::{argmax_labels, DenoiserHead, DepthHead, SegHead};
use crate::imaging::{BayerImage, Image, LabelMap, StereoPair};
use crate::scalar::Scalar;
use crate::space::{DecoderModel, EncoderModel, Latent, Model};
use crate::tensor::{adam_step, Adam, Binding, Gradients, OptimizerState, ParameterSet, Tape, Tensor};

/// Held-out images and transforms used for the equivariance statistic.
pub const EQUIVARIANCE_IMAGES: usize = 20;
pub const EQUIVARIANCE_TRANSFORMS: usize = 5;

const EVAL_CHUNK: usize = 8;

fn stage_rng(cfg: &TrainConfig, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn adam(cfg: &TrainConfig) -> Adam {
    Adam { lr: cfg.lr, ..Adam::default() }
}

fn recon_weights(cfg: &TrainConfig) -> ReconWeights {
    ReconWeights { l1: cfg.w_l1, ssim: cfg.w_ssim }
}

fn require_data<A>(train: &[A], what: &str) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data(format!("{what} dataset is empty")));
    }
    Ok(())
}

fn pick(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn gather<T: Scalar>(items: &[Tensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    Tensor::stack(&idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>())
}

fn gather_latent<T: Scalar>(items: &[Latent<T>], idx: &[usize]) -> Result<Latent<T>> {
    Latent::stack(&idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>())
}

fn value<T: Scalar>(tape: &Tape<T>, v: crate::tensor::Var) -> f64 {
    tape.value(v).item().f64()
}

fn step<T: Scalar>(params: &mut ParameterSet<T>, bind: &Binding, grads: &mut Gradients<T>, state: &mut OptimizerState<T>) -> Result<()> {
    let g = bind.collect(grads);
    adam_step(params, &g, state)
}

/// Encodes one tensor per sample, in chunks.
fn encode_all<T: Scalar>(encoder: &EncoderModel<T>, inputs: &[Tensor<T>]) -> Result<Vec<Latent<T>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let z = encoder.encode(&Tensor::stack(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| z.sample(i)));
    }
    Ok(out)
}

fn decode_all<T: Scalar>(decoder: &DecoderModel<T>, latents: &[Latent<T>]) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(EVAL_CHUNK) {
        let y = decoder.decode(&Latent::stack(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| y.sample(i)));
    }
    Ok(out)
}

fn mean_psnr<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| psnr(x.data(), y.data())).sum::<f64>() / a.len().max(1) as f64
}

fn tensors<T: Scalar>(images: &[Image]) -> Vec<Tensor<T>> {
    images.iter().map(|i| i.to_tensor()).collect()
}

fn same_size(images: &[Image], what: &str) -> Result<()> {
    if let Some(first) = images.first() {
        if images.iter().any(|i| i.height() != first.height() || i.width() != first.width()) {
            return Err(Error::Data(format!("{what} images differ in size")));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ stage 1

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub encoder: EncoderModel<T>,
    pub decoder: DecoderModel<T>,
}

impl<T: Scalar> Autoencoder<T> {
    /// Fresh weights drawn from the config seed.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        Ok(Autoencoder {
            encoder: EncoderModel::new(3, cfg.channels, cfg.blocks, cfg.seed)?,
            decoder: DecoderModel::new(cfg.channels, cfg.blocks, cfg.seed.wrapping_add(1))?,
        })
    }

    /// Mean PSNR of `decode(encode(x))` against `x`.
    pub fn psnr(&self, images: &[Tensor<T>]) -> Result<f64> {
        let z = encode_all(&self.encoder, images)?;
        Ok(mean_psnr(&decode_all(&self.decoder, &z)?, images))
    }
}

/// Fixed evaluation transforms for the equivariance statistic.
pub fn equivariance_transforms(cfg: &TrainConfig) -> Vec<AffineTransform> {
    let mut rng = stage_rng(cfg, 0xe7a1);
    (0..EQUIVARIANCE_TRANSFORMS).map(|_| cfg.affine.sample(&mut rng)).collect()
}

/// Equivariance statistic over up to [`EQUIVARIANCE_IMAGES`] held-out images.
pub fn held_out_equivariance<T: Scalar>(encoder: &EncoderModel<T>, val: &[Tensor<T>], transforms: &[AffineTransform]) -> Result<f64> {
    let take = &val[..val.len().min(EQUIVARIANCE_IMAGES)];
    let mut total = 0.0;
    for chunk in take.chunks(EVAL_CHUNK) {
        total += equivariance_residual(encoder, &Tensor::stack(chunk)?, transforms)? * chunk.len() as f64;
    }
    Ok(total / take.len() as f64)
}

pub fn train_rgb_autoencoder<T: Scalar>(cfg: &TrainConfig, train: &[Image], val: &[Image]) -> Result<(Autoencoder<T>, StageReport)> {
    train_rgb_autoencoder_from(cfg, Autoencoder::init(cfg)?, train, val)
}

/// Reconstruction plus the equivariance regularizer, one fresh transform per example per step.
pub fn train_rgb_autoencoder_from<T: Scalar>(
    cfg: &TrainConfig,
    mut model: Autoencoder<T>,
    train: &[Image],
    val: &[Image],
) -> Result<(Autoencoder<T>, StageReport)> {
    cfg.validate()?;
    require_data(train, "RGB")?;
    same_size(train, "training")?;
    let started = Instant::now();
    let data: Vec<Tensor<T>> = tensors(train);
    let val_t: Vec<Tensor<T>> = tensors(val);
    let w = recon_weights(cfg);
    let mut report = StageReport::new(Stage::RgbAutoencoder, &["recon", "equiv_latent", "equiv_recon"]);
    let eq_transforms = equivariance_transforms(cfg);
    if !val_t.is_empty() {
        report.metrics.insert("val_psnr_initial".into(), model.psnr(&val_t)?);
        report.metrics.insert("equivariance_initial".into(), held_out_equivariance(&model.encoder, &val_t, &eq_transforms)?);
    }

    let mut rng = stage_rng(cfg, 1);
    let mut enc_state = OptimizerState::new(model.encoder.params(), adam(cfg));
    let mut dec_state = OptimizerState::new(model.decoder.params(), adam(cfg));
    for _ in 0..cfg.steps {
        let idx = pick(&mut rng, data.len(), cfg.batch);
        let fs: Vec<AffineTransform> = (0..cfg.batch).map(|_| cfg.affine.sample(&mut rng)).collect();
        let mut tape = Tape::new();
        let eb = model.encoder.params().bind(&mut tape);
        let db = model.decoder.params().bind(&mut tape);
        let x = tape.constant(gather(&data, &idx)?);
        let z = model.encoder.forward(&mut tape, &eb, x)?;
        let y = model.decoder.forward(&mut tape, &db, z)?;
        let rl = reconstruction_loss(&mut tape, y, x, w)?;
        let eq = equivariance_loss(&mut tape, &model.encoder, &eb, &model.decoder, &db, x, z, &fs, w)?;
        let total = tape.add(rl, eq.latent)?;
        let total = tape.add(total, eq.recon)?;
        report.push_step(vec![value(&tape, total), value(&tape, rl), value(&tape, eq.latent), value(&tape, eq.recon)])?;
        let mut grads = tape.backward(total)?;
        step(model.encoder.params_mut(), &eb, &mut grads, &mut enc_state)?;
        step(model.decoder.params_mut(), &db, &mut grads, &mut dec_state)?;
    }

    if !val_t.is_empty() {
        report.metrics.insert("val_psnr".into(), model.psnr(&val_t)?);
        let fin = held_out_equivariance(&model.encoder, &val_t, &eq_transforms)?;
        report.metrics.insert("equivariance_final".into(), fin);
        if let Some(init) = report.metric("equivariance_initial") {
            report.metrics.insert("equivariance_ratio".into(), fin / init);
        }
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}

// ------------------------------------------------------------------ stage 2

/// RAW encoder initialization. With `warm_start` every weight is copied from
/// the RGB encoder and the stem kernel is summed over its input channels.
pub fn init_raw_encoder<T: Scalar>(cfg: &TrainConfig, rgb: &EncoderModel<T>) -> Result<EncoderModel<T>> {
    let mut raw = EncoderModel::new(1, rgb.channels, rgb.blocks, cfg.seed.wrapping_add(2))?;
    if cfg.warm_start {
        for p in raw.params_mut().iter_mut() {
            let src = rgb.params().by_name(&p.name).ok_or_else(|| Error::Format(format!("RGB encoder lacks `{}`", p.name)))?;
            if src.value.shape() == p.value.shape() {
                p.value = src.value.clone();
            } else {
                let s = src.value.shape();
                p.value = Tensor::from_fn(p.value.shape(), |o, _, y, x| (0..s.c).fold(T::zero(), |acc, c| acc + src.value.at(o, c, y, x)));
            }
        }
    }
    Ok(raw)
}

/// Mean latent L2 between `raw(bayer)` and `z`.
fn latent_gap<T: Scalar>(raw: &EncoderModel<T>, bayer: &[Tensor<T>], z: &[Latent<T>]) -> Result<f64> {
    let zr = encode_all(raw, bayer)?;
    let mut total = 0.0;
    for (a, b) in zr.iter().zip(z) {
        let mut tape = Tape::new();
        let (av, bv) = (a.record(&mut tape), b.record(&mut tape));
        let l = latent_l2(&mut tape, av, bv)?;
        total += value(&tape, l);
    }
    Ok(total / z.len().max(1) as f64)
}

/// Trains the RAW encoder against a frozen decoder and RGB encoder. `train`
/// and `val` hold `(bayer, rgb)` pairs.
pub fn train_raw_encoder<T: Scalar>(
    cfg: &TrainConfig,
    train: &[(BayerImage, Image)],
    val: &[(BayerImage, Image)],
    rgb_encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
) -> Result<(EncoderModel<T>, StageReport)> {
    let raw = init_raw_encoder(cfg, rgb_encoder)?;
    train_raw_encoder_from(cfg, raw, train, val, rgb_encoder, decoder)
}

pub fn train_raw_encoder_from<T: Scalar>(
    cfg: &TrainConfig,
    mut raw: EncoderModel<T>,
    train: &[(BayerImage, Image)],
    val: &[(BayerImage, Image)],
    rgb_encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
) -> Result<(EncoderModel<T>, StageReport)> {
    cfg.validate()?;
    require_data(train, "paired (bayer, rgb)")?;
    if raw.in_channels != 1 || rgb_encoder.in_channels != 3 {
        return Err(Error::invalid("train_raw_encoder", "expected a 1-channel RAW encoder and a 3-channel RGB encoder"));
    }
    let started = Instant::now();
    let w = recon_weights(cfg);
    let bayer: Vec<Tensor<T>> = train.iter().map(|(b, _)| b.to_tensor()).collect();
    let z = encode_all(rgb_encoder, &train.iter().map(|(_, r)| r.to_tensor()).collect::<Vec<_>>())?;
    let dz = decode_all(decoder, &z)?;
    let val_bayer: Vec<Tensor<T>> = val.iter().map(|(b, _)| b.to_tensor()).collect();
    let val_rgb: Vec<Tensor<T>> = val.iter().map(|(_, r)| r.to_tensor()).collect();
    let val_z = encode_all(rgb_encoder, &val_rgb)?;

    let mut report = StageReport::new(Stage::RawEncoder, &["latent", "recon"]);
    let eval = |raw: &EncoderModel<T>, report: &mut StageReport, at: usize| -> Result<()> {
        if !val.is_empty() {
            report.trace("latent_gap", at, latent_gap(raw, &val_bayer, &val_z)?);
        }
        Ok(())
    };
    eval(&raw, &mut report, 0)?;
    let mut rng = stage_rng(cfg, 2);
    let mut state = OptimizerState::new(raw.params(), adam(cfg));
    for s in 0..cfg.steps {
        let idx = pick(&mut rng, bayer.len(), cfg.batch);
        let mut tape = Tape::new();
        let rb = raw.params().bind(&mut tape);
        let db = decoder.params().bind_frozen(&mut tape);
        let x = tape.constant(gather(&bayer, &idx)?);
        let target = gather_latent(&z, &idx)?.record(&mut tape);
        let decoded_target = tape.constant(gather(&dz, &idx)?);
        let zr = raw.forward(&mut tape, &rb, x)?;
        let lat = latent_l2(&mut tape, zr, target)?;
        let y = decoder.forward(&mut tape, &db, zr)?;
        let rl = reconstruction_loss(&mut tape, y, decoded_target, w)?;
        let total = tape.add(lat, rl)?;
        report.push_step(vec![value(&tape, total), value(&tape, lat), value(&tape, rl)])?;
        let mut grads = tape.backward(total)?;
        step(raw.params_mut(), &rb, &mut grads, &mut state)?;
        if cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0 && s + 1 != cfg.steps {
            eval(&raw, &mut report, s + 1)?;
        }
    }
    eval(&raw, &mut report, cfg.steps)?;

    if !val.is_empty() {
        let gaps = &report.traces["latent_gap"];
        let (first, last) = (gaps[0].1, gaps[gaps.len() - 1].1);
        report.metrics.insert("latent_gap_initial".into(), first);
        report.metrics.insert("latent_gap_final".into(), last);
        let decoded = decode_all(decoder, &encode_all(&raw, &val_bayer)?)?;
        report.metrics.insert("val_psnr".into(), mean_psnr(&decoded, &val_rgb));
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((raw, report))
}

// ------------------------------------------------------------------ stage 3

/// Residual branches start at zero so the untrained head is the identity.
pub fn init_denoiser<T: Scalar>(cfg: &TrainConfig) -> Result<DenoiserHead<T>> {
    let mut head = DenoiserHead::new(cfg.channels, cfg.seed.wrapping_add(3))?;
    head.zero_residuals();
    Ok(head)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseScores {
    pub noisy: f64,
    pub denoised: f64,
    /// Clean input through encoder and decoder only.
    pub clean_autoencoded: f64,
    /// Clean input through encoder, head and decoder.
    pub clean_through_head: f64,
}

/// Mean PSNRs against the clean images of `(noisy, clean)` pairs.
pub fn denoise_scores<T: Scalar>(
    head: &DenoiserHead<T>,
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
    pairs: &[(Image, Image)],
) -> Result<DenoiseScores> {
    let noisy: Vec<Tensor<T>> = pairs.iter().map(|(n, _)| n.to_tensor()).collect();
    let clean: Vec<Tensor<T>> = pairs.iter().map(|(_, c)| c.to_tensor()).collect();
    let through = |x: &[Tensor<T>]| -> Result<Vec<Tensor<T>>> {
        let z = encode_all(encoder, x)?;
        let zd = z.iter().map(|l| head.denoise_latent(l)).collect::<Result<Vec<_>>>()?;
        decode_all(decoder, &zd)
    };
    Ok(DenoiseScores {
        noisy: mean_psnr(&noisy, &clean),
        denoised: mean_psnr(&through(&noisy)?, &clean),
        clean_autoencoded: mean_psnr(&decode_all(decoder, &encode_all(encoder, &clean)?)?, &clean),
        clean_through_head: mean_psnr(&through(&clean)?, &clean),
    })
}

/// Trains the latent denoiser on `(noisy, clean)` pairs with the encoder and decoder frozen.
pub fn train_denoiser<T: Scalar>(
    cfg: &TrainConfig,
    train: &[(Image, Image)],
    val: &[(Image, Image)],
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
) -> Result<(DenoiserHead<T>, StageReport)> {
    train_denoiser_from(cfg, init_denoiser(cfg)?, train, val, encoder, decoder)
}

pub fn train_denoiser_from<T: Scalar>(
    cfg: &TrainConfig,
    mut head: DenoiserHead<T>,
    train: &[(Image, Image)],
    val: &[(Image, Image)],
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
) -> Result<(DenoiserHead<T>, StageReport)> {
    cfg.validate()?;
    require_data(train, "noise pair")?;
    let started = Instant::now();
    let w = recon_weights(cfg);
    let mut report = StageReport::new(Stage::Denoise, &["latent", "recon"]);
    if cfg.sigma == 0.0 || train.iter().all(|(n, c)| n.max_abs_diff(c) == 0.0) {
        report.warnings.push("noise level is zero; the denoiser sees identical inputs and targets".into());
    }
    let clean: Vec<Tensor<T>> = train.iter().map(|(_, c)| c.to_tensor()).collect();
    let zn = encode_all(encoder, &train.iter().map(|(n, _)| n.to_tensor()).collect::<Vec<_>>())?;
    let zc = encode_all(encoder, &clean)?;

    let mut rng = stage_rng(cfg, 3);
    let mut state = OptimizerState::new(head.params(), adam(cfg));
    for _ in 0..cfg.steps {
        let idx = pick(&mut rng, clean.len(), cfg.batch);
        let mut tape = Tape::new();
        let hb = head.params().bind(&mut tape);
        let db = decoder.params().bind_frozen(&mut tape);
        let noisy = gather_latent(&zn, &idx)?.record(&mut tape);
        let target = gather_latent(&zc, &idx)?.record(&mut tape);
        let x_gt = tape.constant(gather(&clean, &idx)?);
        let fd = head.forward(&mut tape, &hb, noisy)?;
        let lat = match cfg.denoise_target {
            DenoiseTarget::Literal => {
                let fc = head.forward(&mut tape, &hb, target)?;
                latent_l2(&mut tape, fc, fd)?
            }
            DenoiseTarget::Clean => latent_l2(&mut tape, target, fd)?,
        };
        let y = decoder.forward(&mut tape, &db, fd)?;
        let rl = reconstruction_loss(&mut tape, x_gt, y, w)?;
        let weighted = tape.scale(rl, T::c(cfg.lambda));
        let total = tape.add(lat, weighted)?;
        report.push_step(vec![value(&tape, total), value(&tape, lat), value(&tape, rl)])?;
        let mut grads = tape.backward(total)?;
        step(head.params_mut(), &hb, &mut grads, &mut state)?;
    }

    if !val.is_empty() {
        let s = denoise_scores(&head, encoder, decoder, val)?;
        report.metrics.insert("psnr_noisy".into(), s.noisy);
        report.metrics.insert("psnr_denoised".into(), s.denoised);
        report.metrics.insert("psnr_gain".into(), s.denoised - s.noisy);
        report.metrics.insert("psnr_clean_autoencoded".into(), s.clean_autoencoded);
        report.metrics.insert("psnr_clean_through_head".into(), s.clean_through_head);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((head, report))
}

// ------------------------------------------------------------------ stage 4

fn check_labels(samples: &[(Image, LabelMap)], classes: usize) -> Result<()> {
    for (img, l) in samples {
        if l.height != img.height() || l.width != img.width() {
            return Err(Error::Data(format!("label map {}x{} does not match image {}x{}", l.height, l.width, img.height(), img.width())));
        }
        if let Some(&bad) = l.labels.iter().find(|&&v| v as usize >= classes && v != super::losses::IGNORE_LABEL) {
            return Err(Error::Data(format!("label {bad} found but the head has {classes} classes")));
        }
    }
    Ok(())
}

/// Mean IU and accuracies of `head` on `(image, labels)` pairs.
pub fn seg_scores<T: Scalar>(head: &SegHead<T>, encoder: &EncoderModel<T>, samples: &[(Image, LabelMap)]) -> Result<crate::eval::SegMetrics> {
    let z = encode_all(encoder, &samples.iter().map(|(i, _)| i.to_tensor()).collect::<Vec<_>>())?;
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for (zi, (_, l)) in z.iter().zip(samples) {
        pred.extend(argmax_labels(&head.segment(zi)?).remove(0).labels);
        gt.extend_from_slice(&l.labels);
    }
    seg_metrics(&pred, &gt, head.classes, Some(super::losses::IGNORE_LABEL))
}

pub fn train_seg<T: Scalar>(
    cfg: &TrainConfig,
    train: &[(Image, LabelMap)],
    val: &[(Image, LabelMap)],
    encoder: &EncoderModel<T>,
) -> Result<(SegHead<T>, StageReport)> {
    let head = SegHead::new(encoder.channels, cfg.classes, cfg.seed.wrapping_add(4))?;
    train_seg_from(cfg, head, train, val, encoder)
}

pub fn train_seg_from<T: Scalar>(
    cfg: &TrainConfig,
    mut head: SegHead<T>,
    train: &[(Image, LabelMap)],
    val: &[(Image, LabelMap)],
    encoder: &EncoderModel<T>,
) -> Result<(SegHead<T>, StageReport)> {
    cfg.validate()?;
    require_data(train, "segmentation")?;
    check_labels(train, head.classes)?;
    check_labels(val, head.classes)?;
    let started = Instant::now();
    let z = encode_all(encoder, &train.iter().map(|(i, _)| i.to_tensor()).collect::<Vec<_>>())?;
    let mut report = StageReport::new(Stage::Seg, &["ce"]);
    let mut rng = stage_rng(cfg, 4);
    let mut state = OptimizerState::new(head.params(), adam(cfg));
    for _ in 0..cfg.steps {
        let idx = pick(&mut rng, z.len(), cfg.batch);
        let labels: Vec<u8> = idx.iter().flat_map(|&i| train[i].1.labels.iter().copied()).collect();
        let mut tape = Tape::new();
        let hb = head.params().bind(&mut tape);
        let zv = gather_latent(&z, &idx)?.record(&mut tape);
        let logits = head.forward(&mut tape, &hb, zv)?;
        let ce = seg_loss(&mut tape, logits, &labels)?;
        report.push_step(vec![value(&tape, ce), value(&tape, ce)])?;
        let mut grads = tape.backward(ce)?;
        step(head.params_mut(), &hb, &mut grads, &mut state)?;
    }
    if !val.is_empty() {
        let m = seg_scores(&head, encoder, val)?;
        report.metrics.insert("mean_iu".into(), m.mean_iu);
        report.metrics.insert("pixel_acc".into(), m.pixel_acc);
        report.metrics.insert("mean_acc".into(), m.mean_acc);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((head, report))
}

// ------------------------------------------------------------------ stage 5

fn check_disparity(pairs: &[StereoPair], d_max: usize) -> Result<()> {
    for p in pairs {
        let worst = p.disparity.values.iter().zip(&p.disparity.valid).filter(|(_, &v)| v).map(|(&d, _)| d).fold(0.0f32, f32::max);
        if worst > d_max as f32 {
            return Err(Error::Data(format!("disparity {worst} exceeds d_max {d_max}")));
        }
        if p.disparity.valid_count() == 0 {
            return Err(Error::Data("stereo sample has no valid disparity".into()));
        }
    }
    Ok(())
}

fn encode_views<T: Scalar>(encoder: &EncoderModel<T>, pairs: &[StereoPair]) -> Result<(Vec<Latent<T>>, Vec<Latent<T>>)> {
    let l = encode_all(encoder, &pairs.iter().map(|p| p.left.to_tensor()).collect::<Vec<_>>())?;
    let r = encode_all(encoder, &pairs.iter().map(|p| p.right.to_tensor()).collect::<Vec<_>>())?;
    Ok((l, r))
}

/// Error rates of the learned upsampled disparity on held-out pairs.
pub fn depth_scores<T: Scalar>(head: &DepthHead<T>, encoder: &EncoderModel<T>, pairs: &[StereoPair]) -> Result<crate::eval::DepthMetrics> {
    let (zl, zr) = encode_views(encoder, pairs)?;
    let (mut pred, mut gt, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for ((l, r), p) in zl.iter().zip(&zr).zip(pairs) {
        let out = head.estimate_disparity(l, r)?;
        pred.extend(out.learned.data().iter().map(|v| v.f64()));
        gt.extend(p.disparity.values.iter().map(|&v| v as f64));
        mask.extend_from_slice(&p.disparity.valid);
    }
    depth_metrics(&pred, &gt, &mask)
}

pub fn train_depth<T: Scalar>(
    cfg: &TrainConfig,
    train: &[StereoPair],
    val: &[StereoPair],
    encoder: &EncoderModel<T>,
) -> Result<(DepthHead<T>, StageReport)> {
    let head = DepthHead::new(encoder.channels, cfg.d_max, cfg.seed.wrapping_add(5))?;
    train_depth_from(cfg, head, train, val, encoder)
}

pub fn train_depth_from<T: Scalar>(
    cfg: &TrainConfig,
    mut head: DepthHead<T>,
    train: &[StereoPair],
    val: &[StereoPair],
    encoder: &EncoderModel<T>,
) -> Result<(DepthHead<T>, StageReport)> {
    cfg.validate()?;
    require_data(train, "stereo")?;
    check_disparity(train, head.d_max)?;
    check_disparity(val, head.d_max)?;
    let started = Instant::now();
    let (zl, zr) = encode_views(encoder, train)?;
    let gt: Vec<Tensor<T>> = train.iter().map(|p| p.disparity.to_tensor()).collect();
    let masks: Vec<Tensor<T>> = train.iter().map(|p| p.disparity.mask_tensor()).collect();
    let mut report = StageReport::new(Stage::Depth, &["learned", "bilinear"]);
    let mut rng = stage_rng(cfg, 5);
    let mut state = OptimizerState::new(head.params(), adam(cfg));
    for _ in 0..cfg.steps {
        let idx = pick(&mut rng, zl.len(), cfg.batch);
        let mut tape = Tape::new();
        let hb = head.params().bind(&mut tape);
        let l = gather_latent(&zl, &idx)?.record(&mut tape);
        let r = gather_latent(&zr, &idx)?.record(&mut tape);
        let target = tape.constant(gather(&gt, &idx)?);
        let mask = gather(&masks, &idx)?;
        let out = head.forward(&mut tape, &hb, l, r)?;
        let (total, a, b) = depth_loss(&mut tape, out.learned, out.bilinear, target, &mask, cfg.alpha)?;
        report.push_step(vec![value(&tape, total), value(&tape, a), value(&tape, b)])?;
        let mut grads = tape.backward(total)?;
        step(head.params_mut(), &hb, &mut grads, &mut state)?;
    }
    if !val.is_empty() {
        let m = depth_scores(&head, encoder, val)?;
        report.metrics.insert("d1_all".into(), m.d1_all);
        report.metrics.insert("thresh3".into(), m.thresh3);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((head, report))
}
