use std::path::{Path, PathBuf};

use nspace::affine::AffineTransform;
use nspace::eval::{bench as time_runs, count_flops, run_protocol, PixelDenoiser, ProfileReport};
use nspace::heads::{DenoiserHead, DepthHead, SegHead};
use nspace::imaging::{
    corrupt, gen_texture_scene, generate_dataset, load_image, mosaic, save_disparity, save_image, save_labels,
    BayerImage, CorruptionKind, CorruptionSpec, DatasetKind, DatasetSpec, Disparity, Image, Manifest, Split,
};
use nspace::space::{
    latent_affine, load_checkpoint, load_latent, save_latent, Checkpoint, DecoderModel, EncoderModel, Latent, Model,
    ModelKind,
};
use nspace::tensor::Adam;
use nspace::training::{self, RunDir, Stage, StageReport, TrainConfig, REPORT_FILE};
use nspace::{Error, Shape, Tensor};

use crate::args::*;
use crate::settings::{train_config, Settings};
use crate::{CmdResult, Failure};

const RGB_ENCODER: &str = "rgb_encoder";
const RAW_ENCODER: &str = "raw_encoder";
const DECODER: &str = "decoder";
const MANIFEST_REF: &str = "manifest.txt";
const LOG_FILE: &str = "log.txt";
/// Metadata key naming the stage-1 run a later checkpoint was trained against.
const BACKBONE_KEY: &str = "backbone";

fn ckpt_file(name: &str) -> String {
    format!("{name}.nsck")
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn missing_stage1(p: &Path) -> Failure {
    Failure::Prerequisite(format!(
        "no stage-1 checkpoint at {}; run `nspace train-rgb` first",
        p.display()
    ))
}

/// Stage-1 encoder and decoder files from a run directory or the encoder file.
fn stage1_files(p: &Path) -> Result<(PathBuf, PathBuf), Failure> {
    let (enc, dec) = if p.is_dir() {
        (p.join(ckpt_file(RGB_ENCODER)), p.join(ckpt_file(DECODER)))
    } else {
        let dir = p.parent().unwrap_or(Path::new("."));
        (p.to_path_buf(), dir.join(ckpt_file(DECODER)))
    };
    if !enc.is_file() || !dec.is_file() {
        return Err(missing_stage1(p));
    }
    Ok((enc, dec))
}

struct Backbone {
    dir: PathBuf,
    encoder: EncoderModel<f32>,
    decoder: DecoderModel<f32>,
}

fn load_backbone(p: &Path) -> Result<Backbone, Failure> {
    let (enc, dec) = stage1_files(p)?;
    let ck = load_checkpoint::<f32>(&enc)?;
    if ck.kind != ModelKind::RgbEncoder {
        return Err(missing_stage1(p));
    }
    let encoder = EncoderModel::from_checkpoint(&ck)?;
    let decoder = DecoderModel::from_checkpoint(&load_checkpoint(&dec)?)?;
    let dir = absolute(enc.parent().unwrap_or(Path::new(".")));
    Ok(Backbone { dir, encoder, decoder })
}

/// `p` itself, or `p/<name>.nsck` when `p` is a directory.
fn resolve(p: &Path, name: &str) -> PathBuf {
    if p.is_dir() {
        p.join(ckpt_file(name))
    } else {
        p.to_path_buf()
    }
}

fn load_head(p: &Path, name: &str, trained_by: &str) -> Result<Checkpoint<f32>, Failure> {
    let file = resolve(p, name);
    if !file.is_file() {
        return Err(Failure::Prerequisite(format!(
            "no {name} checkpoint at {}; run `nspace train-head {trained_by}` first",
            p.display()
        )));
    }
    Ok(load_checkpoint(&file)?)
}

fn head_backbone(ckpt: &Checkpoint<f32>, flag: &Option<PathBuf>) -> Result<Backbone, Failure> {
    match (flag, ckpt.get(BACKBONE_KEY)) {
        (Some(p), _) => load_backbone(p),
        (None, Some(p)) => load_backbone(Path::new(p)),
        (None, None) => Err(Failure::Prerequisite("head checkpoint names no stage-1 run; pass --backbone".into())),
    }
}

fn encode_file(encoder: &EncoderModel<f32>, path: &Path) -> Result<Latent<f32>, Failure> {
    let img = load_image(path)?;
    if encoder.in_channels == 1 {
        Ok(encoder.encode_bayer(&BayerImage::from_image(&img)?)?)
    } else {
        Ok(encoder.encode_image(&img)?)
    }
}

fn single(mut images: Vec<Image>) -> Result<Image, Failure> {
    if images.len() != 1 {
        return Err(Error::Data(format!("expected one image, got {}", images.len())).into());
    }
    Ok(images.pop().expect("one"))
}

// ------------------------------------------------------------------ data

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let s = Settings::load(&a.common)?;
    let kind: DatasetKind = s
        .opt("kind", a.kind)?
        .ok_or_else(|| Error::Config("--kind is required (texture, seg, stereo or noise)".into()))?
        .parse()?;
    let size = s.get("size", a.size, 48)?;
    let mut spec = DatasetSpec::new(kind, s.get("train", a.train, 256)?, s.get("val", a.val, 20)?, size, s.seed()?);
    spec.height = s.get("height", a.height, size)?;
    spec.width = s.get("width", a.width, size)?;
    spec.classes = s.get("classes", a.classes, spec.classes)?;
    spec.d_max = s.get("d_max", a.d_max, spec.d_max)?;
    spec.sigma = s.get("sigma", a.sigma, 25.0 / 255.0)?;
    s.finish()?;
    if a.out.join(nspace::imaging::MANIFEST_FILE).exists() {
        return Err(Error::Config(format!("{} already holds a dataset", a.out.display())).into());
    }
    let m = generate_dataset(&spec, &a.out)?;
    println!("kind: {kind}");
    println!("train: {}", m.count(Split::Train));
    println!("val: {}", m.count(Split::Val));
    println!("manifest: {}", m.path().display());
    Ok(())
}

// ------------------------------------------------------------------ training

/// Opens a fresh run directory; runs are append-only.
fn open_run(out: &Path) -> Result<RunDir, Failure> {
    if out.join(REPORT_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a finished run; run directories are append-only",
            out.display()
        ))
        .into());
    }
    Ok(RunDir::create(out)?)
}

fn write_text(p: PathBuf, text: &str) -> Result<(), Failure> {
    std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?;
    Ok(())
}

fn finish_run(run: &RunDir, m: &Manifest, backbone: Option<&Path>, report: &StageReport) -> CmdResult {
    let mut refs = format!(
        "manifest = {}\ntrain = {}\nval = {}\n",
        absolute(&m.path()).display(),
        m.count(Split::Train),
        m.count(Split::Val)
    );
    if let Some(b) = backbone {
        refs.push_str(&format!("backbone = {}\n", b.display()));
    }
    write_text(run.file(MANIFEST_REF), &refs)?;
    run.write_report(report)?;
    let text = report.to_string();
    write_text(run.file(LOG_FILE), &format!("{text}\n"))?;
    println!("{text}");
    println!("run: {}", run.path.display());
    Ok(())
}

/// Forces the backbone's width, rejecting a conflicting `--channels`.
fn adopt_width(cfg: &mut TrainConfig, flag: Option<usize>, enc: &EncoderModel<f32>) -> Result<(), Failure> {
    if let Some(c) = flag.filter(|&c| c != enc.channels) {
        return Err(Error::Config(format!("--channels {c} conflicts with the stage-1 width {}", enc.channels)).into());
    }
    cfg.channels = enc.channels;
    cfg.blocks = enc.blocks;
    Ok(())
}

fn save(run: &RunDir, report: &mut StageReport, name: &str, ck: Checkpoint<f32>, cfg: &TrainConfig) -> CmdResult {
    let p = run.save_checkpoint(name, ck, cfg, report.steps)?;
    report.checkpoints.push(p);
    Ok(())
}

pub fn train_rgb(a: TrainArgs) -> CmdResult {
    let cfg = train_config(Stage::RgbAutoencoder, &a.common, a.channels, a.steps)?;
    let m = Manifest::load(&a.data)?;
    let train = training::load_rgb(&m, Split::Train)?;
    let val = training::load_rgb(&m, Split::Val)?;
    let run = open_run(&a.out)?;
    run.write_config(&cfg)?;
    let (ae, mut report) = training::train_rgb_autoencoder::<f32>(&cfg, &train, &val)?;
    save(&run, &mut report, RGB_ENCODER, ae.encoder.to_checkpoint(), &cfg)?;
    save(&run, &mut report, DECODER, ae.decoder.to_checkpoint(), &cfg)?;
    finish_run(&run, &m, None, &report)
}

pub fn train_raw(a: StagedArgs) -> CmdResult {
    let t = &a.train;
    let mut cfg = train_config(Stage::RawEncoder, &t.common, t.channels, t.steps)?;
    let bb = load_backbone(&a.checkpoint)?;
    adopt_width(&mut cfg, t.channels, &bb.encoder)?;
    let m = Manifest::load(&t.data)?;
    let train = training::load_raw_pairs(&m, Split::Train)?;
    let val = training::load_raw_pairs(&m, Split::Val)?;
    let run = open_run(&t.out)?;
    run.write_config(&cfg)?;
    let (raw, mut report) = training::train_raw_encoder(&cfg, &train, &val, &bb.encoder, &bb.decoder)?;
    let ck = raw.to_checkpoint().with(BACKBONE_KEY, bb.dir.display());
    save(&run, &mut report, RAW_ENCODER, ck, &cfg)?;
    finish_run(&run, &m, Some(&bb.dir), &report)
}

pub fn train_head(a: TrainHeadArgs) -> CmdResult {
    let t = &a.staged.train;
    let stage = match a.head {
        Head::Denoise => Stage::Denoise,
        Head::Seg => Stage::Seg,
        Head::Depth => Stage::Depth,
    };
    let mut cfg = train_config(stage, &t.common, t.channels, t.steps)?;
    let bb = load_backbone(&a.staged.checkpoint)?;
    adopt_width(&mut cfg, t.channels, &bb.encoder)?;
    let m = Manifest::load(&t.data)?;
    let backbone = bb.dir.display().to_string();
    let (run, report) = match a.head {
        Head::Denoise => {
            let (train, val) = (training::load_noise_pairs(&m, Split::Train)?, training::load_noise_pairs(&m, Split::Val)?);
            let run = open_run(&t.out)?;
            run.write_config(&cfg)?;
            let (head, mut report) = training::train_denoiser(&cfg, &train, &val, &bb.encoder, &bb.decoder)?;
            save(&run, &mut report, "denoiser", head.to_checkpoint().with(BACKBONE_KEY, &backbone), &cfg)?;
            (run, report)
        }
        Head::Seg => {
            let (train, val) = (training::load_seg(&m, Split::Train)?, training::load_seg(&m, Split::Val)?);
            let run = open_run(&t.out)?;
            run.write_config(&cfg)?;
            let (head, mut report) = training::train_seg(&cfg, &train, &val, &bb.encoder)?;
            save(&run, &mut report, "seg", head.to_checkpoint().with(BACKBONE_KEY, &backbone), &cfg)?;
            (run, report)
        }
        Head::Depth => {
            let (train, val) = (training::load_stereo(&m, Split::Train)?, training::load_stereo(&m, Split::Val)?);
            let run = open_run(&t.out)?;
            run.write_config(&cfg)?;
            let (head, mut report) = training::train_depth(&cfg, &train, &val, &bb.encoder)?;
            save(&run, &mut report, "depth", head.to_checkpoint().with(BACKBONE_KEY, &backbone), &cfg)?;
            (run, report)
        }
    };
    finish_run(&run, &m, Some(&bb.dir), &report)
}

// ------------------------------------------------------------------ inference

pub fn encode(a: EncodeArgs) -> CmdResult {
    Settings::load(&a.common)?.finish()?;
    let file = if a.checkpoint.is_dir() {
        let raw = a.checkpoint.join(ckpt_file(RAW_ENCODER));
        let single_channel = load_image(&a.input)?.channels() == 1;
        if single_channel && raw.is_file() {
            raw
        } else if single_channel {
            return Err(Failure::Prerequisite(format!(
                "no RAW encoder at {}; run `nspace train-raw` first",
                a.checkpoint.display()
            )));
        } else {
            stage1_files(&a.checkpoint)?.0
        }
    } else if a.checkpoint.is_file() {
        a.checkpoint.clone()
    } else {
        return Err(missing_stage1(&a.checkpoint));
    };
    let encoder = EncoderModel::<f32>::from_checkpoint(&load_checkpoint(&file)?)?;
    let z = encode_file(&encoder, &a.input)?;
    save_latent(&z, &a.out)?;
    println!("latent: z_t {} z_b {}", z.z_t.shape(), z.z_b.shape());
    Ok(())
}

pub fn decode(a: DecodeArgs) -> CmdResult {
    Settings::load(&a.common)?.finish()?;
    let file = resolve(&a.checkpoint, DECODER);
    if !file.is_file() {
        return Err(missing_stage1(&a.checkpoint));
    }
    let decoder = DecoderModel::<f32>::from_checkpoint(&load_checkpoint(&file)?)?;
    let z = load_latent::<f32>(&a.input)?;
    save_image(&single(decoder.decode_images(&z)?)?, &a.out)?;
    Ok(())
}

pub fn transform(a: TransformArgs) -> CmdResult {
    let s = Settings::load(&a.common)?;
    let t = AffineTransform::from_params(
        s.get("rotate", a.rotate, 0.0)?,
        s.get("scale", a.scale, 1.0)?,
        s.get("tx", a.tx, 0.0)?,
        s.get("ty", a.ty, 0.0)?,
    )?;
    s.finish()?;
    let z = load_latent::<f32>(&a.input)?;
    let out = if t.is_identity() { z } else { latent_affine(&z, &[t])?.0 };
    save_latent(&out, &a.out)?;
    Ok(())
}

pub fn denoise(a: ImageHeadArgs) -> CmdResult {
    Settings::load(&a.common)?.finish()?;
    let ck = load_head(&a.checkpoint, "denoiser", "denoise")?;
    let head = DenoiserHead::from_checkpoint(&ck)?;
    let bb = head_backbone(&ck, &a.backbone)?;
    let z = head.denoise_latent(&encode_file(&bb.encoder, &a.input)?)?;
    save_image(&single(bb.decoder.decode_images(&z)?)?, &a.out)?;
    Ok(())
}

pub fn segment(a: ImageHeadArgs) -> CmdResult {
    Settings::load(&a.common)?.finish()?;
    let ck = load_head(&a.checkpoint, "seg", "seg")?;
    let head = SegHead::from_checkpoint(&ck)?;
    let bb = head_backbone(&ck, &a.backbone)?;
    let mut maps = head.labels(&encode_file(&bb.encoder, &a.input)?)?;
    let labels = maps.pop().ok_or_else(|| Error::Data("empty segmentation".into()))?;
    let hist = labels.histogram(head.classes);
    save_labels(&labels, &a.out)?;
    println!("class_pixels: {hist:?}");
    Ok(())
}

pub fn depth(a: DepthArgs) -> CmdResult {
    Settings::load(&a.common)?.finish()?;
    let ck = load_head(&a.checkpoint, "depth", "depth")?;
    let head = DepthHead::from_checkpoint(&ck)?;
    let bb = head_backbone(&ck, &a.backbone)?;
    let (l, r) = (encode_file(&bb.encoder, &a.left)?, encode_file(&bb.encoder, &a.right)?);
    let d = head.estimate_disparity(&l, &r)?.learned;
    let shape = d.shape();
    let values: Vec<f32> = d.data().iter().map(|&v| v.max(0.0)).collect();
    let disp = Disparity { height: shape.h, width: shape.w, valid: vec![true; values.len()], values };
    save_disparity(&disp, &a.out)?;
    let mean = disp.values.iter().map(|&v| v as f64).sum::<f64>() / disp.values.len() as f64;
    println!("mean_disparity: {mean:.4}");
    Ok(())
}

// ------------------------------------------------------------------ evaluation

/// Pixel baseline fitted to Gaussian-corrupted copies of `images`.
fn fit_baseline(images: &[Image], channels: usize, steps: usize, seed: u64) -> Result<PixelDenoiser<f32>, Failure> {
    let mut noisy = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, seed.wrapping_add(i as u64))?;
        noisy.push(corrupt(img, &spec)?.to_tensor::<f32>());
    }
    let clean: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    let mut net = PixelDenoiser::new(channels, seed)?;
    net.train(&Tensor::stack(&noisy)?, &Tensor::stack(&clean)?, steps, 8.min(images.len()), Adam::default())?;
    Ok(net)
}

pub fn similarity(a: SimilarityArgs) -> CmdResult {
    let s = Settings::load(&a.common)?;
    let count = s.get("count", a.count, 30)?;
    let steps = s.get("baseline_steps", a.baseline_steps, 300)?;
    let seed = s.seed()?;
    s.finish()?;
    let bb = load_backbone(&a.checkpoint)?;
    let m = Manifest::load(&a.data)?;
    let recs: Vec<_> = m.split(Split::Val).chain(m.split(Split::Train)).take(count).collect();
    let images = recs.iter().map(|r| m.rgb(r)).collect::<nspace::Result<Vec<_>>>()?;
    let baseline = match &a.baseline {
        Some(p) => PixelDenoiser::from_checkpoint(&load_checkpoint(p)?)?,
        None => fit_baseline(&images, bb.encoder.channels, steps, seed)?,
    };
    let (ns, ps) = run_protocol(&images, &bb.encoder, &baseline, seed)?;
    println!("{ns}");
    println!("{ps}");
    let trend = if ns.avg_l1 < ps.avg_l1 { "neural space lower" } else { "neural space not lower" };
    println!("trend (informational): {trend}");
    if let Some(out) = &a.out {
        write_text(out.clone(), &format!("{}{}", ns.to_jsonl(), ps.to_jsonl()))?;
    }
    Ok(())
}

enum AnyModel {
    Encoder(EncoderModel<f32>),
    Decoder(DecoderModel<f32>),
    Denoiser(DenoiserHead<f32>),
    Seg(SegHead<f32>),
    Depth(DepthHead<f32>),
    Pixel(PixelDenoiser<f32>),
}

impl AnyModel {
    fn fresh(kind: ModelKind, channels: usize, classes: usize, d_max: usize, seed: u64) -> nspace::Result<Self> {
        Ok(match kind {
            ModelKind::RgbEncoder => AnyModel::Encoder(EncoderModel::new(3, channels, 2, seed)?),
            ModelKind::RawEncoder => AnyModel::Encoder(EncoderModel::new(1, channels, 2, seed)?),
            ModelKind::Decoder => AnyModel::Decoder(DecoderModel::new(channels, 2, seed)?),
            ModelKind::Denoiser => AnyModel::Denoiser(DenoiserHead::new(channels, seed)?),
            ModelKind::Seg => AnyModel::Seg(SegHead::new(channels, classes, seed)?),
            ModelKind::Depth => AnyModel::Depth(DepthHead::new(channels, d_max, seed)?),
            ModelKind::PixelDenoiser => AnyModel::Pixel(PixelDenoiser::new(channels, seed)?),
        })
    }

    fn load(ck: &Checkpoint<f32>) -> nspace::Result<Self> {
        Ok(match ck.kind {
            ModelKind::RgbEncoder | ModelKind::RawEncoder => AnyModel::Encoder(EncoderModel::from_checkpoint(ck)?),
            ModelKind::Decoder => AnyModel::Decoder(DecoderModel::from_checkpoint(ck)?),
            ModelKind::Denoiser => AnyModel::Denoiser(DenoiserHead::from_checkpoint(ck)?),
            ModelKind::Seg => AnyModel::Seg(SegHead::from_checkpoint(ck)?),
            ModelKind::Depth => AnyModel::Depth(DepthHead::from_checkpoint(ck)?),
            ModelKind::PixelDenoiser => AnyModel::Pixel(PixelDenoiser::from_checkpoint(ck)?),
        })
    }

    fn model(&self) -> &dyn Model<f32> {
        match self {
            AnyModel::Encoder(m) => m,
            AnyModel::Decoder(m) => m,
            AnyModel::Denoiser(m) => m,
            AnyModel::Seg(m) => m,
            AnyModel::Depth(m) => m,
            AnyModel::Pixel(m) => m,
        }
    }

    fn channels(&self) -> usize {
        match self {
            AnyModel::Encoder(m) => m.channels,
            AnyModel::Decoder(m) => m.channels,
            AnyModel::Denoiser(m) => m.channels,
            AnyModel::Seg(m) => m.channels,
            AnyModel::Depth(m) => m.channels,
            AnyModel::Pixel(m) => m.channels,
        }
    }

    /// One forward pass on an `h×w` input.
    fn run(&self, input: &BenchInput) -> nspace::Result<()> {
        match self {
            AnyModel::Encoder(m) if m.in_channels == 1 => m.encode_bayer(&input.bayer).map(drop),
            AnyModel::Encoder(m) => m.encode_image(&input.rgb).map(drop),
            AnyModel::Decoder(m) => m.decode(&input.latent).map(drop),
            AnyModel::Denoiser(m) => m.denoise_latent(&input.latent).map(drop),
            AnyModel::Seg(m) => m.segment(&input.latent).map(drop),
            AnyModel::Depth(m) => m.estimate_disparity(&input.latent, &input.latent).map(drop),
            AnyModel::Pixel(m) => m.denoise(&input.rgb.to_tensor()).map(drop),
        }
    }
}

struct BenchInput {
    rgb: Image,
    bayer: BayerImage,
    latent: Latent<f32>,
}

impl BenchInput {
    fn new(channels: usize, h: usize, w: usize, seed: u64) -> nspace::Result<Self> {
        let rgb = gen_texture_scene(seed, h, w)?;
        let bayer = mosaic(&rgb)?;
        let wave = |n: usize, c: usize, y: usize, x: usize| ((n + 3 * c + 5 * y + 7 * x) as f32 * 0.1).sin();
        let z_t = Tensor::from_fn(Shape::new(1, channels, h / 4, w / 4), wave);
        let z_b = Tensor::from_fn(Shape::new(1, channels, h / 2, w / 2), wave);
        Ok(BenchInput { rgb, bayer, latent: Latent::new(z_t, z_b)? })
    }
}

struct Profiled {
    model: AnyModel,
    report: ProfileReport,
    seed: u64,
}

fn build_profile(a: &ProfileArgs, s: &Settings) -> Result<Profiled, Failure> {
    let model_flag = s.opt::<String>("model", a.model.clone())?;
    let channels = s.get("channels", a.channels, 16)?;
    let height = s.get("height", a.height, 64)?;
    let width = s.get("width", a.width, 64)?;
    let classes = s.get("classes", a.classes, 5)?;
    let d_max = s.get("d_max", a.d_max, 16)?;
    let seed = s.seed()?;
    let model = match (&a.checkpoint, model_flag) {
        (Some(p), _) => AnyModel::load(&load_checkpoint(p)?)?,
        (None, Some(name)) => AnyModel::fresh(name.parse()?, channels, classes, d_max, seed)?,
        (None, None) => return Err(Error::Config("--model or --checkpoint is required".into()).into()),
    };
    let report = count_flops(model.model(), height, width)?;
    Ok(Profiled { model, report, seed })
}

pub fn profile(a: ProfileArgs) -> CmdResult {
    let s = Settings::load(&a.common)?;
    let p = build_profile(&a, &s)?;
    s.finish()?;
    print_profile(&p.report, a.json)
}

fn print_profile(report: &ProfileReport, json: bool) -> CmdResult {
    if json {
        let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
        println!("{text}");
    } else {
        print!("{report}");
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let s = Settings::load(&a.profile.common)?;
    let mut p = build_profile(&a.profile, &s)?;
    let runs = s.get("runs", a.runs, 10)?;
    let warmups = s.get("warmups", a.warmups, 2)?;
    s.finish()?;
    let input = BenchInput::new(p.model.channels(), p.report.height, p.report.width, p.seed)?;
    p.report.timing = Some(time_runs(|| p.model.run(&input), warmups, runs)?);
    print_profile(&p.report, a.profile.json)
}
