//! Task heads that read latents instead of pixels.

mod depth;

pub use depth::{DepthHead, DisparityOutput, DisparityVars, PYRAMID_STRIDES};

use crate::error::{Error, Result};
use crate::imaging::LabelMap;
use crate::scalar::Scalar;
use crate::space::{Checkpoint, Latent, LatentVar, Model, ModelKind, Network, ResBlock};
use crate::tensor::{Binding, Tape, Tensor, Var};

pub const DENOISER_BLOCKS: usize = 6;

fn expect_channels(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("latent has {got} channels, head expects {want}")));
    }
    Ok(())
}

/// Six residual blocks applied to `z_b`; `z_t` passes through untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserHead<T> {
    pub channels: usize,
    net: Network<T>,
    blocks: Vec<ResBlock>,
}

impl<T: Scalar> DenoiserHead<T> {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        let mut net = Network::new(seed);
        let blocks = (0..DENOISER_BLOCKS).map(|i| net.add_resblock(&format!("block{i}"), channels, 2)).collect::<Result<_>>()?;
        Ok(DenoiserHead { channels, net: net.finish(), blocks })
    }

    /// `12·(9C² + C)` parameters.
    pub fn expected_params(channels: usize) -> usize {
        2 * DENOISER_BLOCKS * (9 * channels * channels + channels)
    }

    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, z: LatentVar) -> Result<LatentVar> {
        z.check(tape)?;
        expect_channels("denoise", tape.shape(z.z_b).c, self.channels)?;
        let mut h = z.z_b;
        for &b in &self.blocks {
            h = self.net.resblock(tape, bind, b, h)?;
        }
        Ok(LatentVar { z_t: z.z_t, z_b: h })
    }

    pub fn denoise_latent(&self, z: &Latent<T>) -> Result<Latent<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let zb = tape.constant(z.z_b.clone());
        let zt = tape.constant(Tensor::zeros(z.z_t.shape()));
        let out = self.forward(&mut tape, &bind, LatentVar { z_t: zt, z_b: zb })?;
        Ok(Latent { z_t: z.z_t.clone(), z_b: tape.value(out.z_b).clone() })
    }

    /// Makes every block an identity map.
    pub fn zero_residuals(&mut self) {
        for &b in &self.blocks {
            self.net.zero_branch(b);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(ModelKind::Denoiser, self.net.params.clone()).with("channels", self.channels)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Denoiser)?;
        let mut m = Self::new(ckpt.require("channels")?, 0)?;
        m.net.params.load_from(&ckpt.params)?;
        Ok(m)
    }
}

impl<T: Scalar> Model<T> for DenoiserHead<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Denoiser
    }

    fn network(&self) -> &Network<T> {
        &self.net
    }

    fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }
}

pub const SEG_BLOCKS: usize = 2;

/// `z_b` fused with bilinearly upsampled `z_t`, two residual blocks, a ×2
/// pixel-shuffle upsample and a 1×1 classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead<T> {
    pub channels: usize,
    pub classes: usize,
    net: Network<T>,
    fuse: usize,
    blocks: Vec<ResBlock>,
    up: usize,
    classify: usize,
}

impl<T: Scalar> SegHead<T> {
    pub fn new(channels: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("seg_head", format!("{classes} classes; need at least 2")));
        }
        let c = channels;
        let mut net = Network::new(seed);
        let fuse = net.add_conv("fuse", 2 * c, c, 3, 1, 2)?;
        let blocks = (0..SEG_BLOCKS).map(|i| net.add_resblock(&format!("block{i}"), c, 2)).collect::<Result<_>>()?;
        let up = net.add_conv("up", c, 4 * c, 3, 1, 2)?;
        let classify = net.add_conv("classify", c, classes, 1, 1, 1)?;
        Ok(SegHead { channels, classes, net: net.finish(), fuse, blocks, up, classify })
    }

    /// Logits `N×K×H×W`.
    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, z: LatentVar) -> Result<Var> {
        z.check(tape)?;
        let sb = tape.shape(z.z_b);
        expect_channels("segment", sb.c, self.channels)?;
        let t = tape.resize(z.z_t, sb.h, sb.w)?;
        let h = tape.concat(&[z.z_b, t])?;
        let mut h = self.net.conv_relu(tape, bind, self.fuse, h)?;
        for &b in &self.blocks {
            h = self.net.resblock(tape, bind, b, h)?;
        }
        let h = self.net.conv(tape, bind, self.up, h)?;
        let h = tape.pixel_shuffle(h, 2)?;
        let h = tape.relu(h);
        self.net.conv(tape, bind, self.classify, h)
    }

    pub fn segment(&self, z: &Latent<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let zv = z.record(&mut tape);
        let y = self.forward(&mut tape, &bind, zv)?;
        Ok(tape.value(y).clone())
    }

    pub fn labels(&self, z: &Latent<T>) -> Result<Vec<LabelMap>> {
        Ok(argmax_labels(&self.segment(z)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(ModelKind::Seg, self.net.params.clone()).with("channels", self.channels).with("classes", self.classes)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Seg)?;
        let mut m = Self::new(ckpt.require("channels")?, ckpt.require("classes")?, 0)?;
        m.net.params.load_from(&ckpt.params)?;
        Ok(m)
    }
}

impl<T: Scalar> Model<T> for SegHead<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Seg
    }

    fn network(&self) -> &Network<T> {
        &self.net
    }

    fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }
}

/// Per-pixel argmax over channels; ties go to the lower class.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let mut labels = Vec::with_capacity(s.h * s.w);
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut best = 0;
                    for k in 1..s.c {
                        if logits.at(n, k, y, x) > logits.at(n, best, y, x) {
                            best = k;
                        }
                    }
                    labels.push(best as u8);
                }
            }
            LabelMap { height: s.h, width: s.w, labels }
        })
        .collect()
}
