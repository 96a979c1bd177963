use super::format::Checkpoint;
use super::nn::{Model, ModelKind, Network, ResBlock};
use super::{Latent, LatentVar};
use crate::error::{Error, Result};
use crate::imaging::{check_divisible, BayerImage, Image};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Image → latent. `in_channels` is 3 for RGB and 1 for a Bayer mosaic.
///
/// stem 3×3 → stride-2 conv → R blocks → `z_b` (1×1);
/// trunk → stride-2 conv → R blocks → `z_t` (1×1).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T> {
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    net: Network<T>,
    stem: usize,
    down_b: usize,
    trunk_b: Vec<ResBlock>,
    head_b: usize,
    down_t: usize,
    trunk_t: Vec<ResBlock>,
    head_t: usize,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(in_channels: usize, channels: usize, blocks: usize, seed: u64) -> Result<Self> {
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::invalid("encoder", format!("{in_channels} input channels; expected 1 (RAW) or 3 (RGB)")));
        }
        if channels == 0 {
            return Err(Error::invalid("encoder", "zero channels"));
        }
        let c = channels;
        let mut net = Network::new(seed);
        let stem = net.add_conv("stem", in_channels, c, 3, 1, 1)?;
        let down_b = net.add_conv("down_b", c, c, 3, 2, 1)?;
        let trunk_b = (0..blocks).map(|i| net.add_resblock(&format!("block_b{i}"), c, 2)).collect::<Result<_>>()?;
        let head_b = net.add_conv("head_b", c, c, 1, 1, 2)?;
        let down_t = net.add_conv("down_t", c, c, 3, 2, 2)?;
        let trunk_t = (0..blocks).map(|i| net.add_resblock(&format!("block_t{i}"), c, 4)).collect::<Result<_>>()?;
        let head_t = net.add_conv("head_t", c, c, 1, 1, 4)?;
        Ok(EncoderModel {
            in_channels,
            channels,
            blocks,
            net: net.finish(),
            stem,
            down_b,
            trunk_b,
            head_b,
            down_t,
            trunk_t,
            head_t,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, bind: &crate::tensor::Binding, x: Var) -> Result<LatentVar> {
        let s = tape.shape(x);
        if s.c != self.in_channels {
            return Err(Error::shape("encode", format!("input has {} channels, encoder expects {}", s.c, self.in_channels)));
        }
        check_divisible(s.h, s.w, 4)?;
        let n = &self.net;
        let mut h = n.conv_relu(tape, bind, self.stem, x)?;
        h = n.conv_relu(tape, bind, self.down_b, h)?;
        for &b in &self.trunk_b {
            h = n.resblock(tape, bind, b, h)?;
        }
        let z_b = n.conv(tape, bind, self.head_b, h)?;
        h = n.conv_relu(tape, bind, self.down_t, h)?;
        for &b in &self.trunk_t {
            h = n.resblock(tape, bind, b, h)?;
        }
        let z_t = n.conv(tape, bind, self.head_t, h)?;
        Ok(LatentVar { z_t, z_b })
    }

    /// Encodes an `N×C×H×W` batch without recording gradients.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Latent<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.forward(&mut tape, &bind, xv)?;
        Ok(z.value(&tape))
    }

    pub fn encode_image(&self, img: &Image) -> Result<Latent<T>> {
        self.encode(&img.to_tensor())
    }

    pub fn encode_bayer(&self, img: &BayerImage) -> Result<Latent<T>> {
        self.encode(&img.to_tensor())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(self.kind(), self.net.params.clone())
            .with("in_channels", self.in_channels)
            .with("channels", self.channels)
            .with("blocks", self.blocks)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.kind != ModelKind::RgbEncoder && ckpt.kind != ModelKind::RawEncoder {
            return Err(Error::Format(format!("checkpoint holds a {} model, expected an encoder", ckpt.kind)));
        }
        let mut m = Self::new(ckpt.require("in_channels")?, ckpt.require("channels")?, ckpt.require("blocks")?, 0)?;
        m.net.params.load_from(&ckpt.params)?;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            in_channels: self.in_channels,
            channels: self.channels,
            blocks: self.blocks,
            net: self.net.cast(),
            stem: self.stem,
            down_b: self.down_b,
            trunk_b: self.trunk_b.clone(),
            head_b: self.head_b,
            down_t: self.down_t,
            trunk_t: self.trunk_t.clone(),
            head_t: self.head_t,
        }
    }
}

impl<T: Scalar> Model<T> for EncoderModel<T> {
    fn kind(&self) -> ModelKind {
        if self.in_channels == 1 {
            ModelKind::RawEncoder
        } else {
            ModelKind::RgbEncoder
        }
    }

    fn network(&self) -> &Network<T> {
        &self.net
    }

    fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }
}

/// Latent → RGB in `[0, 1]`.
///
/// `z_t` is lifted ×2 by pixel shuffle and fused with `z_b`; after a
/// residual trunk a second pixel shuffle restores full resolution. The
/// output is `clamp(0.5 + conv(·), 0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel<T> {
    pub channels: usize,
    pub blocks: usize,
    net: Network<T>,
    lift_t: usize,
    fuse: usize,
    trunk: Vec<ResBlock>,
    up: usize,
    out: usize,
}

impl<T: Scalar> DecoderModel<T> {
    pub fn new(channels: usize, blocks: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("decoder", "zero channels"));
        }
        let c = channels;
        let mut net = Network::new(seed);
        let lift_t = net.add_conv("lift_t", c, 4 * c, 3, 1, 4)?;
        let fuse = net.add_conv("fuse", 2 * c, c, 3, 1, 2)?;
        let trunk = (0..blocks).map(|i| net.add_resblock(&format!("block{i}"), c, 2)).collect::<Result<_>>()?;
        let up = net.add_conv("up", c, 4 * c, 3, 1, 2)?;
        let out = net.add_conv("out", c, 3, 3, 1, 1)?;
        Ok(DecoderModel { channels, blocks, net: net.finish(), lift_t, fuse, trunk, up, out })
    }

    pub fn forward(&self, tape: &mut Tape<T>, bind: &crate::tensor::Binding, z: LatentVar) -> Result<Var> {
        z.check(tape)?;
        let c = tape.shape(z.z_b).c;
        if c != self.channels {
            return Err(Error::shape("decode", format!("latent has {c} channels, decoder expects {}", self.channels)));
        }
        let n = &self.net;
        let t = n.conv(tape, bind, self.lift_t, z.z_t)?;
        let t = tape.pixel_shuffle(t, 2)?;
        let h = tape.concat(&[z.z_b, t])?;
        let mut h = n.conv_relu(tape, bind, self.fuse, h)?;
        for &b in &self.trunk {
            h = n.resblock(tape, bind, b, h)?;
        }
        let h = n.conv(tape, bind, self.up, h)?;
        let h = tape.pixel_shuffle(h, 2)?;
        let h = tape.relu(h);
        let y = n.conv(tape, bind, self.out, h)?;
        let y = tape.offset(y, T::c(0.5));
        Ok(tape.clamp(y, T::zero(), T::one()))
    }

    pub fn decode(&self, z: &Latent<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let zv = z.record(&mut tape);
        let y = self.forward(&mut tape, &bind, zv)?;
        Ok(tape.value(y).clone())
    }

    /// Decodes every sample of the latent to an image.
    pub fn decode_images(&self, z: &Latent<T>) -> Result<Vec<Image>> {
        let y = self.decode(z)?;
        (0..y.shape().n).map(|i| Image::from_tensor(&y, i)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(ModelKind::Decoder, self.net.params.clone()).with("channels", self.channels).with("blocks", self.blocks)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Decoder)?;
        let mut m = Self::new(ckpt.require("channels")?, ckpt.require("blocks")?, 0)?;
        m.net.params.load_from(&ckpt.params)?;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> DecoderModel<U> {
        DecoderModel {
            channels: self.channels,
            blocks: self.blocks,
            net: self.net.cast(),
            lift_t: self.lift_t,
            fuse: self.fuse,
            trunk: self.trunk.clone(),
            up: self.up,
            out: self.out,
        }
    }
}

impl<T: Scalar> Model<T> for DecoderModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Decoder
    }

    fn network(&self) -> &Network<T> {
        &self.net
    }

    fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn shape_law_for_both_variants() {
        let rgb = EncoderModel::<f32>::new(3, 16, 2, 1).unwrap();
        let raw = EncoderModel::<f32>::new(1, 16, 2, 1).unwrap();
        let z = rgb.encode(&Tensor::full(Shape::new(1, 3, 64, 64), 0.5)).unwrap();
        assert_eq!(z.z_b.shape(), Shape::new(1, 16, 32, 32));
        assert_eq!(z.z_t.shape(), Shape::new(1, 16, 16, 16));
        let zr = raw.encode(&Tensor::full(Shape::new(1, 1, 64, 64), 0.5)).unwrap();
        assert_eq!((zr.z_b.shape(), zr.z_t.shape()), (z.z_b.shape(), z.z_t.shape()));
    }

    #[test]
    fn wrong_inputs_rejected() {
        let e = EncoderModel::<f32>::new(3, 8, 1, 1).unwrap();
        let err = e.encode(&Tensor::zeros(Shape::new(1, 3, 30, 32))).unwrap_err().to_string();
        assert!(err.contains("pad to 32x32"), "{err}");
        assert!(e.encode(&Tensor::zeros(Shape::new(1, 1, 32, 32))).is_err());
        assert!(EncoderModel::<f32>::new(2, 8, 1, 1).is_err());
    }

    #[test]
    fn decode_restores_input_shape_in_range() {
        let e = EncoderModel::<f32>::new(3, 8, 1, 3).unwrap();
        let d = DecoderModel::<f32>::new(8, 1, 4).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 3, 32, 48), |n, c, y, x| ((n + c + y * x) % 9) as f32 / 9.0);
        let y = d.decode(&e.encode(&x).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let zero = Latent::new(Tensor::zeros(Shape::new(1, 8, 4, 4)), Tensor::zeros(Shape::new(1, 8, 8, 8))).unwrap();
        let img = d.decode(&zero).unwrap();
        assert!(img.is_finite() && img.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let bad = Latent { z_t: Tensor::zeros(Shape::new(1, 8, 4, 4)), z_b: Tensor::zeros(Shape::new(1, 8, 4, 4)) };
        assert!(d.decode(&bad).is_err());
    }

    #[test]
    fn encoding_is_bit_deterministic() {
        let e = EncoderModel::<f32>::new(3, 8, 2, 9).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 11.0);
        assert_eq!(e.encode(&x).unwrap(), e.encode(&x).unwrap());
        assert_eq!(EncoderModel::<f32>::new(3, 8, 2, 9).unwrap(), e);
    }

    #[test]
    fn checkpoints_rebuild_models() {
        let e = EncoderModel::<f32>::new(1, 8, 2, 5).unwrap();
        assert_eq!(EncoderModel::from_checkpoint(&e.to_checkpoint()).unwrap(), e);
        let d = DecoderModel::<f32>::new(8, 1, 6).unwrap();
        assert_eq!(DecoderModel::from_checkpoint(&d.to_checkpoint()).unwrap(), d);
        assert!(DecoderModel::from_checkpoint(&e.to_checkpoint()).is_err());
    }
}
