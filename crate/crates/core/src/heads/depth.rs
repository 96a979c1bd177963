use super::expect_channels;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{Checkpoint, Latent, LatentVar, Layer, Model, ModelKind, Network};
use crate::tensor::{Binding, Tape, Tensor, Var};

/// Strides of `{p2, p3, p4, c5}` relative to the source image.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Keeps the unit-normalization of all-zero features finite.
const FEATURE_EPS: f64 = 1e-6;

/// Channels fed to the final ×4 pixel shuffle.
const REFINE_CHANNELS: usize = 16;

/// Stereo disparity from a pair of latents.
///
/// Each view builds a pyramid `{p2, p3, p4, c5}` from `(z_b, z_t)` with
/// stride-2 blocks and top-down fusion. Stride-4 features are
/// unit-normalized per pixel; their correlation over shifts `0..=d_max/4`
/// feeds a small regressor whose softmax over shifts gives a soft-argmin
/// disparity. Two full-resolution versions are
/// produced: bilinear (`U_bilinear`) and bilinear plus a learned
/// pixel-shuffle residual, rectified (`U_learned`).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHead<T> {
    pub channels: usize,
    pub d_max: usize,
    net: Network<T>,
    down: usize,
    merge: usize,
    c3: usize,
    c4: usize,
    c5: usize,
    lat2: usize,
    lat3: usize,
    lat4: usize,
    smooth: usize,
    corr_proj: usize,
    reg1: usize,
    reg2: usize,
    refine: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DisparityVars {
    /// Stride-4 disparity in full-resolution pixels.
    pub low: Var,
    pub learned: Var,
    pub bilinear: Var,
    pub correlation: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityOutput<T> {
    pub low: Tensor<T>,
    pub learned: Tensor<T>,
    pub bilinear: Tensor<T>,
    pub correlation: Tensor<T>,
}

impl<T: Scalar> DepthHead<T> {
    pub fn new(channels: usize, d_max: usize, seed: u64) -> Result<Self> {
        if d_max == 0 || d_max % 4 != 0 {
            return Err(Error::invalid("depth_head", format!("d_max {d_max} must be a positive multiple of 4")));
        }
        let c = channels;
        let shifts = d_max / 4 + 1;
        let mut net = Network::new(seed);
        let down = net.add_conv("down", c, c, 3, 2, 2)?;
        let merge = net.add_conv("merge", 2 * c, c, 1, 1, 4)?;
        let c3 = net.add_conv("c3", c, c, 3, 2, 4)?;
        let c4 = net.add_conv("c4", c, c, 3, 2, 8)?;
        let c5 = net.add_conv("c5", c, c, 3, 2, 16)?;
        let lat4 = net.add_conv("lat4", c, c, 1, 1, 16)?;
        let lat3 = net.add_conv("lat3", c, c, 1, 1, 8)?;
        let lat2 = net.add_conv("lat2", c, c, 1, 1, 4)?;
        let smooth = net.add_conv("smooth", c, c, 3, 1, 4)?;
        let corr_proj = net.add_conv("corr_proj", shifts, shifts, 1, 1, 4)?;
        let reg1 = net.add_conv("reg1", shifts + c, c, 3, 1, 4)?;
        let reg2 = net.add_conv("reg2", c, shifts, 3, 1, 4)?;
        let refine = net.add_conv("refine", c + 1, REFINE_CHANNELS, 3, 1, 4)?;
        Ok(DepthHead {
            channels,
            d_max,
            net: net.finish(),
            down,
            merge,
            c3,
            c4,
            c5,
            lat2,
            lat3,
            lat4,
            smooth,
            corr_proj,
            reg1,
            reg2,
            refine,
        })
    }

    pub fn shifts(&self) -> usize {
        self.d_max / 4 + 1
    }

    /// `[p2, p3, p4, c5]` of one view.
    pub fn pyramid(&self, tape: &mut Tape<T>, bind: &Binding, z: LatentVar) -> Result<[Var; 4]> {
        z.check(tape)?;
        let sb = tape.shape(z.z_b);
        expect_channels("depth", sb.c, self.channels)?;
        if sb.h % 16 != 0 || sb.w % 16 != 0 {
            return Err(Error::Indivisible {
                h: sb.h * 2,
                w: sb.w * 2,
                multiple: 32,
                need_h: (sb.h * 2).div_ceil(32) * 32,
                need_w: (sb.w * 2).div_ceil(32) * 32,
            });
        }
        let n = &self.net;
        let a = n.conv_relu(tape, bind, self.down, z.z_b)?;
        let m = tape.concat(&[a, z.z_t])?;
        let c2 = n.conv_relu(tape, bind, self.merge, m)?;
        let c3 = n.conv_relu(tape, bind, self.c3, c2)?;
        let c4 = n.conv_relu(tape, bind, self.c4, c3)?;
        let c5 = n.conv_relu(tape, bind, self.c5, c4)?;
        let fuse = |tape: &mut Tape<T>, lat: usize, fine: Var, coarse: Var| -> Result<Var> {
            let s = tape.shape(fine);
            let l = n.conv(tape, bind, lat, fine)?;
            let up = tape.resize(coarse, s.h, s.w)?;
            tape.add(l, up)
        };
        let p4 = fuse(tape, self.lat4, c4, c5)?;
        let p3 = fuse(tape, self.lat3, c3, p4)?;
        let p2 = fuse(tape, self.lat2, c2, p3)?;
        Ok([p2, p3, p4, c5])
    }

    fn features(&self, tape: &mut Tape<T>, bind: &Binding, z: LatentVar) -> Result<Var> {
        let [p2, ..] = self.pyramid(tape, bind, z)?;
        let f = self.net.conv(tape, bind, self.smooth, p2)?;
        Ok(tape.normalize_channels(f, T::c(FEATURE_EPS)))
    }

    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, left: LatentVar, right: LatentVar) -> Result<DisparityVars> {
        if tape.shape(left.z_b) != tape.shape(right.z_b) || tape.shape(left.z_t) != tape.shape(right.z_t) {
            return Err(Error::shape("depth", "left and right latents differ in shape"));
        }
        let fl = self.features(tape, bind, left)?;
        let fr = self.features(tape, bind, right)?;
        let n = &self.net;
        let corr = tape.correlation(fl, fr, self.d_max / 4)?;
        let direct = n.conv(tape, bind, self.corr_proj, corr)?;
        let h = tape.concat(&[corr, fl])?;
        let h = n.conv_relu(tape, bind, self.reg1, h)?;
        let h = n.conv(tape, bind, self.reg2, h)?;
        let logits = tape.add(direct, h)?;
        let prob = tape.softmax_channels(logits);
        let values: Vec<T> = (0..self.shifts()).map(|k| T::c(4.0 * k as f64)).collect();
        let low = tape.channel_weighted_sum(prob, &values)?;

        let s = tape.shape(low);
        let (h_full, w_full) = (s.h * 4, s.w * 4);
        let bilinear = tape.resize(low, h_full, w_full)?;
        let norm = tape.scale(low, T::c(1.0 / self.d_max as f64));
        let r = tape.concat(&[fl, norm])?;
        let r = n.conv(tape, bind, self.refine, r)?;
        let r = tape.pixel_shuffle(r, 4)?;
        let learned = tape.add(bilinear, r)?;
        let learned = tape.relu(learned);
        Ok(DisparityVars { low, learned, bilinear, correlation: corr })
    }

    pub fn estimate_disparity(&self, left: &Latent<T>, right: &Latent<T>) -> Result<DisparityOutput<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let l = left.record(&mut tape);
        let r = right.record(&mut tape);
        let v = self.forward(&mut tape, &bind, l, r)?;
        Ok(DisparityOutput {
            low: tape.value(v.low).clone(),
            learned: tape.value(v.learned).clone(),
            bilinear: tape.value(v.bilinear).clone(),
            correlation: tape.value(v.correlation).clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(ModelKind::Depth, self.net.params.clone()).with("channels", self.channels).with("d_max", self.d_max)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Depth)?;
        let mut m = Self::new(ckpt.require("channels")?, ckpt.require("d_max")?, 0)?;
        m.net.params.load_from(&ckpt.params)?;
        Ok(m)
    }
}

impl<T: Scalar> Model<T> for DepthHead<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Depth
    }

    fn network(&self) -> &Network<T> {
        &self.net
    }

    fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers = self.net.layers();
        let at = layers.iter().position(|l| matches!(l, Layer::Conv(s) if s.name == "corr_proj")).expect("corr_proj");
        layers.insert(at, Layer::Correlation { name: "correlation".into(), channels: self.channels, shifts: self.shifts(), div: 4 });
        layers
    }
}
