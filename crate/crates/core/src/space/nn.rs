//! Convolution layer bookkeeping shared by every model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Binding, ParameterSet, Shape, Tape, Tensor, Var};

/// One square convolution with "same" padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    /// Input resolution as a divisor of the model's reference resolution.
    pub div: usize,
    weight: usize,
    bias_index: Option<usize>,
}

impl ConvSpec {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias { self.cout } else { 0 }
    }

    /// Output size for a reference resolution of `h×w`.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ih, iw) = (h / self.div, w / self.div);
        ((ih + 2 * self.pad() - self.k) / self.stride + 1, (iw + 2 * self.pad() - self.k) / self.stride + 1)
    }

    /// Multiply-accumulates count 2 FLOPs; the bias adds one per output.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_dims(h, w);
        let out = (oh * ow * self.cout) as u64;
        2 * (self.k * self.k * self.cin) as u64 * out + if self.bias { out } else { 0 }
    }
}

/// Enumerated computation of a model, used by the profiler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvSpec),
    /// Channel-mean correlation over `shifts` horizontal offsets.
    Correlation { name: String, channels: usize, shifts: usize, div: usize },
    /// Anything the profiler has no cost model for.
    Opaque { name: String },
}

/// Parameters plus the convolutions that own them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub params: ParameterSet<T>,
    convs: Vec<ConvSpec>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Network<T> {
    /// Empty network whose initial weights are drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        Network { params: ParameterSet::new(), convs: Vec::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    /// Kaiming-uniform fan-in weights, zero bias. Returns the conv's index.
    #[allow(clippy::too_many_arguments)]
    pub fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, div: usize) -> Result<usize> {
        if k % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(Error::invalid("network", format!("{name}: kernel {k} stride {stride}")));
        }
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = self.rng.as_mut().expect("network still under construction");
        let shape = Shape::new(cout, cin, k, k);
        let w = Tensor::from_fn(shape, |_, _, _, _| T::c(rng.random_range(-bound..bound)));
        let weight = self.params.push(format!("{name}.w"), w, true)?;
        let bias_index = Some(self.params.push(format!("{name}.b"), Tensor::zeros(Shape::new(1, cout, 1, 1)), true)?);
        self.convs.push(ConvSpec { name: name.to_string(), cin, cout, k, stride, bias: true, div, weight, bias_index });
        Ok(self.convs.len() - 1)
    }

    pub fn convs(&self) -> &[ConvSpec] {
        &self.convs
    }

    pub fn conv_spec(&self, i: usize) -> &ConvSpec {
        &self.convs[i]
    }

    pub fn conv(&self, tape: &mut Tape<T>, bind: &Binding, i: usize, x: Var) -> Result<Var> {
        let s = &self.convs[i];
        tape.conv2d(x, bind.var(s.weight), s.bias_index.map(|b| bind.var(b)), s.stride, s.pad())
    }

    pub fn conv_relu(&self, tape: &mut Tape<T>, bind: &Binding, i: usize, x: Var) -> Result<Var> {
        let y = self.conv(tape, bind, i, x)?;
        Ok(tape.relu(y))
    }

    /// Residual block `x + c2(relu(c1(x)))`.
    pub fn add_resblock(&mut self, name: &str, c: usize, div: usize) -> Result<ResBlock> {
        Ok(ResBlock(self.add_conv(&format!("{name}.c1"), c, c, 3, 1, div)?, self.add_conv(&format!("{name}.c2"), c, c, 3, 1, div)?))
    }

    pub fn resblock(&self, tape: &mut Tape<T>, bind: &Binding, b: ResBlock, x: Var) -> Result<Var> {
        let h = self.conv_relu(tape, bind, b.0, x)?;
        let h = self.conv(tape, bind, b.1, h)?;
        tape.add(x, h)
    }

    /// Zeroes the second convolution of a block so it passes its input through.
    pub fn zero_branch(&mut self, b: ResBlock) {
        let s = &self.convs[b.1];
        let idx = [Some(s.weight), s.bias_index];
        for i in idx.into_iter().flatten() {
            let p = self.params.iter_mut().nth(i).expect("index in range");
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Ends construction; the initialization stream is dropped.
    pub fn finish(mut self) -> Self {
        self.rng = None;
        self
    }

    pub fn layers(&self) -> Vec<Layer> {
        self.convs.iter().cloned().map(Layer::Conv).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { params: self.params.cast(), convs: self.convs.clone(), rng: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResBlock(pub usize, pub usize);

/// Which architecture a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    RgbEncoder,
    RawEncoder,
    Decoder,
    Denoiser,
    Seg,
    Depth,
    PixelDenoiser,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::RgbEncoder,
        ModelKind::RawEncoder,
        ModelKind::Decoder,
        ModelKind::Denoiser,
        ModelKind::Seg,
        ModelKind::Depth,
        ModelKind::PixelDenoiser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::RgbEncoder => "rgb_encoder",
            ModelKind::RawEncoder => "raw_encoder",
            ModelKind::Decoder => "decoder",
            ModelKind::Denoiser => "denoiser",
            ModelKind::Seg => "seg",
            ModelKind::Depth => "depth",
            ModelKind::PixelDenoiser => "pixel_denoiser",
        }
    }

    pub fn tag(self) -> u8 {
        ModelKind::ALL.iter().position(|&k| k == self).expect("listed") as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        ModelKind::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Anything built from a [`Network`].
pub trait Model<T: Scalar> {
    fn kind(&self) -> ModelKind;
    fn network(&self) -> &Network<T>;
    fn network_mut(&mut self) -> &mut Network<T>;

    /// Layers in execution order. Defaults to the convolutions alone.
    fn layers(&self) -> Vec<Layer> {
        self.network().layers()
    }

    fn params(&self) -> &ParameterSet<T> {
        &self.network().params
    }

    fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.network_mut().params
    }
}
