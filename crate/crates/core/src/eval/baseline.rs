use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{Checkpoint, Model, ModelKind, Network, ResBlock};
use crate::tensor::{adam_step, Adam, Binding, OptimizerState, Tape, Tensor, Var};

pub const PIXEL_BLOCKS: usize = 2;

/// Full-resolution residual denoiser used as the pixel-space reference.
///
/// stem 3→C, two residual blocks, out C→3, output `x + out`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelDenoiser<T> {
    pub channels: usize,
    net: Network<T>,
    stem: usize,
    blocks: Vec<ResBlock>,
    out: usize,
}

impl<T: Scalar> PixelDenoiser<T> {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("pixel_denoiser", "zero channels"));
        }
        let mut net = Network::new(seed);
        let stem = net.add_conv("stem", 3, channels, 3, 1, 1)?;
        let blocks = (0..PIXEL_BLOCKS).map(|i| net.add_resblock(&format!("block{i}"), channels, 1)).collect::<Result<_>>()?;
        let out = net.add_conv("out", channels, 3, 3, 1, 1)?;
        Ok(PixelDenoiser { channels, net: net.finish(), stem, blocks, out })
    }

    /// Returns `(output, penultimate features)`.
    pub fn forward(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<(Var, Var)> {
        let c = tape.shape(x).c;
        if c != 3 {
            return Err(Error::shape("pixel_denoiser", format!("{c} input channels; expected 3")));
        }
        let mut h = self.net.conv_relu(tape, bind, self.stem, x)?;
        for &b in &self.blocks {
            h = self.net.resblock(tape, bind, b, h)?;
        }
        let r = self.net.conv(tape, bind, self.out, h)?;
        Ok((tape.add(x, r)?, h))
    }

    pub fn denoise(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, _) = self.forward(&mut tape, &bind, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Features feeding the output convolution, `N×C×H×W`.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.net.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, h) = self.forward(&mut tape, &bind, xv)?;
        Ok(tape.value(h).clone())
    }

    /// L2 training on `(noisy, clean)` pairs; batches cycle through the set in order.
    /// Returns the loss of every step.
    pub fn train(&mut self, noisy: &Tensor<T>, clean: &Tensor<T>, steps: usize, batch: usize, hyper: Adam) -> Result<Vec<f64>> {
        if noisy.shape() != clean.shape() {
            return Err(Error::shape("pixel_denoiser", format!("noisy {} vs clean {}", noisy.shape(), clean.shape())));
        }
        let n = noisy.shape().n;
        if n == 0 || batch == 0 {
            return Err(Error::invalid("pixel_denoiser", "empty training set or batch"));
        }
        let mut state = OptimizerState::new(&self.net.params, hyper);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|k| (step * batch + k) % n).collect();
            let xb = Tensor::stack(&idx.iter().map(|&i| noisy.sample(i)).collect::<Vec<_>>())?;
            let yb = Tensor::stack(&idx.iter().map(|&i| clean.sample(i)).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let bind = self.net.params.bind(&mut tape);
            let x = tape.constant(xb);
            let y = tape.constant(yb);
            let (out, _) = self.forward(&mut tape, &bind, x)?;
            let loss = tape.l2_loss(out, y)?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            losses.push(value);
            let mut grads = tape.backward(loss)?;
            let g = bind.collect(&mut grads);
            adam_step(&mut self.net.params, &g, &mut state)?;
        }
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(ModelKind::PixelDenoiser, self.net.params.clone()).with("channels", self.channels)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.expect_kind(ModelKind::PixelDenoiser)?;
        let mut m = Self::new(ckpt.require("channels")?, 0)?;
        m.net.params.load_from(&ckpt.params)?;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> PixelDenoiser<U> {
        PixelDenoiser { channels: self.channels, net: self.net.cast(), stem: self.stem, blocks: self.blocks.clone(), out: self.out }
    }
}

impl<T: Scalar> Model<T> for PixelDenoiser<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::PixelDenoiser
    }

    fn network(&self) -> &Network<T> {
        &self.net
    }

    fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }
}
