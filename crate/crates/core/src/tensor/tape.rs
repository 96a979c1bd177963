//! Linear recording tape for reverse-mode differentiation.
//!
//! Forward operations evaluate eagerly and append a node. `backward`
//! consumes the tape, so gradients can never be accumulated twice by
//! accident; accumulation across tapes is explicit via
//! [`Gradients::accumulate_into`].

use super::kernels::{self, ConvGeom, SamplePlan};
use super::{Shape, Tensor};
use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Out-of-bounds handling for [`Tape::affine_warp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    Border,
}

#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sum(Var),
    MaskedMean { x: Var, mask: Tensor<T>, total: T },
    Warp { x: Var, plans: Vec<SamplePlan<T>> },
    Resize { x: Var, plan: SamplePlan<T> },
    PixelShuffle { x: Var, r: usize },
    Concat(Vec<Var>),
    AvgPool2(Var),
    Gauss { x: Var, kernel: Vec<T> },
    SmoothL1 { pred: Var, target: Var, mask: Tensor<T>, count: T },
    CrossEntropy { logits: Var, grad: Vec<T> },
    Correlation { l: Var, r: Var, max_shift: usize },
    SoftmaxChannels(Var),
    NormalizeChannels { x: Var, norms: Vec<T> },
    ChannelWeightedSum { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

/// Masks broadcast over channels: either `N×1×H×W` or the full shape.
fn check_mask(op: &'static str, x: Shape, m: Shape) -> Result<()> {
    if m == x || (m.c == 1 && m.n == x.n && m.h == x.h && m.w == x.w) {
        Ok(())
    } else {
        Err(Error::shape(op, format!("mask {m} does not broadcast to {x}")))
    }
}

#[inline]
fn mask_at<T: Scalar>(mask: &Tensor<T>, x: Shape, i: usize) -> T {
    let m = mask.shape();
    if m.c == x.c {
        mask.data()[i]
    } else {
        let plane = x.plane();
        let n = i / x.sample_len();
        mask.data()[n * plane + i % plane]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value; gradients are collected for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ------------------------------------------------------------ convolution

    /// 2-D cross-correlation with an odd square kernel `Cout×Cin×K×K`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != kernel input channels {}", xs.c, ws.c),
            ));
        }
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be odd and square, got {}x{}", ws.h, ws.w)));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("conv2d", format!("stride {stride} not in {{1, 2}}")));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::shape("conv2d", format!("bias length {} != output channels {}", bs.numel(), ws.n)));
            }
        }
        let (ho, wo) = kernels::direct_conv_shape(xs.h, xs.w, ws.h, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("height/width {}x{} smaller than kernel {}", xs.h, xs.w, ws.h))
        })?;
        let g = ConvGeom { cin: xs.c, cout: ws.n, k: ws.h, stride, pad, h: xs.h, w: xs.w, ho, wo };
        let out = kernels::conv2d_forward(
            &g,
            xs.n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(Shape::new(xs.n, ws.n, ho, wo), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    // ------------------------------------------------------------ elementwise

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Hard clip to `[lo, hi]`; the gradient is zero where the clip is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn offset(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::Offset(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// `Σ mask·x / Σ mask`, with the mask broadcast over channels.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xs = self.shape(x);
        check_mask("masked_mean", xs, mask.shape())?;
        let per_mask = if mask.shape().c == xs.c { T::one() } else { T::c(xs.c as f64) };
        let total = mask.sum() * per_mask;
        if total <= T::zero() {
            return Err(Error::invalid("masked_mean", "mask selects no elements"));
        }
        let xv = self.value(x);
        let mut acc = T::zero();
        for (i, &v) in xv.data().iter().enumerate() {
            acc += v * mask_at(mask, xs, i);
        }
        let value = Tensor::scalar(acc / total);
        Ok(self.push(value, Op::MaskedMean { x, mask: mask.clone(), total }, &[x]))
    }

    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }

    pub fn masked_l1(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        self.masked_mean(d, mask)
    }

    pub fn masked_l2(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        self.masked_mean(d, mask)
    }

    /// Mean smooth-L1 (β = 1) over elements where `mask` is 1.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, mask: &Tensor<T>) -> Result<Var> {
        let ps = self.shape(pred);
        same_shape("smooth_l1", ps, self.shape(target))?;
        check_mask("smooth_l1", ps, mask.shape())?;
        let per_mask = if mask.shape().c == ps.c { T::one() } else { T::c(ps.c as f64) };
        let count = mask.sum() * per_mask;
        if count <= T::zero() {
            return Err(Error::invalid("smooth_l1", "no valid pixels in mask"));
        }
        let half = T::c(0.5);
        let mut acc = T::zero();
        for (i, (&p, &t)) in self.value(pred).data().iter().zip(self.value(target).data()).enumerate() {
            let m = mask_at(mask, ps, i);
            if m == T::zero() {
                continue;
            }
            let d = (p - t).abs();
            acc += m * if d < T::one() { half * d * d } else { d - half };
        }
        let value = Tensor::scalar(acc / count);
        Ok(self.push(value, Op::SmoothL1 { pred, target, mask: mask.clone(), count }, &[pred, target]))
    }

    /// Mean pixel-wise cross-entropy; `labels` has one entry per `n, y, x`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: u32) -> Result<Var> {
        let s = self.shape(logits);
        if labels.len() != s.n * s.plane() {
            return Err(Error::shape("cross_entropy", format!("{} labels for logits {s}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= s.c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} outside [0, {})", s.c)));
        }
        let (loss, grad) = kernels::cross_entropy(self.value(logits).data(), s, labels, ignore)
            .ok_or_else(|| Error::invalid("cross_entropy", "every pixel carries the ignore label"))?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }, &[logits]))
    }

    // ------------------------------------------------------------ resampling

    /// Bilinear warp of every sample; `transforms` holds one transform shared
    /// by the batch or one per sample. Returns the warped tensor and an
    /// `N×1×H×W` mask that is 1 where every contributing source tap is inside
    /// the image.
    pub fn affine_warp(&mut self, x: Var, transforms: &[AffineTransform], pad: PadMode) -> Result<(Var, Tensor<T>)> {
        let s = self.shape(x);
        if transforms.len() != 1 && transforms.len() != s.n {
            return Err(Error::shape("affine_warp", format!("{} transforms for batch of {}", transforms.len(), s.n)));
        }
        let mut plans = Vec::with_capacity(transforms.len());
        for t in transforms {
            AffineTransform::new(t.matrix())?;
            plans.push(kernels::affine_plan::<T>(t, s.h, s.w, pad == PadMode::Border));
        }
        let plane = s.plane();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s.numel()];
        let mut mask = vec![T::zero(); s.n * plane];
        for n in 0..s.n {
            let plan = &plans[if plans.len() == 1 { 0 } else { n }];
            for c in 0..s.c {
                let off = (n * s.c + c) * plane;
                kernels::apply_plan(plan, &src[off..off + plane], &mut out[off..off + plane]);
            }
            for (m, &ok) in mask[n * plane..(n + 1) * plane].iter_mut().zip(&plan.valid) {
                *m = if ok { T::one() } else { T::zero() };
            }
        }
        let value = Tensor::new(s, out)?;
        let mask = Tensor::new(Shape::new(s.n, 1, s.h, s.w), mask)?;
        Ok((self.push(value, Op::Warp { x, plans }, &[x]), mask))
    }

    /// Align-corners-false bilinear resize.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape("resize", format!("cannot resize {s} to {h}x{w}")));
        }
        let plan = kernels::resize_plan::<T>(s.h, s.w, h, w);
        let (pi, po) = (s.plane(), h * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s.n * s.c * po];
        for p in 0..s.n * s.c {
            kernels::apply_plan(&plan, &src[p * pi..(p + 1) * pi], &mut out[p * po..(p + 1) * po]);
        }
        let value = Tensor::new(Shape::new(s.n, s.c, h, w), out)?;
        Ok(self.push(value, Op::Resize { x, plan }, &[x]))
    }

    /// `(C·r², H, W) → (C, r·H, r·W)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x);
        if r == 0 || s.c % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("channels {} not divisible by {}", s.c, r * r)));
        }
        let out = kernels::pixel_shuffle(self.value(x).data(), s, r, false);
        let value = Tensor::new(Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r), out)?;
        Ok(self.push(value, Op::PixelShuffle { x, r }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat", format!("{s} vs {first}")));
            }
            c += s.c;
        }
        let out_shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape().sample_len();
                data.extend_from_slice(&v.data()[n * len..(n + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial dims in {s}")));
        }
        let (ho, wo) = (s.h / 2, s.w / 2);
        let src = self.value(x).data();
        let q = T::c(0.25);
        let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
        for p in 0..s.n * s.c {
            let pl = &src[p * s.plane()..(p + 1) * s.plane()];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * s.w + 2 * xx;
                    out.push(q * (pl[i] + pl[i + 1] + pl[i + s.w] + pl[i + s.w + 1]));
                }
            }
        }
        let value = Tensor::new(Shape::new(s.n, s.c, ho, wo), out)?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    /// Depthwise separable filter with "valid" extent.
    pub fn filter_valid(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let s = self.shape(x);
        let k = kernel.len();
        if k == 0 || s.h < k || s.w < k {
            return Err(Error::shape("filter_valid", format!("window {k} larger than image {}x{}", s.h, s.w)));
        }
        let out = kernels::filter_valid(self.value(x).data(), s.n * s.c, s.h, s.w, kernel);
        let value = Tensor::new(Shape::new(s.n, s.c, s.h + 1 - k, s.w + 1 - k), out)?;
        Ok(self.push(value, Op::Gauss { x, kernel: kernel.to_vec() }, &[x]))
    }

    // ------------------------------------------------------------ stereo

    /// Channel-averaged correlation for horizontal shifts `0..=max_shift`.
    pub fn correlation(&mut self, l: Var, r: Var, max_shift: usize) -> Result<Var> {
        let s = self.shape(l);
        same_shape("correlation", s, self.shape(r))?;
        let out = kernels::correlation(self.value(l).data(), self.value(r).data(), s, max_shift);
        let value = Tensor::new(Shape::new(s.n, max_shift + 1, s.h, s.w), out)?;
        Ok(self.push(value, Op::Correlation { l, r, max_shift }, &[l, r]))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = kernels::softmax_channels(self.value(x).data(), s);
        let value = Tensor::new(s, out).expect("same shape");
        self.push(value, Op::SoftmaxChannels(x), &[x])
    }

    /// `x / sqrt(Σ_c x² + eps)` at every pixel.
    pub fn normalize_channels(&mut self, x: Var, eps: T) -> Var {
        let s = self.shape(x);
        let plane = s.plane();
        let src = self.value(x).data();
        let mut norms = vec![eps; s.n * plane];
        for (j, &v) in src.iter().enumerate() {
            norms[(j / s.sample_len()) * plane + j % plane] += v * v;
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let out = src.iter().enumerate().map(|(j, &v)| v / norms[(j / s.sample_len()) * plane + j % plane]).collect();
        let value = Tensor::new(s, out).expect("same shape");
        self.push(value, Op::NormalizeChannels { x, norms }, &[x])
    }

    /// `Σ_c weights[c]·x[c]` → one channel.
    pub fn channel_weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let s = self.shape(x);
        if weights.len() != s.c {
            return Err(Error::shape("channel_weighted_sum", format!("{} weights for {} channels", weights.len(), s.c)));
        }
        let plane = s.plane();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s.n * plane];
        for n in 0..s.n {
            let dst = &mut out[n * plane..(n + 1) * plane];
            for (c, &wc) in weights.iter().enumerate() {
                let off = (n * s.c + c) * plane;
                for (o, &v) in dst.iter_mut().zip(&src[off..off + plane]) {
                    *o += wc * v;
                }
            }
        }
        let value = Tensor::new(Shape::new(s.n, 1, s.h, s.w), out)?;
        Ok(self.push(value, Op::ChannelWeightedSum { x, weights: weights.to_vec() }, &[x]))
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => Some(Tensor::new(node.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let elementwise = |acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [T])), v: Var, d: &dyn Fn(usize) -> T| {
            acc(v, &mut |s| {
                for (j, o) in s.iter_mut().enumerate() {
                    *o += d(j);
                }
            })
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let os = node.value.shape();
                let geom = ConvGeom {
                    cin: xs.c,
                    cout: ws.n,
                    k: ws.h,
                    stride: *stride,
                    pad: *pad,
                    h: xs.h,
                    w: xs.w,
                    ho: os.h,
                    wo: os.w,
                };
                let cg = kernels::conv2d_backward(
                    &geom,
                    xs.n,
                    val(*x),
                    val(*w),
                    g,
                    wants(*x),
                    wants(*w),
                    b.is_some_and(wants),
                );
                if let Some(dx) = cg.dx {
                    acc(*x, &mut |s| s.iter_mut().zip(&dx).for_each(|(o, &d)| *o += d));
                }
                if let Some(dw) = cg.dw {
                    acc(*w, &mut |s| s.iter_mut().zip(&dw).for_each(|(o, &d)| *o += d));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, &mut |s| s.iter_mut().zip(&db).for_each(|(o, &d)| *o += d));
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|j| if xv[j] > T::zero() { g[j] } else { T::zero() });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|j| {
                    if xv[j] > T::zero() {
                        g[j]
                    } else if xv[j] < T::zero() {
                        -g[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::c(2.0);
                elementwise(&mut acc, *x, &|j| two * xv[j] * g[j]);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|j| if xv[j] >= *lo && xv[j] <= *hi { g[j] } else { T::zero() });
            }
            Op::Add(a, b) => {
                elementwise(&mut acc, *a, &|j| g[j]);
                elementwise(&mut acc, *b, &|j| g[j]);
            }
            Op::Sub(a, b) => {
                elementwise(&mut acc, *a, &|j| g[j]);
                elementwise(&mut acc, *b, &|j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                elementwise(&mut acc, *a, &|j| g[j] * bv[j]);
                elementwise(&mut acc, *b, &|j| g[j] * av[j]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                elementwise(&mut acc, *a, &|j| g[j] / bv[j]);
                elementwise(&mut acc, *b, &|j| -g[j] * av[j] / (bv[j] * bv[j]));
            }
            Op::Scale(x, s) => elementwise(&mut acc, *x, &|j| g[j] * *s),
            Op::Offset(x) => elementwise(&mut acc, *x, &|j| g[j]),
            Op::Sum(x) => elementwise(&mut acc, *x, &|_| g[0]),
            Op::MaskedMean { x, mask, total } => {
                let xs = self.shape(*x);
                let scale = g[0] / *total;
                elementwise(&mut acc, *x, &|j| scale * mask_at(mask, xs, j));
            }
            Op::SmoothL1 { pred, target, mask, count } => {
                let ps = self.shape(*pred);
                let (pv, tv) = (val(*pred), val(*target));
                let scale = g[0] / *count;
                let d = |j: usize| {
                    let m = mask_at(mask, ps, j);
                    if m == T::zero() {
                        return T::zero();
                    }
                    let diff = pv[j] - tv[j];
                    let slope = if diff.abs() < T::one() { diff } else { diff.signum() };
                    scale * m * slope
                };
                elementwise(&mut acc, *pred, &d);
                elementwise(&mut acc, *target, &|j| -d(j));
            }
            Op::CrossEntropy { logits, grad } => elementwise(&mut acc, *logits, &|j| g[0] * grad[j]),
            Op::Warp { x, plans } => {
                let s = self.shape(*x);
                let plane = s.plane();
                acc(*x, &mut |dx| {
                    for n in 0..s.n {
                        let plan = &plans[if plans.len() == 1 { 0 } else { n }];
                        for c in 0..s.c {
                            let off = (n * s.c + c) * plane;
                            kernels::apply_plan_transpose(plan, &g[off..off + plane], &mut dx[off..off + plane]);
                        }
                    }
                });
            }
            Op::Resize { x, plan } => {
                let s = self.shape(*x);
                let os = node.value.shape();
                let (pi, po) = (s.plane(), os.plane());
                acc(*x, &mut |dx| {
                    for p in 0..s.n * s.c {
                        kernels::apply_plan_transpose(plan, &g[p * po..(p + 1) * po], &mut dx[p * pi..(p + 1) * pi]);
                    }
                });
            }
            Op::PixelShuffle { x, r } => {
                let s = self.shape(*x);
                let back = kernels::pixel_shuffle(g, s, *r, true);
                elementwise(&mut acc, *x, &|j| back[j]);
            }
            Op::Concat(parts) => {
                let os = node.value.shape();
                let mut c0 = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps.sample_len();
                    acc(p, &mut |dp| {
                        for n in 0..os.n {
                            let src = os.index(n, c0, 0, 0);
                            for (o, &d) in dp[n * len..(n + 1) * len].iter_mut().zip(&g[src..src + len]) {
                                *o += d;
                            }
                        }
                    });
                    c0 += ps.c;
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (ho, wo) = (s.h / 2, s.w / 2);
                let q = T::c(0.25);
                acc(*x, &mut |dx| {
                    for p in 0..s.n * s.c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = q * g[(p * ho + y) * wo + xx];
                                let i = p * s.plane() + 2 * y * s.w + 2 * xx;
                                dx[i] += gv;
                                dx[i + 1] += gv;
                                dx[i + s.w] += gv;
                                dx[i + s.w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Gauss { x, kernel } => {
                let s = self.shape(*x);
                let back = kernels::filter_valid_backward(g, s.n * s.c, s.h, s.w, kernel);
                elementwise(&mut acc, *x, &|j| back[j]);
            }
            Op::Correlation { l, r, max_shift } => {
                let s = self.shape(*l);
                let (dl, dr) = kernels::correlation_backward(val(*l), val(*r), s, *max_shift, g);
                elementwise(&mut acc, *l, &|j| dl[j]);
                elementwise(&mut acc, *r, &|j| dr[j]);
            }
            Op::SoftmaxChannels(x) => {
                let back = kernels::softmax_channels_backward(node.value.data(), g, node.value.shape());
                elementwise(&mut acc, *x, &|j| back[j]);
            }
            Op::NormalizeChannels { x, norms } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let y = node.value.data();
                let pix = |j: usize| (j / s.sample_len()) * plane + j % plane;
                let mut dot = vec![T::zero(); norms.len()];
                for (j, (&gj, &yj)) in g.iter().zip(y).enumerate() {
                    dot[pix(j)] += gj * yj;
                }
                elementwise(&mut acc, *x, &|j| (g[j] - y[j] * dot[pix(j)]) / norms[pix(j)]);
            }
            Op::ChannelWeightedSum { x, weights } => {
                let s = self.shape(*x);
                let plane = s.plane();
                elementwise(&mut acc, *x, &|j| {
                    let n = j / s.sample_len();
                    let c = (j / plane) % s.c;
                    weights[c] * g[n * plane + j % plane]
                });
            }
        }
    }
}

/// Gradients of a consumed tape, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` into `into` (explicit accumulation).
    pub fn accumulate_into(&self, v: Var, into: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.get(v) {
            same_shape("accumulate", g.shape(), into.shape())?;
            for (o, &d) in into.data_mut().iter_mut().zip(g.data()) {
                *o += d;
            }
        }
        Ok(())
    }
}
