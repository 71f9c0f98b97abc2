//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks the record once in reverse, accumulating gradients into every node
//! that requires them. Tensors are immutable once created; a tape is confined
//! to a single thread, and independent tapes may run in parallel.

mod conv;
mod gradcheck;

pub use gradcheck::grad_check;

use crate::error::{CoastError, Result};
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Added under the square root of every channel variance.
pub const EPS_STATS: Real = 1e-5;
/// Probability clamp inside KL and cross-entropy logarithms.
pub const EPS_KL: Real = 1e-8;

/// Dense N-dimensional array. `grad` is populated by copying out of a tape
/// after a backward pass and always matches `values` in length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<Real>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(CoastError::InvalidShape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: Real) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// How a node was produced. Inputs are tape indices; constant operands
/// (targets, pixel weights) are stored by value since they never carry
/// gradients.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, Real),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    LeakyRelu(usize, Real),
    Dropout { src: usize, mask: Arc<Vec<Real>> },
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, pad: usize },
    ChannelAffine { src: usize, scale: usize, bias: usize },
    UpsampleNearest { src: usize, factor: usize },
    DownsampleNearest { src: usize, factor: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    ChannelMean(usize),
    ChannelStd(usize),
    AddNc { src: usize, stats: usize },
    SubNc { src: usize, stats: usize },
    MulNc { src: usize, stats: usize },
    DivNc { src: usize, stats: usize },
    SoftmaxCrossEntropy { logits: usize, target: Arc<Tensor>, weights: Option<Arc<Tensor>> },
    CrossEntropyProbs { probs: usize, target: Arc<Tensor>, weights: Option<Arc<Tensor>> },
    KlDivergence { p: usize, q: usize },
    BceWithLogits { logits: usize, target: Real },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<Real>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations. Execution order is the topological
/// order, so a single reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
}

fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(CoastError::InvalidShape(format!("expected rank-4 tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<Real>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, requires_grad, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<Real>) -> Result<TensorId> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, false, Op::Leaf))
    }

    pub fn scalar(&mut self, v: Real) -> TensorId {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    /// New leaf with the same values but cut off from the gradient flow.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let (shape, values) = {
            let n = &self.nodes[id.0];
            (n.shape.clone(), n.values.clone())
        };
        self.push(shape, values, false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[Real] {
        &self.nodes[id.0].values
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, id: TensorId) -> Real {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[Real]> {
        self.grads[id.0].as_deref()
    }

    /// Copy a node out as a plain tensor, together with its gradient if one
    /// was accumulated.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: n.requires_grad,
            grad: self.grads[id.0].clone(),
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    fn check_same_shape(&self, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoastError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b)?;
        let values: Vec<Real> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, values, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b)?;
        let values: Vec<Real> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, values, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b)?;
        let values: Vec<Real> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, values, rg, Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b)?;
        let values: Vec<Real> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, values, rg, Op::Div(a.0, b.0)))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0].values.iter().map(|x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Neg(a.0))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: Real) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: Real) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::MulScalar(a.0, c))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Exp(a.0))
    }

    /// Natural log with the input clamped at [`EPS_KL`] from below.
    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0].values.iter().map(|x| x.max(EPS_KL).ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Ln(a.0))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: Real) -> TensorId {
        let values: Vec<Real> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::LeakyRelu(a.0, slope))
    }

    /// Inverted dropout. In eval mode (`training == false`) this is the
    /// identity and records nothing new.
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: Real,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoastError::InvalidValue(format!("dropout rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<Real> = (0..self.nodes[a.0].values.len())
            .map(|_| if rng.gen::<f64>() < keep as f64 { 1.0 / keep } else { 0.0 })
            .collect();
        let values: Vec<Real> =
            self.nodes[a.0].values.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Dropout { src: a.0, mask: Arc::new(mask) }))
    }

    // ---- structural --------------------------------------------------------

    /// 2-D convolution over `[N,C,H,W]` with square kernels, zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (n, c_in, h, w) = nchw(self.shape(input))?;
        let ws = self.shape(weight);
        if ws.len() != 4 || ws[1] != c_in {
            return Err(CoastError::ShapeMismatch(format!(
                "conv weight {:?} incompatible with input channels {c_in}",
                ws
            )));
        }
        let (c_out, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if self.shape(bias) != [c_out] {
            return Err(CoastError::ShapeMismatch(format!(
                "conv bias {:?}, expected [{c_out}]",
                self.shape(bias)
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(CoastError::InvalidShape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let values = conv::forward(
            &self.nodes[input.0].values,
            &self.nodes[weight.0].values,
            &self.nodes[bias.0].values,
            (n, c_in, h, w),
            (c_out, kh, kw),
            stride,
            pad,
        );
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            vec![n, c_out, oh, ow],
            values,
            rg,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, pad },
        ))
    }

    /// Per-channel affine `x * scale[c] + bias[c]` over `[N,C,H,W]`.
    pub fn channel_affine(
        &mut self,
        src: TensorId,
        scale: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let (n, c, h, w) = nchw(self.shape(src))?;
        if self.shape(scale) != [c] || self.shape(bias) != [c] {
            return Err(CoastError::ShapeMismatch(format!(
                "affine params {:?}/{:?}, expected [{c}]",
                self.shape(scale),
                self.shape(bias)
            )));
        }
        let hw = h * w;
        let mut values = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let s = self.nodes[scale.0].values[ci];
                let b = self.nodes[bias.0].values[ci];
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    values[base + i] = self.nodes[src.0].values[base + i] * s + b;
                }
            }
        }
        let rg = self.rg(&[src.0, scale.0, bias.0]);
        Ok(self.push(
            vec![n, c, h, w],
            values,
            rg,
            Op::ChannelAffine { src: src.0, scale: scale.0, bias: bias.0 },
        ))
    }

    pub fn upsample_nearest(&mut self, src: TensorId, factor: usize) -> Result<TensorId> {
        let (n, c, h, w) = nchw(self.shape(src))?;
        if factor == 0 {
            return Err(CoastError::InvalidValue("upsample factor 0".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut values = vec![0.0; n * c * oh * ow];
        let inv = &self.nodes[src.0].values;
        for nc in 0..n * c {
            let ib = nc * h * w;
            let ob = nc * oh * ow;
            for y in 0..oh {
                let iy = y / factor;
                for x in 0..ow {
                    values[ob + y * ow + x] = inv[ib + iy * w + x / factor];
                }
            }
        }
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![n, c, oh, ow], values, rg, Op::UpsampleNearest { src: src.0, factor }))
    }

    pub fn downsample_nearest(&mut self, src: TensorId, factor: usize) -> Result<TensorId> {
        let (n, c, h, w) = nchw(self.shape(src))?;
        if factor == 0 || h < factor || w < factor {
            return Err(CoastError::InvalidShape(format!(
                "cannot downsample {h}x{w} by {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut values = vec![0.0; n * c * oh * ow];
        let inv = &self.nodes[src.0].values;
        for nc in 0..n * c {
            let ib = nc * h * w;
            let ob = nc * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    values[ob + y * ow + x] = inv[ib + y * factor * w + x * factor];
                }
            }
        }
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![n, c, oh, ow], values, rg, Op::DownsampleNearest { src: src.0, factor }))
    }

    // ---- softmax family ----------------------------------------------------

    /// Per-pixel softmax over the class axis of `[N,K,H,W]`.
    pub fn softmax(&mut self, src: TensorId) -> Result<TensorId> {
        let (n, k, h, w) = nchw(self.shape(src))?;
        let hw = h * w;
        let inv = &self.nodes[src.0].values;
        let mut values = vec![0.0; inv.len()];
        for ni in 0..n {
            for p in 0..hw {
                let idx = |ki: usize| (ni * k + ki) * hw + p;
                let mut m = Real::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(inv[idx(ki)]);
                }
                let mut s = 0.0;
                for ki in 0..k {
                    let e = (inv[idx(ki)] - m).exp();
                    values[idx(ki)] = e;
                    s += e;
                }
                for ki in 0..k {
                    values[idx(ki)] /= s;
                }
            }
        }
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![n, k, h, w], values, rg, Op::Softmax(src.0)))
    }

    /// Per-pixel log-softmax over the class axis of `[N,K,H,W]`.
    pub fn log_softmax(&mut self, src: TensorId) -> Result<TensorId> {
        let (n, k, h, w) = nchw(self.shape(src))?;
        let hw = h * w;
        let inv = &self.nodes[src.0].values;
        let mut values = vec![0.0; inv.len()];
        for ni in 0..n {
            for p in 0..hw {
                let idx = |ki: usize| (ni * k + ki) * hw + p;
                let mut m = Real::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(inv[idx(ki)]);
                }
                let mut s = 0.0;
                for ki in 0..k {
                    s += (inv[idx(ki)] - m).exp();
                }
                let lse = m + s.ln();
                for ki in 0..k {
                    values[idx(ki)] = inv[idx(ki)] - lse;
                }
            }
        }
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![n, k, h, w], values, rg, Op::LogSoftmax(src.0)))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, src: TensorId) -> TensorId {
        let s: Real = self.nodes[src.0].values.iter().sum();
        let rg = self.nodes[src.0].requires_grad;
        self.push(vec![], vec![s], rg, Op::Sum(src.0))
    }

    pub fn mean(&mut self, src: TensorId) -> Result<TensorId> {
        let n = self.nodes[src.0].values.len();
        if n == 0 {
            return Err(CoastError::Empty("mean of empty tensor".into()));
        }
        let s: Real = self.nodes[src.0].values.iter().sum();
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![], vec![s / n as Real], rg, Op::Mean(src.0)))
    }

    // ---- channel statistics -------------------------------------------------

    /// Spatial mean per `(sample, channel)`: `[N,C,H,W] -> [N,C]`.
    pub fn channel_mean(&mut self, src: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = nchw(self.shape(src))?;
        if h * w == 0 {
            return Err(CoastError::InvalidShape("empty spatial extent".into()));
        }
        let hw = h * w;
        let inv = &self.nodes[src.0].values;
        let mut values = vec![0.0; n * c];
        for nc in 0..n * c {
            let base = nc * hw;
            values[nc] = inv[base..base + hw].iter().sum::<Real>() / hw as Real;
        }
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![n, c], values, rg, Op::ChannelMean(src.0)))
    }

    /// Spatial standard deviation per `(sample, channel)` with population
    /// variance and the [`EPS_STATS`] floor: `sqrt(var + eps)`.
    pub fn channel_std(&mut self, src: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = nchw(self.shape(src))?;
        if h * w == 0 {
            return Err(CoastError::InvalidShape("empty spatial extent".into()));
        }
        let hw = h * w;
        let inv = &self.nodes[src.0].values;
        let mut values = vec![0.0; n * c];
        for nc in 0..n * c {
            let base = nc * hw;
            let mu = inv[base..base + hw].iter().sum::<Real>() / hw as Real;
            let var = inv[base..base + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<Real>()
                / hw as Real;
            values[nc] = (var + EPS_STATS).sqrt();
        }
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(vec![n, c], values, rg, Op::ChannelStd(src.0)))
    }

    /// Channel-wise mean and standard deviation, both differentiable.
    pub fn channel_stats(&mut self, src: TensorId) -> Result<(TensorId, TensorId)> {
        Ok((self.channel_mean(src)?, self.channel_std(src)?))
    }

    // ---- broadcast against [N,C] statistics ---------------------------------

    fn check_nc(&self, src: TensorId, stats: TensorId) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = nchw(self.shape(src))?;
        if self.shape(stats) != [n, c] {
            return Err(CoastError::ShapeMismatch(format!(
                "stats {:?}, expected [{n}, {c}]",
                self.shape(stats)
            )));
        }
        Ok((n * c, h * w, 0))
    }

    fn nc_op(
        &mut self,
        src: TensorId,
        stats: TensorId,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<TensorId> {
        let (ncs, hw, _) = self.check_nc(src, stats)?;
        let inv = &self.nodes[src.0].values;
        let sv = &self.nodes[stats.0].values;
        let mut values = vec![0.0; inv.len()];
        for nc in 0..ncs {
            let s = sv[nc];
            let base = nc * hw;
            for i in 0..hw {
                values[base + i] = f(inv[base + i], s);
            }
        }
        let shape = self.nodes[src.0].shape.clone();
        let rg = self.rg(&[src.0, stats.0]);
        Ok(self.push(shape, values, rg, op))
    }

    pub fn add_nc(&mut self, src: TensorId, stats: TensorId) -> Result<TensorId> {
        self.nc_op(src, stats, |x, s| x + s, Op::AddNc { src: src.0, stats: stats.0 })
    }

    pub fn sub_nc(&mut self, src: TensorId, stats: TensorId) -> Result<TensorId> {
        self.nc_op(src, stats, |x, s| x - s, Op::SubNc { src: src.0, stats: stats.0 })
    }

    pub fn mul_nc(&mut self, src: TensorId, stats: TensorId) -> Result<TensorId> {
        self.nc_op(src, stats, |x, s| x * s, Op::MulNc { src: src.0, stats: stats.0 })
    }

    pub fn div_nc(&mut self, src: TensorId, stats: TensorId) -> Result<TensorId> {
        self.nc_op(src, stats, |x, s| x / s, Op::DivNc { src: src.0, stats: stats.0 })
    }

    // ---- losses -------------------------------------------------------------

    // Shape is validated by the caller; this checks the one-hot contract rowwise.
    fn check_one_hot(target: &Tensor, n: usize, k: usize, hw: usize) -> Result<()> {
        for ni in 0..n {
            for p in 0..hw {
                let mut sum = 0.0;
                for ki in 0..k {
                    let v = target.values[(ni * k + ki) * hw + p];
                    if v != 0.0 && v != 1.0 {
                        return Err(CoastError::NotOneHot { pixel: ni * hw + p });
                    }
                    sum += v;
                }
                if sum != 1.0 {
                    return Err(CoastError::NotOneHot { pixel: ni * hw + p });
                }
            }
        }
        Ok(())
    }

    fn check_weights(weights: &Tensor, n: usize, h: usize, w: usize) -> Result<()> {
        if weights.shape != [n, h, w] {
            return Err(CoastError::ShapeMismatch(format!(
                "pixel weights {:?}, expected [{n}, {h}, {w}]",
                weights.shape
            )));
        }
        if weights.values.iter().any(|&v| v < 0.0) {
            return Err(CoastError::InvalidValue("negative pixel weight".into()));
        }
        Ok(())
    }

    /// Mean over pixels of `w * (-log softmax(logits)[target class])`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        target: Arc<Tensor>,
        weights: Option<Arc<Tensor>>,
    ) -> Result<TensorId> {
        let (n, k, h, w) = nchw(self.shape(logits))?;
        if target.shape != [n, k, h, w] {
            return Err(CoastError::ShapeMismatch(format!(
                "target {:?} vs logits {:?}",
                target.shape,
                self.shape(logits)
            )));
        }
        let hw = h * w;
        Self::check_one_hot(&target, n, k, hw)?;
        if let Some(ws) = &weights {
            Self::check_weights(ws, n, h, w)?;
        }
        let inv = &self.nodes[logits.0].values;
        let pixels = (n * hw) as Real;
        let mut total = 0.0;
        for ni in 0..n {
            for p in 0..hw {
                let idx = |ki: usize| (ni * k + ki) * hw + p;
                let mut m = Real::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(inv[idx(ki)]);
                }
                let mut s = 0.0;
                for ki in 0..k {
                    s += (inv[idx(ki)] - m).exp();
                }
                let lse = m + s.ln();
                let mut tlogit = 0.0;
                for ki in 0..k {
                    if target.values[idx(ki)] == 1.0 {
                        tlogit = inv[idx(ki)];
                    }
                }
                let wv = weights.as_ref().map_or(1.0, |ws| ws.values[ni * hw + p]);
                total += wv * (lse - tlogit);
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![],
            vec![total / pixels],
            rg,
            Op::SoftmaxCrossEntropy { logits: logits.0, target, weights },
        ))
    }

    /// Cross entropy on an already-normalized probability map: mean over
    /// pixels of `w * (-log p[target class])`, log clamped at [`EPS_KL`].
    pub fn cross_entropy_probs(
        &mut self,
        probs: TensorId,
        target: Arc<Tensor>,
        weights: Option<Arc<Tensor>>,
    ) -> Result<TensorId> {
        let (n, k, h, w) = nchw(self.shape(probs))?;
        if target.shape != [n, k, h, w] {
            return Err(CoastError::ShapeMismatch(format!(
                "target {:?} vs probs {:?}",
                target.shape,
                self.shape(probs)
            )));
        }
        let hw = h * w;
        Self::check_one_hot(&target, n, k, hw)?;
        if let Some(ws) = &weights {
            Self::check_weights(ws, n, h, w)?;
        }
        let inv = &self.nodes[probs.0].values;
        let pixels = (n * hw) as Real;
        let mut total = 0.0;
        for ni in 0..n {
            for p in 0..hw {
                for ki in 0..k {
                    let i = (ni * k + ki) * hw + p;
                    if target.values[i] == 1.0 {
                        let wv = weights.as_ref().map_or(1.0, |ws| ws.values[ni * hw + p]);
                        total += wv * -(inv[i].max(EPS_KL).ln());
                    }
                }
            }
        }
        let rg = self.nodes[probs.0].requires_grad;
        Ok(self.push(
            vec![],
            vec![total / pixels],
            rg,
            Op::CrossEntropyProbs { probs: probs.0, target, weights },
        ))
    }

    /// Mean over pixels of `sum_k p_k log(p_k / q_k)` with `0 log 0 = 0` and
    /// both logs clamped at [`EPS_KL`]. Inputs must be per-pixel distributions.
    pub fn kl_divergence(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        self.check_same_shape(p, q)?;
        let (n, k, h, w) = nchw(self.shape(p))?;
        let hw = h * w;
        for (name, id) in [("p", p), ("q", q)] {
            let vals = &self.nodes[id.0].values;
            for ni in 0..n {
                for pix in 0..hw {
                    let mut s = 0.0;
                    for ki in 0..k {
                        let v = vals[(ni * k + ki) * hw + pix];
                        if v < -1e-12 {
                            return Err(CoastError::NotNormalized {
                                pixel: ni * hw + pix,
                                sum: v as f64,
                            });
                        }
                        s += v;
                    }
                    if (s - 1.0).abs() > 1e-6 {
                        let _ = name;
                        return Err(CoastError::NotNormalized {
                            pixel: ni * hw + pix,
                            sum: s as f64,
                        });
                    }
                }
            }
        }
        let pv = &self.nodes[p.0].values;
        let qv = &self.nodes[q.0].values;
        let pixels = (n * hw) as Real;
        let mut total = 0.0;
        for i in 0..pv.len() {
            if pv[i] > 0.0 {
                total += pv[i] * (pv[i].max(EPS_KL).ln() - qv[i].max(EPS_KL).ln());
            }
        }
        let rg = self.rg(&[p.0, q.0]);
        Ok(self.push(vec![], vec![total / pixels], rg, Op::KlDivergence { p: p.0, q: q.0 }))
    }

    /// Binary cross-entropy against a constant target (1 = real, 0 = fake),
    /// computed from logits in the numerically stable form, mean over all
    /// elements.
    pub fn bce_with_logits(&mut self, logits: TensorId, target: Real) -> Result<TensorId> {
        if !(target == 0.0 || target == 1.0) {
            return Err(CoastError::InvalidValue(format!("bce target {target}, expected 0 or 1")));
        }
        let inv = &self.nodes[logits.0].values;
        if inv.is_empty() {
            return Err(CoastError::Empty("bce on empty tensor".into()));
        }
        let mut total = 0.0;
        for &x in inv {
            total += x.max(0.0) - target * x + (1.0 + (-x.abs()).exp()).ln();
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![],
            vec![total / inv.len() as Real],
            rg,
            Op::BceWithLogits { logits: logits.0, target },
        ))
    }

    // ---- backward -----------------------------------------------------------

    fn accumulate(&mut self, idx: usize, delta: &[Real]) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let g = self.grads[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Run reverse-mode accumulation from a scalar output. Gradients of
    /// shared subexpressions accumulate; nodes off the path keep no gradient.
    pub fn backward(&mut self, out: TensorId) -> Result<()> {
        if self.nodes[out.0].values.len() != 1 {
            return Err(CoastError::InvalidShape(format!(
                "backward requires a scalar output, got {:?}",
                self.nodes[out.0].shape
            )));
        }
        if !self.nodes[out.0].values[0].is_finite() {
            return Err(CoastError::NonFinite("backward output".into()));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(CoastError::InvalidValue(
                "backward output does not depend on any differentiable input".into(),
            ));
        }
        self.grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.step_backward(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, g: &[Real]) -> Result<()> {
        // `g` is the upstream gradient of node `idx`; scatter into inputs.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let neg: Vec<Real> = g.iter().map(|x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<Real> =
                    g.iter().zip(&self.nodes[b].values).map(|(gi, bv)| gi * bv).collect();
                let db: Vec<Real> =
                    g.iter().zip(&self.nodes[a].values).map(|(gi, av)| gi * av).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<Real> =
                    g.iter().zip(&self.nodes[b].values).map(|(gi, bv)| gi / bv).collect();
                let db: Vec<Real> = g
                    .iter()
                    .zip(self.nodes[idx].values.iter().zip(&self.nodes[b].values))
                    .map(|(gi, (ov, bv))| -gi * ov / bv)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Neg(a) => {
                let a = *a;
                let da: Vec<Real> = g.iter().map(|x| -x).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<Real> = g.iter().map(|x| x * c).collect();
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da: Vec<Real> =
                    g.iter().zip(&self.nodes[idx].values).map(|(gi, ov)| gi * ov).collect();
                self.accumulate(a, &da);
            }
            Op::Ln(a) => {
                let a = *a;
                let da: Vec<Real> = g
                    .iter()
                    .zip(&self.nodes[a].values)
                    .map(|(gi, &xv)| if xv > EPS_KL { gi / xv } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<Real> = g
                    .iter()
                    .zip(&self.nodes[a].values)
                    .map(|(gi, &xv)| if xv > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let da: Vec<Real> = g
                    .iter()
                    .zip(&self.nodes[a].values)
                    .map(|(gi, &xv)| if xv > 0.0 { *gi } else { gi * slope })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Dropout { src, mask } => {
                let src = *src;
                let mask = Arc::clone(mask);
                let da: Vec<Real> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                self.accumulate(src, &da);
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                let ishape = self.nodes[input].shape.clone();
                let wshape = self.nodes[weight].shape.clone();
                let (n, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (c_out, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                let oshape = self.nodes[idx].shape.clone();
                let (oh, ow) = (oshape[2], oshape[3]);
                if self.nodes[input].requires_grad {
                    let din = conv::backward_input(
                        g,
                        &self.nodes[weight].values,
                        (n, c_in, h, w),
                        (c_out, kh, kw),
                        (oh, ow),
                        stride,
                        pad,
                    );
                    self.accumulate(input, &din);
                }
                if self.nodes[weight].requires_grad {
                    let dw = conv::backward_weight(
                        g,
                        &self.nodes[input].values,
                        (n, c_in, h, w),
                        (c_out, kh, kw),
                        (oh, ow),
                        stride,
                        pad,
                    );
                    self.accumulate(weight, &dw);
                }
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; c_out];
                    for ni in 0..n {
                        for co in 0..c_out {
                            let base = (ni * c_out + co) * oh * ow;
                            db[co] += g[base..base + oh * ow].iter().sum::<Real>();
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::ChannelAffine { src, scale, bias } => {
                let (src, scale, bias) = (*src, *scale, *bias);
                let shape = self.nodes[src].shape.clone();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if self.nodes[src].requires_grad {
                    let mut da = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let s = self.nodes[scale].values[ci];
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                da[base + i] = g[base + i] * s;
                            }
                        }
                    }
                    self.accumulate(src, &da);
                }
                if self.nodes[scale].requires_grad {
                    let mut ds = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                ds[ci] += g[base + i] * self.nodes[src].values[base + i];
                            }
                        }
                    }
                    self.accumulate(scale, &ds);
                }
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            db[ci] += g[base..base + hw].iter().sum::<Real>();
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::UpsampleNearest { src, factor } => {
                let (src, f) = (*src, *factor);
                let ishape = self.nodes[src].shape.clone();
                let (nc, h, w) = (ishape[0] * ishape[1], ishape[2], ishape[3]);
                let (oh, ow) = (h * f, w * f);
                let mut da = vec![0.0; nc * h * w];
                for b in 0..nc {
                    let ib = b * h * w;
                    let ob = b * oh * ow;
                    for y in 0..oh {
                        for x in 0..ow {
                            da[ib + (y / f) * w + x / f] += g[ob + y * ow + x];
                        }
                    }
                }
                self.accumulate(src, &da);
            }
            Op::DownsampleNearest { src, factor } => {
                let (src, f) = (*src, *factor);
                let ishape = self.nodes[src].shape.clone();
                let (nc, h, w) = (ishape[0] * ishape[1], ishape[2], ishape[3]);
                let (oh, ow) = (h / f, w / f);
                let mut da = vec![0.0; nc * h * w];
                for b in 0..nc {
                    let ib = b * h * w;
                    let ob = b * oh * ow;
                    for y in 0..oh {
                        for x in 0..ow {
                            da[ib + y * f * w + x * f] += g[ob + y * ow + x];
                        }
                    }
                }
                self.accumulate(src, &da);
            }
            Op::Softmax(a) => {
                let a = *a;
                let shape = self.nodes[idx].shape.clone();
                let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut da = vec![0.0; g.len()];
                {
                    let s = &self.nodes[idx].values;
                    for ni in 0..n {
                        for p in 0..hw {
                            let idx_of = |ki: usize| (ni * k + ki) * hw + p;
                            let mut dot = 0.0;
                            for ki in 0..k {
                                dot += g[idx_of(ki)] * s[idx_of(ki)];
                            }
                            for ki in 0..k {
                                let i = idx_of(ki);
                                da[i] = s[i] * (g[i] - dot);
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let shape = self.nodes[idx].shape.clone();
                let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut da = vec![0.0; g.len()];
                {
                    let ls = &self.nodes[idx].values;
                    for ni in 0..n {
                        for p in 0..hw {
                            let idx_of = |ki: usize| (ni * k + ki) * hw + p;
                            let mut gsum = 0.0;
                            for ki in 0..k {
                                gsum += g[idx_of(ki)];
                            }
                            for ki in 0..k {
                                let i = idx_of(ki);
                                da[i] = g[i] - ls[i].exp() * gsum;
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Sum(a) => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a].values.len()];
                self.accumulate(a, &da);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a].values.len() as Real;
                let da = vec![g[0] / n; self.nodes[a].values.len()];
                self.accumulate(a, &da);
            }
            Op::ChannelMean(a) => {
                let a = *a;
                let ishape = self.nodes[a].shape.clone();
                let (nc, hw) = (ishape[0] * ishape[1], ishape[2] * ishape[3]);
                let mut da = vec![0.0; nc * hw];
                for b in 0..nc {
                    let gv = g[b] / hw as Real;
                    for i in 0..hw {
                        da[b * hw + i] = gv;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ChannelStd(a) => {
                let a = *a;
                let ishape = self.nodes[a].shape.clone();
                let (nc, hw) = (ishape[0] * ishape[1], ishape[2] * ishape[3]);
                let mut da = vec![0.0; nc * hw];
                {
                    let x = &self.nodes[a].values;
                    let sigma = &self.nodes[idx].values;
                    for b in 0..nc {
                        let base = b * hw;
                        let mu = x[base..base + hw].iter().sum::<Real>() / hw as Real;
                        let denom = hw as Real * sigma[b];
                        for i in 0..hw {
                            da[base + i] = g[b] * (x[base + i] - mu) / denom;
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::AddNc { src, stats } => {
                let (src, stats) = (*src, *stats);
                let (nc, hw) = self.nc_dims(src);
                self.accumulate(src, g);
                if self.nodes[stats].requires_grad {
                    let mut ds = vec![0.0; nc];
                    for b in 0..nc {
                        ds[b] = g[b * hw..(b + 1) * hw].iter().sum();
                    }
                    self.accumulate(stats, &ds);
                }
            }
            Op::SubNc { src, stats } => {
                let (src, stats) = (*src, *stats);
                let (nc, hw) = self.nc_dims(src);
                self.accumulate(src, g);
                if self.nodes[stats].requires_grad {
                    let mut ds = vec![0.0; nc];
                    for b in 0..nc {
                        ds[b] = -g[b * hw..(b + 1) * hw].iter().sum::<Real>();
                    }
                    self.accumulate(stats, &ds);
                }
            }
            Op::MulNc { src, stats } => {
                let (src, stats) = (*src, *stats);
                let (nc, hw) = self.nc_dims(src);
                if self.nodes[src].requires_grad {
                    let mut da = vec![0.0; g.len()];
                    for b in 0..nc {
                        let s = self.nodes[stats].values[b];
                        for i in 0..hw {
                            da[b * hw + i] = g[b * hw + i] * s;
                        }
                    }
                    self.accumulate(src, &da);
                }
                if self.nodes[stats].requires_grad {
                    let mut ds = vec![0.0; nc];
                    for b in 0..nc {
                        let mut acc = 0.0;
                        for i in 0..hw {
                            acc += g[b * hw + i] * self.nodes[src].values[b * hw + i];
                        }
                        ds[b] = acc;
                    }
                    self.accumulate(stats, &ds);
                }
            }
            Op::DivNc { src, stats } => {
                let (src, stats) = (*src, *stats);
                let (nc, hw) = self.nc_dims(src);
                if self.nodes[src].requires_grad {
                    let mut da = vec![0.0; g.len()];
                    for b in 0..nc {
                        let s = self.nodes[stats].values[b];
                        for i in 0..hw {
                            da[b * hw + i] = g[b * hw + i] / s;
                        }
                    }
                    self.accumulate(src, &da);
                }
                if self.nodes[stats].requires_grad {
                    let mut ds = vec![0.0; nc];
                    for b in 0..nc {
                        let s = self.nodes[stats].values[b];
                        let mut acc = 0.0;
                        for i in 0..hw {
                            acc += -g[b * hw + i] * self.nodes[idx].values[b * hw + i] / s;
                        }
                        ds[b] = acc;
                    }
                    self.accumulate(stats, &ds);
                }
            }
            Op::SoftmaxCrossEntropy { logits, target, weights } => {
                let logits = *logits;
                let target = Arc::clone(target);
                let weights = weights.clone();
                let shape = self.nodes[logits].shape.clone();
                let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let pixels = (n * hw) as Real;
                let mut da = vec![0.0; n * k * hw];
                {
                    let x = &self.nodes[logits].values;
                    for ni in 0..n {
                        for p in 0..hw {
                            let idx_of = |ki: usize| (ni * k + ki) * hw + p;
                            let mut m = Real::NEG_INFINITY;
                            for ki in 0..k {
                                m = m.max(x[idx_of(ki)]);
                            }
                            let mut s = 0.0;
                            for ki in 0..k {
                                s += (x[idx_of(ki)] - m).exp();
                            }
                            let wv =
                                weights.as_ref().map_or(1.0, |ws| ws.values[ni * hw + p]);
                            let coef = g[0] * wv / pixels;
                            for ki in 0..k {
                                let i = idx_of(ki);
                                let soft = (x[i] - m).exp() / s;
                                da[i] = coef * (soft - target.values[i]);
                            }
                        }
                    }
                }
                self.accumulate(logits, &da);
            }
            Op::CrossEntropyProbs { probs, target, weights } => {
                let probs = *probs;
                let target = Arc::clone(target);
                let weights = weights.clone();
                let shape = self.nodes[probs].shape.clone();
                let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let pixels = (n * hw) as Real;
                let mut da = vec![0.0; n * k * hw];
                {
                    let pvals = &self.nodes[probs].values;
                    for ni in 0..n {
                        for p in 0..hw {
                            for ki in 0..k {
                                let i = (ni * k + ki) * hw + p;
                                if target.values[i] == 1.0 && pvals[i] > EPS_KL {
                                    let wv = weights
                                        .as_ref()
                                        .map_or(1.0, |ws| ws.values[ni * hw + p]);
                                    da[i] = -g[0] * wv / (pvals[i] * pixels);
                                }
                            }
                        }
                    }
                }
                self.accumulate(probs, &da);
            }
            Op::KlDivergence { p, q } => {
                let (p, q) = (*p, *q);
                let shape = self.nodes[p].shape.clone();
                let (n, _k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let pixels = (n * hw) as Real;
                if self.nodes[p].requires_grad {
                    let mut dp = vec![0.0; self.nodes[p].values.len()];
                    for i in 0..self.nodes[p].values.len() {
                        let pv = self.nodes[p].values[i];
                        let qv = self.nodes[q].values[i];
                        if pv > 0.0 {
                            let mut d = pv.max(EPS_KL).ln() - qv.max(EPS_KL).ln();
                            if pv > EPS_KL {
                                d += 1.0;
                            }
                            dp[i] = g[0] * d / pixels;
                        }
                    }
                    self.accumulate(p, &dp);
                }
                if self.nodes[q].requires_grad {
                    let mut dq = vec![0.0; self.nodes[q].values.len()];
                    for i in 0..self.nodes[q].values.len() {
                        let pv = self.nodes[p].values[i];
                        let qv = self.nodes[q].values[i];
                        if pv > 0.0 && qv > EPS_KL {
                            dq[i] = -g[0] * pv / qv / pixels;
                        }
                    }
                    self.accumulate(q, &dq);
                }
            }
            Op::BceWithLogits { logits, target } => {
                let (logits, t) = (*logits, *target);
                let count = self.nodes[logits].values.len() as Real;
                let da: Vec<Real> = self.nodes[logits]
                    .values
                    .iter()
                    .map(|&x| {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        g[0] * (sig - t) / count
                    })
                    .collect();
                self.accumulate(logits, &da);
            }
        }
        Ok(())
    }

    fn nc_dims(&self, src: usize) -> (usize, usize) {
        let s = &self.nodes[src].shape;
        (s[0] * s[1], s[2] * s[3])
    }
}

/// Argmax over the class axis of a `[N,K,H,W]` probability or logit map,
/// breaking ties toward the lowest class index. Returns `N*H*W` class ids.
pub fn argmax_classes(values: &[Real], shape: &[usize]) -> Vec<u8> {
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut out = vec![0u8; n * hw];
    for ni in 0..n {
        for p in 0..hw {
            let mut best = 0usize;
            let mut bv = values[(ni * k) * hw + p];
            for ki in 1..k {
                let v = values[(ni * k + ki) * hw + p];
                if v > bv {
                    bv = v;
                    best = ki;
                }
            }
            out[ni * hw + p] = best as u8;
        }
    }
    out
}

/// Per-pixel KL divergence `sum_k p_k log(p_k/q_k)` between two `[N,K,H,W]`
/// probability maps, as plain values (no tape participation). Used for the
/// rectification weights, which are excluded from the gradient flow.
pub fn kl_per_pixel(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape != q.shape {
        return Err(CoastError::ShapeMismatch(format!("{:?} vs {:?}", p.shape, q.shape)));
    }
    let (n, k, h, w) = nchw(&p.shape)?;
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for ni in 0..n {
        for pix in 0..hw {
            let mut acc = 0.0;
            for ki in 0..k {
                let i = (ni * k + ki) * hw + pix;
                if p.values[i] > 0.0 {
                    acc += p.values[i]
                        * (p.values[i].max(EPS_KL).ln() - q.values[i].max(EPS_KL).ln());
                }
            }
            out[ni * hw + pix] = acc;
        }
    }
    Tensor::new(vec![n, h, w], out)
}
