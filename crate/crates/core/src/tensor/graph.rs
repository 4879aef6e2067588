use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.1 }
    }
}

/// Exponential moving averages used by batch norm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Folds a batch into the running averages; variance uses the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        let correction = if batch.count > 1 {
            T::lit(batch.count as f64 / (batch.count - 1) as f64)
        } else {
            T::one()
        };
        for (rm, &bm) in self.mean.iter_mut().zip(&batch.mean) {
            *rm = keep * *rm + m * bm;
        }
        for (rv, &bv) in self.var.iter_mut().zip(&batch.var) {
            *rv = keep * *rv + m * bv * correction;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geo: ConvGeometry },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Dropout { input: Var, mask: Vec<T> },
    Add(Var, Var),
    Scale(Var, T),
    MeanSquare(Var, Var),
    MeanPerSample(Var),
    BceMean { scores: Var, target_real: bool, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of differentiable operations.
///
/// A graph is single-use: [`Graph::backward`] consumes it, after which leaf
/// gradients can be read but no further backward pass is allowed.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of the kink every ReLU / LeakyReLU input lies on, in tape
    /// order. Finite-difference checks compare these patterns to tell when a
    /// probe stepped across a point where the function is not differentiable.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_) | Op::LeakyRelu(..)))
            .flat_map(|n| n.value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geo = ConvGeometry::new(x, w, b, stride, padding)?;
        let out = kernels::conv2d_forward(&geo, x, w, b);
        self.push("conv2d", out, Op::Conv2d { input, weight, bias, geo }, &[input, weight, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let a = T::lit(alpha);
        let out = self.value(x).map(|v| if v >= T::zero() { v } else { a * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, a), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// Per-channel batch normalization over (batch, height, width).
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can decide whether to fold them into `running`. Eval mode
    /// normalizes with `running`, which must then be present.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<&RunningStats<T>>,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.value(p).shape()),
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input).data();

        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut s, mut s2) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for &v in &x[off..off + plane] {
                            s += v.as_f64();
                        }
                    }
                    let m = s / count as f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for &v in &x[off..off + plane] {
                            let d = v.as_f64() - m;
                            s2 += d * d;
                        }
                    }
                    mean[ch] = T::lit(m);
                    var[ch] = T::lit(s2 / count as f64);
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let rs = running.ok_or(Error::UninitializedRunningStats)?;
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats hold {} channels, input has {c}", rs.mean.len()),
                    ));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };

        let eps = T::lit(cfg.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: mode == Mode::Train };
        let v = self.push("batch_norm", out, op, &[input, gamma, beta])?;
        Ok((v, stats))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), r)?;
        self.push("pixel_shuffle", out, Op::PixelShuffle(x, r), &[x])
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_unshuffle(self.value(x), r)?;
        self.push("pixel_unshuffle", out, Op::PixelUnshuffle(x, r), &[x])
    }

    /// Inverted dropout. `keep_prob == 1` and eval mode return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        if mode == Mode::Eval || keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / keep_prob);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep_prob { scale } else { T::zero() })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { input: x, mask }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, Op::Scale(x, f), &[x])
    }

    /// Mean over all elements of `(a - b)²`, as a rank-0 tensor.
    pub fn mean_square(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_square", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.is_empty() {
            return Err(Error::InvalidArgument("mean_square of empty tensors".into()));
        }
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::lit(sum / ta.len() as f64));
        self.push("mean_square", out, Op::MeanSquare(a, b), &[a, b])
    }

    /// Mean over every axis except the first: (N, ...) → (N).
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().first().ok_or_else(|| Error::shape("mean_per_sample", "rank-0 input"))?;
        let inner = t.len() / n.max(1);
        if inner == 0 {
            return Err(Error::shape("mean_per_sample", "empty sample"));
        }
        let data = t
            .data()
            .chunks_exact(inner)
            .map(|c| T::lit(c.iter().map(|v| v.as_f64()).sum::<f64>() / inner as f64))
            .collect();
        let out = Tensor::new([n], data)?;
        self.push("mean_per_sample", out, Op::MeanPerSample(x), &[x])
    }

    /// Binary cross-entropy of probabilities against a constant label,
    /// averaged over elements. Scores are clamped to `[eps, 1 - eps]`
    /// before the logarithm; clamped entries receive zero gradient.
    pub fn bce_mean(&mut self, scores: Var, target_real: bool, eps: f64) -> Result<Var> {
        let t = self.value(scores);
        if t.is_empty() {
            return Err(Error::InvalidArgument("bce over zero scores".into()));
        }
        let e = eps;
        let sum: f64 = t
            .data()
            .iter()
            .map(|&s| {
                let s = s.as_f64().clamp(e, 1.0 - e);
                if target_real {
                    s.ln()
                } else {
                    (1.0 - s).ln()
                }
            })
            .sum();
        let out = Tensor::scalar(T::lit(-sum / t.len() as f64));
        let op = Op::BceMean { scores, target_real, eps: T::lit(eps) };
        self.push("bce_mean", out, op, &[scores])
    }

    /// Reverse-mode pass from a one-element `loss`. Populates gradients of
    /// every leaf created with `requires_grad`; leaves the loss does not
    /// depend on get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        }

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            for (var, grad) in self.node_backward(idx, &g) {
                self.accumulate(var, grad);
            }
        }

        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, grad: Tensor<T>) {
        match &mut self.grads[var.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += *g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        let zip_map = |src: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = src.data().iter().zip(g.data()).map(|(&s, &gv)| f(s, gv)).collect();
            Tensor::new(src.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geo } => {
                let want = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let grads = kernels::conv2d_backward(geo, self.value(*input), self.value(*weight), g, want);
                if let Some(gx) = grads.input {
                    out.push((*input, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((*weight, gw));
                }
                if let Some(gb) = grads.bias {
                    out.push((*bias, gb));
                }
            }
            Op::Relu(x) => {
                out.push((*x, zip_map(self.value(*x), &|v, gv| if v > T::zero() { gv } else { T::zero() })));
            }
            Op::LeakyRelu(x, a) => {
                let a = *a;
                out.push((*x, zip_map(self.value(*x), &|v, gv| if v >= T::zero() { gv } else { a * gv })));
            }
            Op::Sigmoid(x) => {
                out.push((*x, zip_map(&node.value, &|s, gv| gv * s * (T::one() - s))));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = node.value.dims4().expect("4-D");
                let plane = h * w;
                let m = T::lit((n * plane) as f64);
                let gd = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *train {
                                    k * (gd[i] - (sum_g[ch] + xhat[i] * sum_gx[ch]) / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*input, Tensor::new([n, c, h, w], dx).expect("shape")));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::new([c], sum_gx).expect("shape")));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::new([c], sum_g).expect("shape")));
                }
            }
            Op::PixelShuffle(x, r) => {
                out.push((*x, kernels::pixel_unshuffle(g, *r).expect("inverse shuffle")));
            }
            Op::PixelUnshuffle(x, r) => {
                out.push((*x, kernels::pixel_shuffle(g, *r).expect("inverse unshuffle")));
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                out.push((*input, Tensor::new(g.shape().to_vec(), data).expect("shape")));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                out.push((*x, g.map(|v| v * f)));
            }
            Op::MeanSquare(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = g.data()[0] * T::lit(2.0 / ta.len() as f64);
                let da: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| k * (x - y)).collect();
                if self.wants(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    out.push((*b, Tensor::new(tb.shape().to_vec(), db).expect("shape")));
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::new(ta.shape().to_vec(), da).expect("shape")));
                }
            }
            Op::MeanPerSample(x) => {
                let t = self.value(*x);
                let inner = t.len() / g.len();
                let scale = T::lit(1.0 / inner as f64);
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * scale, inner)).collect();
                out.push((*x, Tensor::new(t.shape().to_vec(), data).expect("shape")));
            }
            Op::BceMean { scores, target_real, eps } => {
                let t = self.value(*scores);
                let k = g.data()[0] / T::lit(t.len() as f64);
                let hi = T::one() - *eps;
                let data = t
                    .data()
                    .iter()
                    .map(|&s| {
                        if s < *eps || s > hi {
                            T::zero()
                        } else if *target_real {
                            -k / s
                        } else {
                            k / (T::one() - s)
                        }
                    })
                    .collect();
                out.push((*scores, Tensor::new(t.shape().to_vec(), data).expect("shape")));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}
