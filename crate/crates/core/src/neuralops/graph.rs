//! Reverse-mode automatic differentiation over a recorded tape.

use super::conv::{self, ConvGeometry};
use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        batch: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
        layout: [usize; 3],
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        in_dims: [usize; 3],
        factor: [usize; 3],
        planes: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        in_features: usize,
        out_features: usize,
    },
    GlobalAvgPool {
        input: Var,
        spatial: usize,
    },
    Concat {
        a: Var,
        b: Var,
        planes: [usize; 2],
        batch: usize,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Bce {
        prob: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// A recorded computation. Nodes are appended in evaluation order, which is
/// therefore a topological order for the reverse pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf tensor. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every gradient so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Stride-1 3D cross-correlation with zero padding.
    ///
    /// `input` is `N x C_in x D x H x W`, `kernel` is
    /// `C_out x C_in x kd x kh x kw`, `bias` has `C_out` values.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, pad: [usize; 3]) -> Result<Var> {
        let (batch, c_in, dims) = self.value(input).dims5()?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc, kd, kh, kw] = ks[..] else {
            return Err(shape_err!("conv kernel must be 5-D, got {ks:?}"));
        };
        if kc != c_in {
            return Err(shape_err!("kernel expects {kc} input channels, input has {c_in}"));
        }
        if self.value(bias).len() != c_out {
            return Err(shape_err!("bias needs {c_out} values, got {}", self.value(bias).len()));
        }
        let kernel_dims = [kd, kh, kw];
        let mut output = [0usize; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * pad[a];
            if padded < kernel_dims[a] {
                return Err(shape_err!("kernel {kernel_dims:?} larger than padded input {dims:?}"));
            }
            output[a] = padded - kernel_dims[a] + 1;
        }
        let geom = ConvGeometry {
            c_in,
            c_out,
            input: dims,
            kernel: kernel_dims,
            pad,
            output,
        };
        let out = conv::forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new([batch, c_out, output[0], output[1], output[2]], out)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
                batch,
            },
        ))
    }

    /// Per-channel batch normalization over (N, D, H, W).
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into `stats` with its momentum. With a batch of one
    /// the statistics come from a single sample's spatial extent only.
    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let (n, c, dims) = self.value(input).dims5()?;
        let s: usize = dims.iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c || stats.mean.len() != c {
            return Err(shape_err!("batch norm parameters do not match {c} channels"));
        }
        if !(stats.eps > 0.0) {
            return Err(invalid!("batch norm epsilon must be positive"));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let m = (n * s) as f64;
        let mut mean = vec![0.0f64; c];
        let mut inv_std = vec![0.0f64; c];
        let train = mode == BatchNormMode::Train;
        for ch in 0..c {
            let (mu, var) = if train {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += x[(i * c + ch) * s..(i * c + ch + 1) * s].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for i in 0..n {
                    sq += x[(i * c + ch) * s..(i * c + ch + 1) * s]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                (mu, sq / m)
            } else {
                (stats.mean[ch].as_f64(), stats.var[ch].as_f64())
            };
            mean[ch] = mu;
            inv_std[ch] = 1.0 / (var + stats.eps).sqrt();
            if train {
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let mom = stats.momentum;
                stats.mean[ch] = T::from_f64((1.0 - mom) * stats.mean[ch].as_f64() + mom * mu);
                stats.var[ch] = T::from_f64((1.0 - mom) * stats.var[ch].as_f64() + mom * unbiased);
            }
        }
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let (gc, bc) = (g[ch].as_f64(), b[ch].as_f64());
                for j in base..base + s {
                    let h = (x[j].as_f64() - mean[ch]) * inv_std[ch];
                    xhat[j] = T::from_f64(h);
                    out[j] = T::from_f64(gc * h + bc);
                }
            }
        }
        let shape = self.value(input).shape().to_vec();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                layout: [n, c, s],
            },
        ))
    }

    /// Max over non-overlapping windows; spatial dims must be divisible.
    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let (n, c, dims) = self.value(input).dims5()?;
        if (0..3).any(|a| window[a] == 0 || dims[a] % window[a] != 0) {
            return Err(shape_err!("pool window {window:?} does not divide {dims:?}"));
        }
        let [d, h, w] = dims;
        let out_dims = [d / window[0], h / window[1], w / window[2]];
        let [od, oh, ow] = out_dims;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + ((oz * window[0]) * h + oy * window[1]) * w + ox * window[2];
                        for dz in 0..window[0] {
                            for dy in 0..window[1] {
                                for dx in 0..window[2] {
                                    let j = base
                                        + ((oz * window[0] + dz) * h + oy * window[1] + dy) * w
                                        + ox * window[2]
                                        + dx;
                                    if x[j] > x[best] {
                                        best = j;
                                    }
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new([n, c, od, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::MaxPool { input, argmax }))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample_nearest3d(&mut self, input: Var, factor: [usize; 3]) -> Result<Var> {
        let (n, c, dims) = self.value(input).dims5()?;
        if factor.contains(&0) {
            return Err(invalid!("upsample factors must be at least 1, got {factor:?}"));
        }
        let [d, h, w] = dims;
        let [fd, fh, fw] = factor;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * d * h * w..];
            let dst = &mut out[plane * od * oh * ow..(plane + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = &src[((z / fd) * h + y / fh) * w..];
                    let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    for (x_out, v) in drow.iter_mut().enumerate() {
                        *v = srow[x_out / fw];
                    }
                }
            }
        }
        let value = Tensor::new([n, c, od, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            rg,
            Op::Upsample {
                input,
                in_dims: dims,
                factor,
                planes: n * c,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, rg, Op::Sigmoid { input })
    }

    /// Affine map `y = x W^T + b`. `x` is flattened to `N x F`; `W` is `O x F`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let batch = xs[0];
        let in_features = self.value(input).len() / batch;
        let ws = self.value(weight).shape().to_vec();
        let [out_features, wf] = ws[..] else {
            return Err(shape_err!("linear weight must be 2-D, got {ws:?}"));
        };
        if wf != in_features {
            return Err(shape_err!("linear weight expects {wf} features, input has {in_features}"));
        }
        if self.value(bias).len() != out_features {
            return Err(shape_err!("linear bias needs {out_features} values"));
        }
        let mut out = vec![T::zero(); batch * out_features];
        super::tensor::matmul(
            batch,
            in_features,
            out_features,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(out_features) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new([batch, out_features], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                in_features,
                out_features,
            },
        ))
    }

    /// Mean over the spatial axes: `N x C x D x H x W` to `N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, dims) = self.value(input).dims5()?;
        let spatial: usize = dims.iter().product();
        let out = self
            .value(input)
            .data()
            .chunks_exact(spatial)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64))
            .collect();
        let value = Tensor::new([n, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input, spatial }))
    }

    /// Concatenates two feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, da) = self.value(a).dims5()?;
        let (nb, cb, db) = self.value(b).dims5()?;
        if na != nb || da != db {
            return Err(shape_err!(
                "cannot concatenate {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let s: usize = da.iter().product();
        let (pa, pb) = (ca * s, cb * s);
        let mut out = Vec::with_capacity(na * (pa + pb));
        for i in 0..na {
            out.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let value = Tensor::new([na, ca + cb, da[0], da[1], da[2]], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                a,
                b,
                planes: [pa, pb],
                batch: na,
            },
        ))
    }

    /// Mean squared error against a fixed target, over every element or only
    /// where `mask` is set.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err!("prediction {:?} vs target {:?}", p.shape(), target.shape()));
        }
        if let Some(m) = mask {
            if m.len() != p.len() {
                return Err(shape_err!("mask has {} entries for {} values", m.len(), p.len()));
            }
        }
        let count = mask.map_or(p.len(), |m| m.iter().filter(|&&b| b).count());
        let mut sum = 0.0f64;
        for (i, (&a, &t)) in p.data().iter().zip(target.data()).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                sum += (a.as_f64() - t.as_f64()).powi(2);
            }
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            rg,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against `{0, 1}` labels,
    /// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, prob: Var, labels: &[T]) -> Result<Var> {
        let p = self.value(prob);
        if p.len() != labels.len() {
            return Err(shape_err!("{} probabilities for {} labels", p.len(), labels.len()));
        }
        let mut sum = 0.0;
        for (&pi, &yi) in p.data().iter().zip(labels) {
            let pc = pi.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = yi.as_f64();
            sum -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = sum / labels.len() as f64;
        let rg = self.rg(prob);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            rg,
            Op::Bce {
                prob,
                labels: labels.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"));
            }
        }
    }

    /// Propagates gradients from the scalar `loss` to every node that requires
    /// them, accumulating over fan-out. Errors if called twice without
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, grad.data());
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let mut gi = self.rg(*input).then(|| vec![T::zero(); self.value(*input).len()]);
                let mut gk = self.rg(*kernel).then(|| vec![T::zero(); self.value(*kernel).len()]);
                let mut gb = self.rg(*bias).then(|| vec![T::zero(); self.value(*bias).len()]);
                conv::backward(
                    geom,
                    *batch,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dy,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(gi.map(|g| (*input, g)));
                out.extend(gk.map(|g| (*kernel, g)));
                out.extend(gb.map(|g| (*bias, g)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                layout: [n, c, s],
            } => {
                let (n, c, s) = (*n, *c, *s);
                let m = (n * s) as f64;
                let gamma_v = self.value(*gamma).data();
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            let d = dy[j].as_f64();
                            sum_dy[ch] += d;
                            sum_dy_xhat[ch] += d * xhat[j].as_f64();
                        }
                    }
                }
                if self.rg(*input) {
                    let mut gx = vec![T::zero(); dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let k = gamma_v[ch].as_f64() * inv_std[ch];
                            for j in base..base + s {
                                let d = dy[j].as_f64();
                                gx[j] = T::from_f64(if *train {
                                    k * (d - sum_dy[ch] / m - xhat[j].as_f64() * sum_dy_xhat[ch] / m)
                                } else {
                                    k * d
                                });
                            }
                        }
                    }
                    out.push((*input, gx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect()));
                }
                if self.rg(*beta) {
                    out.push((*beta, sum_dy.iter().map(|&v| T::from_f64(v)).collect()));
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.rg(*input) {
                    let mut gx = vec![T::zero(); self.value(*input).len()];
                    for (&j, &d) in argmax.iter().zip(dy) {
                        gx[j] += d;
                    }
                    out.push((*input, gx));
                }
            }
            Op::Upsample {
                input,
                in_dims: [d, h, w],
                factor: [fd, fh, fw],
                planes,
            } => {
                if self.rg(*input) {
                    let (d, h, w) = (*d, *h, *w);
                    let (od, oh, ow) = (d * fd, h * fh, w * fw);
                    let mut gx = vec![T::zero(); planes * d * h * w];
                    for plane in 0..*planes {
                        let src = &dy[plane * od * oh * ow..(plane + 1) * od * oh * ow];
                        let dst = &mut gx[plane * d * h * w..(plane + 1) * d * h * w];
                        for z in 0..od {
                            for y in 0..oh {
                                let row = ((z / fd) * h + y / fh) * w;
                                for (x, &g) in src[(z * oh + y) * ow..(z * oh + y + 1) * ow].iter().enumerate() {
                                    dst[row + x / fw] += g;
                                }
                            }
                        }
                    }
                    out.push((*input, gx));
                }
            }
            Op::Relu { input } => {
                if self.rg(*input) {
                    let x = self.value(*input).data();
                    let gx = x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                    out.push((*input, gx));
                }
            }
            Op::Sigmoid { input } => {
                if self.rg(*input) {
                    let y = self.nodes[i].value.data();
                    let gx = y.iter().zip(dy).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                    out.push((*input, gx));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                in_features,
                out_features,
            } => {
                let (nb, fi, fo) = (*batch, *in_features, *out_features);
                if self.rg(*input) {
                    let mut gx = vec![T::zero(); nb * fi];
                    super::tensor::matmul(nb, fo, fi, dy, false, self.value(*weight).data(), false, &mut gx, false);
                    out.push((*input, gx));
                }
                if self.rg(*weight) {
                    let mut gw = vec![T::zero(); fo * fi];
                    super::tensor::matmul(fo, nb, fi, dy, true, self.value(*input).data(), false, &mut gw, false);
                    out.push((*weight, gw));
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); fo];
                    for row in dy.chunks_exact(fo) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::GlobalAvgPool { input, spatial } => {
                if self.rg(*input) {
                    let scale = T::from_f64(1.0 / *spatial as f64);
                    let gx = dy
                        .iter()
                        .flat_map(|&d| std::iter::repeat_n(d * scale, *spatial))
                        .collect();
                    out.push((*input, gx));
                }
            }
            Op::Concat {
                a,
                b,
                planes: [pa, pb],
                batch,
            } => {
                let (pa, pb) = (*pa, *pb);
                let split = |first: bool| {
                    (0..*batch)
                        .flat_map(|k| {
                            let base = k * (pa + pb);
                            if first {
                                dy[base..base + pa].iter()
                            } else {
                                dy[base + pa..base + pa + pb].iter()
                            }
                        })
                        .copied()
                        .collect::<Vec<T>>()
                };
                if self.rg(*a) {
                    out.push((*a, split(true)));
                }
                if self.rg(*b) {
                    out.push((*b, split(false)));
                }
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                if self.rg(*pred) {
                    let p = self.value(*pred).data();
                    let scale = if *count == 0 { 0.0 } else { 2.0 * dy[0].as_f64() / *count as f64 };
                    let gx = p
                        .iter()
                        .zip(target)
                        .enumerate()
                        .map(|(j, (&a, &t))| {
                            if mask.as_ref().is_none_or(|m| m[j]) {
                                T::from_f64(scale * (a.as_f64() - t.as_f64()))
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push((*pred, gx));
                }
            }
            Op::Bce { prob, labels } => {
                if self.rg(*prob) {
                    let n = labels.len() as f64;
                    let p = self.value(*prob).data();
                    // straight-through clamp: the derivative is evaluated at the clamped probability
                    let gx = p
                        .iter()
                        .zip(labels)
                        .map(|(&pi, &yi)| {
                            let pc = pi.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            let y = yi.as_f64();
                            T::from_f64(dy[0].as_f64() * (-y / pc + (1.0 - y) / (1.0 - pc)) / n)
                        })
                        .collect();
                    out.push((*prob, gx));
                }
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
