//! A small tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`]
//! for the leaves created with `requires_grad`; intermediate gradients are
//! dropped as soon as they have been propagated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Frozen statistics for style-modulated convolution weights.
#[derive(Clone, Debug)]
pub struct ModulationBasis<T> {
    /// Base filters `W_B`, shape `[c_out, c_in, k, k]`.
    pub base: Tensor<T>,
    /// `W_B - mu`, broadcast over kernel taps.
    pub centered: Vec<T>,
    /// Guarded standard deviation per `(c_out, c_in)` filter.
    pub sigma: Vec<T>,
    /// Mean per `(c_out, c_in)` filter.
    pub mu: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Mean(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    GatherBatch { x: Var, indices: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Arc<Vec<u8>> },
    BceWithLogits { x: Var, target: T },
    ChannelGram(Var),
    MaskedAbsSum { x: Var, mask: Arc<Vec<T>> },
    Modulate { alpha: Var, beta: Var, basis: Arc<ModulationBasis<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in || kh != kw {
            return Err(Error::Dimension(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if self.value(b).numel() != c_out {
            return Err(Error::Dimension(format!(
                "conv bias has {} entries for {c_out} output channels",
                self.value(b).numel()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::Dimension(format!("kernel {kh} does not fit input {h}x{wd} with padding {pad}")));
        }
        let geom = ConvGeometry { c_in, c_out, kernel: kh, stride, pad, h, w: wd };
        let mut out = vec![T::zero(); n * c_out * geom.out_h() * geom.out_w()];
        kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), self.value(b).data(), &geom, &mut out);
        let value = Tensor::new(&[n, c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().copied().sum::<T>() / T::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
            return Err(Error::Dimension(format!("max pooling needs even extents, got {h}x{w}")));
        }
        let mut out = vec![T::zero(); n * c * (h / 2) * (w / 2)];
        let argmax = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w, &mut out);
        let v = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = vec![T::zero(); n * c * h * w * 4];
        kernels::upsample2_forward(self.value(x).data(), n * c, h, w, &mut out);
        let v = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[s * pb..(s + 1) * pb]);
        }
        let v = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Per-sample, per-channel standardization over spatial positions.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (y, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w, eps);
        let v = Tensor::new(&[n, c, h, w], y)?;
        Ok(self.push(v, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Selects samples along the batch axis (indices may repeat).
    pub fn gather_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n.max(1);
        let mut out = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::Dimension(format!("batch index {i} out of {n}")));
            }
            out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::GatherBatch { x, indices: indices.to_vec() }, &[x]))
    }

    /// Mean per-pixel negative log-likelihood of `labels` under softmax(`logits`)
    /// taken over the channel axis. Labels must already be range-checked.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<Vec<u8>>) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        let spatial = h * w;
        if labels.len() != n * spatial {
            return Err(Error::Dimension(format!(
                "{} labels for logits {:?}",
                labels.len(),
                self.value(logits).shape()
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); data.len()];
        let mut total = 0.0f64;
        for s in 0..n {
            for p in 0..spatial {
                let at = |c: usize| s * k * spatial + c * spatial + p;
                let max = (0..k).map(|c| data[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (data[at(c)] - max).exp();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[at(c)] /= z;
                }
                let label = labels[s * spatial + p] as usize;
                total += (z.ln() + max - data[at(label)]).as_f64();
            }
        }
        let loss = T::of(total / (n * spatial).max(1) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, probs, labels }, &[logits]))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: T) -> Var {
        let t = self.value(x);
        let total: f64 = t
            .data()
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                let tg = target.as_f64();
                v.max(0.0) - v * tg + (-v.abs()).exp().ln_1p()
            })
            .sum();
        let loss = T::of(total / t.numel().max(1) as f64);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { x, target }, &[x])
    }

    /// `x_n x_n^T / (h w)` per sample, giving `[n, c, c]`.
    pub fn channel_gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let spatial = h * w;
        let scale = T::one() / T::of(spatial as f64);
        let mut out = vec![T::zero(); n * c * c];
        let data = self.value(x).data();
        for s in 0..n {
            let xs = &data[s * c * spatial..(s + 1) * c * spatial];
            let os = &mut out[s * c * c..(s + 1) * c * c];
            crate::tensor::matmul(c, spatial, c, xs, false, xs, true, T::zero(), os);
            os.iter_mut().for_each(|v| *v *= scale);
        }
        let v = Tensor::new(&[n, c, c], out)?;
        Ok(self.push(v, Op::ChannelGram(x), &[x]))
    }

    /// Mean over the batch of `sum |x ⊙ mask|` for `x` shaped `[n, c, c]`.
    pub fn masked_abs_sum(&mut self, x: Var, mask: Arc<Vec<T>>) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n.max(1);
        if mask.len() != per {
            return Err(Error::Dimension(format!("mask of {} entries for per-sample size {per}", mask.len())));
        }
        let mut total = T::zero();
        for s in 0..n {
            for (v, m) in t.data()[s * per..(s + 1) * per].iter().zip(mask.iter()) {
                total += (*v * *m).abs();
            }
        }
        let loss = total / T::of(n.max(1) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::MaskedAbsSum { x, mask }, &[x]))
    }

    /// Style-modulated filters `alpha ⊙ (W_B - mu) / sigma + beta`.
    ///
    /// Evaluated as `W_B + (alpha/sigma - 1)(W_B - mu) + (beta - mu)`, which is
    /// algebraically identical and returns `W_B` bit-for-bit when
    /// `alpha = sigma` and `beta = mu`.
    pub fn modulate(&mut self, alpha: Var, beta: Var, basis: Arc<ModulationBasis<T>>) -> Result<Var> {
        let (c_out, c_in, kh, kw) = basis.base.dims4()?;
        let filters = c_out * c_in;
        for v in [alpha, beta] {
            if self.value(v).numel() != filters {
                return Err(Error::Validation(format!(
                    "style parameter of {} entries for a {c_out}x{c_in} layer",
                    self.value(v).numel()
                )));
            }
        }
        let taps = kh * kw;
        let a = self.value(alpha).data();
        let b = self.value(beta).data();
        let base = basis.base.data();
        let mut out = vec![T::zero(); base.len()];
        for f in 0..filters {
            let gain = a[f] / basis.sigma[f] - T::one();
            let shift = b[f] - basis.mu[f];
            for t in 0..taps {
                let i = f * taps + t;
                out[i] = base[i] + gain * basis.centered[i] + shift;
            }
        }
        let v = Tensor::new(basis.base.shape(), out)?;
        Ok(self.push(v, Op::Modulate { alpha, beta, basis }, &[alpha, beta]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| Tensor::zeros(self.nodes[target.0].value.shape()));
        f(slot.data_mut());
    }

    /// Like [`Self::accumulate`] but moves `delta` in when the slot is still empty.
    fn accumulate_owned(&self, grads: &mut [Option<Tensor<T>>], target: Var, delta: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(slot) => add_into(slot.data_mut(), &delta),
            slot => {
                let shape = self.nodes[target.0].value.shape();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches its node"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut dx = self.requires_grad(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dw = self.requires_grad(*w).then(|| vec![T::zero(); wd.len()]);
                let mut db = self.requires_grad(*b).then(|| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(xd, n, wd, geom, gd, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (var, delta) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(delta) = delta {
                        self.accumulate_owned(grads, var, delta);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, gd));
                self.accumulate(grads, *b, |acc| add_into(acc, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, gd));
                self.accumulate(grads, *b, |acc| acc.iter_mut().zip(gd).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |acc| acc.iter_mut().zip(gd).for_each(|(d, &v)| *d += v * *s));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        if av[i] > T::zero() {
                            acc[i] += gd[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += if av[i] > T::zero() { gd[i] } else { gd[i] * *slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * sign(av[i]);
                    }
                });
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).numel().max(1) as f64);
                let share = gd[0] / n;
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|d| *d += share));
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |acc| {
                    for (o, &src) in argmax.iter().enumerate() {
                        acc[src as usize] += gd[o];
                    }
                });
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                self.accumulate(grads, *x, |acc| kernels::upsample2_backward(gd, n * c, h, w, acc));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("4-d");
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                self.accumulate(grads, *a, |acc| {
                    for s in 0..n {
                        add_into(&mut acc[s * pa..(s + 1) * pa], &gd[s * (pa + pb)..s * (pa + pb) + pa]);
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for s in 0..n {
                        add_into(&mut acc[s * pb..(s + 1) * pb], &gd[s * (pa + pb) + pa..(s + 1) * (pa + pb)]);
                    }
                });
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-d");
                let y = node.value.data();
                self.accumulate(grads, *x, |acc| kernels::instance_norm_backward(y, inv_std, gd, h * w, acc));
            }
            Op::GatherBatch { x, indices } => {
                let per = node.value.numel() / indices.len().max(1);
                self.accumulate(grads, *x, |acc| {
                    for (o, &i) in indices.iter().enumerate() {
                        add_into(&mut acc[i * per..(i + 1) * per], &gd[o * per..(o + 1) * per]);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let (n, k, h, w) = self.value(*logits).dims4().expect("4-d");
                let spatial = h * w;
                let share = gd[0] / T::of((n * spatial).max(1) as f64);
                self.accumulate(grads, *logits, |acc| {
                    for s in 0..n {
                        for c in 0..k {
                            for p in 0..spatial {
                                let i = s * k * spatial + c * spatial + p;
                                let hit = if labels[s * spatial + p] as usize == c { T::one() } else { T::zero() };
                                acc[i] += share * (probs[i] - hit);
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                let share = gd[0] / T::of(xv.len().max(1) as f64);
                self.accumulate(grads, *x, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += share * (sigmoid(xv[i]) - *target);
                    }
                });
            }
            Op::ChannelGram(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                let spatial = h * w;
                let scale = T::one() / T::of(spatial as f64);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    let mut sym = vec![T::zero(); c * c];
                    for s in 0..n {
                        let gs = &gd[s * c * c..(s + 1) * c * c];
                        for i in 0..c {
                            for j in 0..c {
                                sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) * scale;
                            }
                        }
                        let xs = &xv[s * c * spatial..(s + 1) * c * spatial];
                        let ds = &mut acc[s * c * spatial..(s + 1) * c * spatial];
                        crate::tensor::matmul(c, c, spatial, &sym, false, xs, false, T::one(), ds);
                    }
                });
            }
            Op::MaskedAbsSum { x, mask } => {
                let xv = self.value(*x).data();
                let per = mask.len();
                let n = xv.len() / per.max(1);
                let share = gd[0] / T::of(n.max(1) as f64);
                self.accumulate(grads, *x, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += share * mask[i % per] * sign(xv[i] * mask[i % per]);
                    }
                });
            }
            Op::Modulate { alpha, beta, basis } => {
                let filters = basis.sigma.len();
                let taps = basis.base.numel() / filters.max(1);
                self.accumulate(grads, *alpha, |acc| {
                    for f in 0..filters {
                        let mut sum = T::zero();
                        for t in 0..taps {
                            sum += gd[f * taps + t] * basis.centered[f * taps + t];
                        }
                        acc[f] += sum / basis.sigma[f];
                    }
                });
                self.accumulate(grads, *beta, |acc| {
                    for f in 0..filters {
                        acc[f] += gd[f * taps..(f + 1) * taps].iter().copied().sum::<T>();
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], delta: &[T]) {
    acc.iter_mut().zip(delta).for_each(|(a, &d)| *a += d);
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
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
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                let down = f(&p);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        let num: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        assert!(num / den < tol, "relative error {} ({analytic:?} vs {numeric:?})", num / den);
    }

    fn input(shape: &[usize], seed: u64) -> Vec<f64> {
        let n: usize = shape.iter().product();
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    /// Runs `build` on a fresh graph with `x` as the only differentiable leaf.
    fn check(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x = input(shape, 3);
        let eval = |data: &[f64]| {
            let mut g = Graph::new();
            let v = g.leaf(Tensor::new(shape, data.to_vec()).unwrap(), true);
            let out = build(&mut g, v);
            (g, v, out)
        };
        let (g, v, out) = eval(&x);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(v).unwrap().data().to_vec();
        let numeric = numeric_grad(&x, |d| {
            let (g, _, out) = eval(d);
            g.scalar(out)
        });
        assert_close(&analytic, &numeric, 1e-6);
    }

    fn weights(g: &mut Graph<f64>, shape: &[usize]) -> Var {
        g.constant(Tensor::new(shape, input(shape, 11)).unwrap())
    }

    #[test]
    fn conv_input_gradient() {
        check(&[2, 2, 5, 5], |g, x| {
            let w = weights(g, &[3, 2, 3, 3]);
            let b = weights(g, &[3]);
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
        check(&[1, 2, 6, 6], |g, x| {
            let w = weights(g, &[2, 2, 4, 4]);
            let b = weights(g, &[2]);
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn conv_weight_gradient() {
        check(&[3, 2, 3, 3], |g, w| {
            let x = weights(g, &[2, 2, 5, 5]);
            let b = weights(g, &[3]);
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn pooling_upsampling_concat_gradients() {
        check(&[1, 2, 4, 4], |g, x| {
            let p = g.maxpool2(x).unwrap();
            let u = g.upsample2(p).unwrap();
            let c = g.concat_channels(u, x).unwrap();
            let s = g.sigmoid(c);
            let y = g.mul(s, c).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn norm_and_activation_gradients() {
        check(&[2, 3, 3, 3], |g, x| {
            let n = g.instance_norm(x, 1e-5).unwrap();
            let l = g.leaky_relu(n, 0.2);
            let r = g.relu(x);
            let s = g.add(l, r).unwrap();
            let w = weights(g, &[2, 3, 3, 3]);
            let y = g.mul(s, w).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn loss_gradients() {
        let labels = Arc::new(vec![0u8, 3, 1, 2, 2, 0, 1, 3]);
        check(&[2, 4, 2, 2], move |g, x| g.softmax_cross_entropy(x, labels.clone()).unwrap());
        check(&[2, 1, 3, 3], |g, x| g.bce_with_logits(x, 1.0));
        check(&[2, 1, 3, 3], |g, x| g.bce_with_logits(x, 0.0));
    }

    #[test]
    fn gram_and_masked_sum_gradients() {
        let mask = Arc::new(vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        check(&[2, 3, 2, 2], move |g, x| {
            let gather = g.gather_batch(x, &[1, 0, 1]).unwrap();
            let gram = g.channel_gram(gather).unwrap();
            g.masked_abs_sum(gram, mask.clone()).unwrap()
        });
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let l = g.softmax_cross_entropy(x, Arc::new(vec![0, 1, 2, 3])).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }
}
