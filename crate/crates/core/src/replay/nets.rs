//! Paired label-to-image generator and conditional patch discriminator.
//!
//! Both networks are built from convolutions only (normalization has no
//! affine parameters), so per-layer style parameters cover every learnable.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::NORM_EPS;
use crate::datagen::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::tensor::{Scalar, Tensor};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Generator encoder widths; every stage after the first halves the resolution.
    pub widths: Vec<usize>,
    /// Widths of the two strided discriminator layers.
    pub disc_widths: [usize; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64], disc_widths: [16, 32] }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) || self.disc_widths.contains(&0) {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        (1 << (self.widths.len() - 1)).max(4)
    }

    pub fn generator_specs(&self) -> Vec<ConvSpec> {
        let w = &self.widths;
        let mut specs = vec![ConvSpec::same3("g.e0", NUM_CLASSES, w[0])];
        for l in 1..w.len() {
            specs.push(ConvSpec::new(format!("g.e{l}"), w[l - 1], w[l], 4, 2, 1));
        }
        let mut c = w[w.len() - 1];
        for l in (0..w.len() - 1).rev() {
            specs.push(ConvSpec::same3(format!("g.d{l}"), c, w[l]));
            c = 2 * w[l];
        }
        specs.push(ConvSpec::same3("g.out", c, 1));
        specs
    }

    pub fn discriminator_specs(&self) -> Vec<ConvSpec> {
        let [a, b] = self.disc_widths;
        vec![
            ConvSpec::new("d.c0", NUM_CLASSES + 1, a, 4, 2, 1),
            ConvSpec::new("d.c1", a, b, 4, 2, 1),
            ConvSpec::same3("d.out", b, 1),
        ]
    }
}

/// `(weight, bias)` graph handles for every conv layer of one network.
pub type LayerVars = Vec<(Var, Var)>;

/// Generator forward: one-hot labels `[n, 4, h, w]` to images `[n, 1, h, w]` in `[0, 1]`.
pub fn generator_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &GeneratorConfig,
    layers: &LayerVars,
    onehot: Var,
) -> Result<Var> {
    let specs = cfg.generator_specs();
    let (_, c, h, w) = g.value(onehot).dims4()?;
    let m = cfg.size_multiple();
    if c != NUM_CLASSES || h % m != 0 || w % m != 0 {
        return Err(Error::Dimension(format!(
            "generator input {:?} needs {NUM_CLASSES} channels and extents divisible by {m}",
            g.value(onehot).shape()
        )));
    }
    let eps = T::of(NORM_EPS);
    let leak = T::of(LEAK);
    let depth = cfg.widths.len();
    let mut skips = Vec::with_capacity(depth);
    let mut x = onehot;
    for (l, spec) in specs.iter().enumerate().take(depth) {
        let (wv, bv) = layers[l];
        x = g.conv2d(x, wv, bv, spec.stride, spec.pad)?;
        x = g.instance_norm(x, eps)?;
        x = g.leaky_relu(x, leak);
        skips.push(x);
    }
    skips.pop();
    for (l, spec) in specs.iter().enumerate().skip(depth).take(depth - 1) {
        let (wv, bv) = layers[l];
        let up = g.upsample2(x)?;
        let y = g.conv2d(up, wv, bv, spec.stride, spec.pad)?;
        let y = g.instance_norm(y, eps)?;
        let y = g.relu(y);
        let skip = skips.pop().expect("one skip per decoder stage");
        x = g.concat_channels(y, skip)?;
    }
    let last = specs.len() - 1;
    let (wv, bv) = layers[last];
    let out = g.conv2d(x, wv, bv, specs[last].stride, specs[last].pad)?;
    Ok(g.sigmoid(out))
}

/// Patch discriminator over `concat(onehot, image)`; returns per-patch logits.
pub fn discriminator_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &GeneratorConfig,
    layers: &LayerVars,
    onehot: Var,
    image: Var,
) -> Result<Var> {
    let specs = cfg.discriminator_specs();
    let eps = T::of(NORM_EPS);
    let leak = T::of(LEAK);
    let x = g.concat_channels(onehot, image)?;
    let x = g.conv2d(x, layers[0].0, layers[0].1, specs[0].stride, specs[0].pad)?;
    let x = g.leaky_relu(x, leak);
    let x = g.conv2d(x, layers[1].0, layers[1].1, specs[1].stride, specs[1].pad)?;
    let x = g.instance_norm(x, eps)?;
    let x = g.leaky_relu(x, leak);
    g.conv2d(x, layers[2].0, layers[2].1, specs[2].stride, specs[2].pad)
}

/// One-hot encodes concatenated label maps of `size x size` into `[n, 4, size, size]`.
pub fn onehot<T: Scalar>(labels: &[u8], size: usize) -> Result<Tensor<T>> {
    let spatial = size * size;
    if spatial == 0 || labels.len() % spatial != 0 {
        return Err(Error::Dimension(format!("{} labels for {size}x{size} maps", labels.len())));
    }
    let n = labels.len() / spatial;
    let mut data = vec![T::zero(); n * NUM_CLASSES * spatial];
    for (i, &c) in labels.iter().enumerate() {
        if c as usize >= NUM_CLASSES {
            return Err(Error::Validation(format!("label {c} outside 0..{NUM_CLASSES}")));
        }
        let (s, p) = (i / spatial, i % spatial);
        data[(s * NUM_CLASSES + c as usize) * spatial + p] = T::one();
    }
    Tensor::new(&[n, NUM_CLASSES, size, size], data)
}
