//! Encoder-decoder segmentation network with residual blocks, skip connections,
//! and a feature tap after every max-pooling layer.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datagen::{LabeledSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvSpec, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Channel width per encoder stage; one max-pooling layer follows each stage.
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64, 128], in_channels: 1, classes: NUM_CLASSES }
    }
}

impl SegConfig {
    pub fn with_widths(widths: &[usize]) -> Self {
        Self { widths: widths.to_vec(), ..Self::default() }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Every convolution in parameter order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let mut c = self.in_channels;
        for (l, &w) in self.widths.iter().enumerate() {
            specs.push(ConvSpec::same3(format!("enc{l}.in"), c, w));
            specs.push(ConvSpec::same3(format!("enc{l}.res1"), w, w));
            specs.push(ConvSpec::same3(format!("enc{l}.res2"), w, w));
            c = w;
        }
        specs.push(ConvSpec::same3("mid.in", c, c));
        specs.push(ConvSpec::same3("mid.res1", c, c));
        specs.push(ConvSpec::same3("mid.res2", c, c));
        for (l, &w) in self.widths.iter().enumerate().rev() {
            specs.push(ConvSpec::same3(format!("dec{l}.up"), c, w));
            specs.push(ConvSpec::same3(format!("dec{l}.fuse"), 2 * w, w));
            c = w;
        }
        specs.push(ConvSpec::new("head", c, self.classes, 1, 1, 0));
        specs
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let mut total = 0;
        let mut c = self.in_channels;
        for &w in &self.widths {
            total += conv(c, w, 3) + 2 * conv(w, w, 3);
            c = w;
        }
        total += 3 * conv(c, c, 3);
        for &w in self.widths.iter().rev() {
            total += conv(c, w, 3) + conv(2 * w, w, 3);
            c = w;
        }
        total + conv(c, self.classes, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid segmentation config {self:?}")));
        }
        Ok(())
    }
}

/// Graph outputs of one forward pass.
pub struct SegForward {
    pub logits: Var,
    /// One tap per pooling stage, in encoder order.
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub config: SegConfig,
    pub params: ParamSet<T>,
}

/// Applies conv layer `layer` of `specs` using bound parameters.
pub(crate) fn conv<T: Scalar>(
    g: &mut Graph<T>,
    specs: &[ConvSpec],
    bound: &Bound,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let s = &specs[layer];
    g.conv2d(x, bound.vars[2 * layer], bound.vars[2 * layer + 1], s.stride, s.pad)
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::init_convs(&config.conv_specs(), &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: SegConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.conv_specs();
        if params.len() != 2 * specs.len() {
            return Err(Error::Validation(format!("{} tensors for {} conv layers", params.len(), specs.len())));
        }
        for (i, spec) in specs.iter().enumerate() {
            if params.tensors()[2 * i].shape() != spec.weight_shape() {
                return Err(Error::Validation(format!("shape mismatch for {}", spec.name)));
            }
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass for a `[n, 1, h, w]` input.
    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<SegForward> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let factor = 1 << self.config.stages();
        if c != self.config.in_channels || h % factor != 0 || w % factor != 0 || h == 0 {
            return Err(Error::Dimension(format!(
                "input {:?} incompatible with {} channels and {} pooling stages",
                g.value(x).shape(),
                self.config.in_channels,
                self.config.stages()
            )));
        }
        let specs = self.config.conv_specs();
        let eps = T::of(NORM_EPS);
        let mut layer = 0;
        let mut next = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let out = conv(g, &specs, bound, layer, x);
            layer += 1;
            out
        };
        let block =
            |g: &mut Graph<T>, next: &mut dyn FnMut(&mut Graph<T>, Var) -> Result<Var>, x: Var| -> Result<Var> {
                let h = next(g, x)?;
                let h = g.instance_norm(h, eps)?;
                let h = g.relu(h);
                let r = next(g, h)?;
                let r = g.instance_norm(r, eps)?;
                let r = g.relu(r);
                let r = next(g, r)?;
                let r = g.instance_norm(r, eps)?;
                let sum = g.add(h, r)?;
                Ok(g.relu(sum))
            };
        let mut skips = Vec::with_capacity(self.config.stages());
        let mut taps = Vec::with_capacity(self.config.stages());
        let mut h = x;
        for _ in 0..self.config.stages() {
            let s = block(g, &mut next, h)?;
            skips.push(s);
            h = g.maxpool2(s)?;
            taps.push(h);
        }
        h = block(g, &mut next, h)?;
        for skip in skips.into_iter().rev() {
            let up = g.upsample2(h)?;
            let up = next(g, up)?;
            let up = g.instance_norm(up, eps)?;
            let up = g.relu(up);
            let cat = g.concat_channels(up, skip)?;
            let fused = next(g, cat)?;
            let fused = g.instance_norm(fused, eps)?;
            h = g.relu(fused);
        }
        let logits = next(g, h)?;
        Ok(SegForward { logits, taps })
    }

    /// Inference forward pass returning logits and the pooled feature taps.
    pub fn forward(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward_graph(&mut g, &bound, x)?;
        let taps = out.taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((g.value(out.logits).clone(), taps))
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
        let (logits, _) = self.forward(images)?;
        argmax_labels(&logits)
    }

    /// Predicts label maps for samples, `batch` images at a time.
    pub fn predict_samples(&self, samples: &[LabeledSample], batch: usize) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            let refs: Vec<&LabeledSample> = chunk.iter().collect();
            out.extend(self.predict(&images_tensor(&refs)?)?);
        }
        Ok(out)
    }
}

/// Per-pixel argmax over classes; ties resolve to the lower class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let (n, k, h, w) = logits.dims4()?;
    let spatial = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|s| {
            (0..spatial)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(s * k + c) * spatial + p] > d[(s * k + best) * spatial + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Mean per-pixel cross-entropy after checking every label is a valid class.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: Arc<Vec<u8>>) -> Result<Var> {
    let classes = g.value(logits).dims4()?.1;
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= classes) {
        return Err(Error::Validation(format!("label {bad} outside 0..{classes}")));
    }
    g.softmax_cross_entropy(logits, labels)
}

/// Stacks sample images into `[n, 1, size, size]`.
pub fn images_tensor<T: Scalar>(samples: &[&LabeledSample]) -> Result<Tensor<T>> {
    let size = samples.first().map(|s| s.size).unwrap_or(0);
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        if s.size != size {
            return Err(Error::Dimension("mixed image sizes in one batch".into()));
        }
        data.extend(s.image.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[samples.len(), 1, size, size], data)
}

pub fn labels_of(samples: &[&LabeledSample]) -> Arc<Vec<u8>> {
    Arc::new(samples.iter().flat_map(|s| s.label.iter().copied()).collect())
}
