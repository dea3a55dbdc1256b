use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datagen::LabeledSample;
use crate::error::{Error, Result};
use crate::nn::{permutation, Adam, Bound, ParamSet};
use crate::tensor::Scalar;

use super::nets::{discriminator_forward, generator_forward, onehot, GeneratorConfig, LayerVars};
use super::style::{plain_layer_vars, ModulatedNet, StyleParams};

/// Adversarial training budget and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Epochs for the base pair.
    pub epochs: usize,
    /// Epochs for each later domain's style parameters.
    pub style_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate for style parameters.
    pub style_lr: f64,
    pub beta1: f64,
    /// Weight of the L1 reconstruction term; zero gives the pure adversarial objective.
    pub l1_weight: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self { epochs: 60, style_epochs: 60, batch: 16, lr: 2e-4, style_lr: 2e-3, beta1: 0.5, l1_weight: 10.0 }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.style_lr > 0.0) || !(self.l1_weight >= 0.0) {
            return Err(Error::Config(format!("invalid GAN config {self:?}")));
        }
        Ok(())
    }
}

/// Base generator `G_B` with its discriminator `F_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPair<T> {
    pub config: GeneratorConfig,
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
    frozen: bool,
}

/// Mean losses per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
}

impl<T: Scalar> GeneratorPair<T> {
    /// Untrained, unfrozen pair.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = ParamSet::init_convs(&config.generator_specs(), &mut rng);
        let discriminator = ParamSet::init_convs(&config.discriminator_specs(), &mut rng);
        Ok(Self { config, generator, discriminator, frozen: false })
    }

    /// Rebuilds a frozen pair from stored parameters.
    pub fn from_params(config: GeneratorConfig, generator: ParamSet<T>, discriminator: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expect = |specs: Vec<crate::nn::ConvSpec>, p: &ParamSet<T>| {
            let shapes: Vec<Vec<usize>> =
                specs.iter().flat_map(|s| [s.weight_shape().to_vec(), vec![s.c_out]]).collect();
            let got: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
            if shapes != got {
                return Err(Error::Validation("stored generator parameters do not match the config".into()));
            }
            Ok(())
        };
        expect(config.generator_specs(), &generator)?;
        expect(config.discriminator_specs(), &discriminator)?;
        Ok(Self { config, generator, discriminator, frozen: true })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Renders images for label maps in inference mode; `style = None` uses `G_B`.
    pub fn render(&self, style: Option<&StyleParams<T>>, labels: &[&[u8]], size: usize) -> Result<Vec<Vec<f32>>> {
        let modulated = style.map(|_| ModulatedNet::new(&self.generator)).transpose()?;
        let mut out = Vec::with_capacity(labels.len());
        for chunk in labels.chunks(32) {
            let flat: Vec<u8> = chunk.iter().flat_map(|l| l.iter().copied()).collect();
            let mut g = Graph::new();
            let layers = match (style, &modulated) {
                (Some(s), Some(net)) => {
                    let bound = s.params.bind(&mut g, false);
                    net.layer_vars(&mut g, &bound)?
                }
                _ => plain_layer_vars(&self.generator.bind(&mut g, false)),
            };
            let y = g.constant(onehot(&flat, size)?);
            let img = generator_forward(&mut g, &self.config, &layers, y)?;
            let spatial = size * size;
            out.extend(g.value(img).data().chunks(spatial).map(|c| c.iter().map(|v| v.as_f64() as f32).collect()));
        }
        Ok(out)
    }
}

type NetBuilder<'a, T> = &'a dyn Fn(&mut Graph<T>, &Bound) -> Result<LayerVars>;

struct Adversarial<'a, T> {
    config: &'a GeneratorConfig,
    gan: &'a GanConfig,
    epochs: usize,
    lr: f64,
    g_net: NetBuilder<'a, T>,
    d_net: NetBuilder<'a, T>,
}

impl<T: Scalar> Adversarial<'_, T> {
    /// Alternating 1:1 discriminator/generator updates over `samples`.
    fn run(
        &self,
        samples: &[LabeledSample],
        g_params: &mut ParamSet<T>,
        d_params: &mut ParamSet<T>,
        seed: u64,
    ) -> Result<GanLog> {
        let size = samples[0].size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt_g = Adam::new(self.lr, self.gan.beta1, 0.999);
        let mut opt_d = Adam::new(self.lr, self.gan.beta1, 0.999);
        let mut log = GanLog::default();
        for _ in 0..self.epochs {
            let order = permutation(samples.len(), &mut rng);
            let (mut sum_g, mut sum_d, mut batches) = (0.0, 0.0, 0usize);
            for idx in order.chunks(self.gan.batch) {
                let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &samples[i]).collect();
                let labels: Vec<u8> = batch.iter().flat_map(|s| s.label.iter().copied()).collect();
                let y = onehot::<T>(&labels, size)?;
                let x = crate::backbone::images_tensor::<T>(&batch)?;

                let mut gg = Graph::new();
                let g_bound = g_params.bind(&mut gg, true);
                let g_layers = (self.g_net)(&mut gg, &g_bound)?;
                let y_g = gg.constant(y.clone());
                let fake = generator_forward(&mut gg, self.config, &g_layers, y_g)?;

                let mut dg = Graph::new();
                let d_bound = d_params.bind(&mut dg, true);
                let d_layers = (self.d_net)(&mut dg, &d_bound)?;
                let y_d = dg.constant(y.clone());
                let real = dg.constant(x.clone());
                let fake_d = dg.constant(gg.value(fake).clone());
                let logit_real = discriminator_forward(&mut dg, self.config, &d_layers, y_d, real)?;
                let logit_fake = discriminator_forward(&mut dg, self.config, &d_layers, y_d, fake_d)?;
                let l_real = dg.bce_with_logits(logit_real, T::one());
                let l_fake = dg.bce_with_logits(logit_fake, T::zero());
                let l_sum = dg.add(l_real, l_fake)?;
                let loss_d = dg.scale(l_sum, T::of(0.5));
                let mut grads = dg.backward(loss_d)?;
                opt_d.step(d_params, &d_bound.grads(&dg, &mut grads))?;
                sum_d += dg.scalar(loss_d).as_f64();

                let frozen_d = d_params.bind(&mut gg, false);
                let d_layers = (self.d_net)(&mut gg, &frozen_d)?;
                let logit = discriminator_forward(&mut gg, self.config, &d_layers, y_g, fake)?;
                let mut loss_g = gg.bce_with_logits(logit, T::one());
                if self.gan.l1_weight > 0.0 {
                    let target = gg.constant(x);
                    let diff = gg.sub(fake, target)?;
                    let abs = gg.abs(diff);
                    let l1 = gg.mean(abs);
                    let l1 = gg.scale(l1, T::of(self.gan.l1_weight));
                    loss_g = gg.add(loss_g, l1)?;
                }
                let mut grads = gg.backward(loss_g)?;
                opt_g.step(g_params, &g_bound.grads(&gg, &mut grads))?;
                sum_g += gg.scalar(loss_g).as_f64();
                batches += 1;
            }
            log.generator.push(sum_g / batches as f64);
            log.discriminator.push(sum_d / batches as f64);
        }
        Ok(log)
    }
}

fn check_samples(samples: &[LabeledSample], config: &GeneratorConfig) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Data("adversarial training needs at least one sample".into()))?;
    if first.size % config.size_multiple() != 0 || samples.iter().any(|s| s.size != first.size) {
        return Err(Error::Data(format!("samples must share one size divisible by {}", config.size_multiple())));
    }
    Ok(())
}

/// Trains `G_B`/`F_B` on the first domain and freezes the pair.
pub fn train_base_generator<T: Scalar>(
    samples: &[LabeledSample],
    config: &GeneratorConfig,
    gan: &GanConfig,
    seed: u64,
) -> Result<(GeneratorPair<T>, GanLog)> {
    gan.validate()?;
    check_samples(samples, config)?;
    let mut pair = GeneratorPair::new(config.clone(), seed)?;
    let plain = |_: &mut Graph<T>, b: &Bound| Ok(plain_layer_vars(b));
    let trainer = Adversarial { config, gan, epochs: gan.epochs, lr: gan.lr, g_net: &plain, d_net: &plain };
    let log = trainer.run(samples, &mut pair.generator, &mut pair.discriminator, seed ^ 0x6a09_e667)?;
    pair.freeze();
    Ok((pair, log))
}

/// Learns generator-side style parameters for a new domain against the frozen pair.
///
/// Discriminator-side style parameters are trained alongside and dropped.
pub fn train_style_params<T: Scalar>(
    pair: &GeneratorPair<T>,
    samples: &[LabeledSample],
    gan: &GanConfig,
    seed: u64,
) -> Result<(StyleParams<T>, GanLog)> {
    if !pair.is_frozen() {
        return Err(Error::State("style training requires a frozen base generator".into()));
    }
    gan.validate()?;
    check_samples(samples, &pair.config)?;
    let g_net = ModulatedNet::new(&pair.generator)?;
    let d_net = ModulatedNet::new(&pair.discriminator)?;
    let mut s_g = StyleParams::identity(&pair.generator)?;
    let mut s_f = StyleParams::identity(&pair.discriminator)?;
    let gb = |g: &mut Graph<T>, b: &Bound| g_net.layer_vars(g, b);
    let db = |g: &mut Graph<T>, b: &Bound| d_net.layer_vars(g, b);
    let trainer =
        Adversarial { config: &pair.config, gan, epochs: gan.style_epochs, lr: gan.style_lr, g_net: &gb, d_net: &db };
    let log = trainer.run(samples, &mut s_g.params, &mut s_f.params, seed ^ 0xbb67_ae85)?;
    Ok((s_g, log))
}

/// Mean absolute intensity error of rendered images against the true ones.
pub fn reconstruction_error<T: Scalar>(
    pair: &GeneratorPair<T>,
    style: Option<&StyleParams<T>>,
    samples: &[LabeledSample],
) -> Result<f64> {
    let Some(first) = samples.first() else {
        return Ok(0.0);
    };
    let labels: Vec<&[u8]> = samples.iter().map(|s| s.label.as_slice()).collect();
    let images = pair.render(style, &labels, first.size)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (img, s) in images.iter().zip(samples) {
        for (a, b) in img.iter().zip(&s.image) {
            sum += (a - b).abs() as f64;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}
