//! Style-oriented generative replay.
//!
//! A base label-to-image generator is trained once on the first domain and
//! frozen. Every later domain is captured by a small set of per-filter style
//! parameters that retarget the frozen filters; the base plus those
//! parameters form the style bank, from which past domains are replayed.

mod nets;
mod style;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use nets::{discriminator_forward, generator_forward, onehot, GeneratorConfig, LayerVars};
pub use style::{modulate, plain_layer_vars, ModulatedNet, StyleParams, SIGMA_EPS};
pub use train::{reconstruction_error, train_base_generator, train_style_params, GanConfig, GanLog, GeneratorPair};

use crate::checkpoint;
use crate::datagen::LabeledSample;
use crate::error::{Error, IoContext, Result};
use crate::nn::ParamSet;
use crate::tensor::Scalar;

pub const GENERATOR_KIND: &str = "generator";
pub const DISCRIMINATOR_KIND: &str = "discriminator";
pub const STYLE_KIND: &str = "style";
pub const BANK_INDEX: &str = "bank_index.json";

/// Generator-side style parameters `S_i` keyed by 1-based time step (`i >= 2`).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank<T> {
    styles: BTreeMap<usize, StyleParams<T>>,
}

impl<T: Scalar> Default for StyleBank<T> {
    fn default() -> Self {
        Self { styles: BTreeMap::new() }
    }
}

/// On-disk `bank_index.json`: paths are relative to the index's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankIndex {
    pub base: String,
    pub styles: BTreeMap<usize, String>,
}

impl<T: Scalar> StyleBank<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: usize, style: StyleParams<T>) -> Result<()> {
        if step < 2 {
            return Err(Error::Validation(format!("style entries start at step 2, got {step}")));
        }
        self.styles.insert(step, style);
        Ok(())
    }

    pub fn get(&self, step: usize) -> Result<&StyleParams<T>> {
        self.styles.get(&step).ok_or_else(|| Error::Lookup(format!("style bank has no entry for step {step}")))
    }

    pub fn keys(&self) -> Vec<usize> {
        self.styles.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    /// Writes every entry as `step_{i}/style_S{i}.ckpt` plus the index.
    ///
    /// `base` is the path of the frozen generator checkpoint relative to `dir`.
    pub fn save(&self, dir: &Path, base: &str) -> Result<BankIndex> {
        let mut index = BankIndex { base: base.to_string(), styles: BTreeMap::new() };
        for (&step, style) in &self.styles {
            let rel = style_path(step);
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            checkpoint::save(&path, STYLE_KIND, &style.params)?;
            index.styles.insert(step, rel);
        }
        let path = dir.join(BANK_INDEX);
        fs::write(&path, serde_json::to_vec_pretty(&index)?).at(&path)?;
        Ok(index)
    }

    /// Reads the index in `dir` and every style blob it lists.
    pub fn load(dir: &Path) -> Result<(Self, BankIndex)> {
        let index = read_index(dir)?;
        let mut bank = Self::new();
        for (&step, rel) in &index.styles {
            let path = dir.join(rel);
            let (kind, params) = checkpoint::load(&path)?;
            if kind != STYLE_KIND {
                return Err(Error::Format {
                    path,
                    reason: format!("expected a {STYLE_KIND} checkpoint, found {kind}"),
                });
            }
            bank.insert(step, StyleParams { params })?;
        }
        Ok((bank, index))
    }
}

pub fn style_path(step: usize) -> String {
    format!("step_{step}/style_S{step}.ckpt")
}

fn read_index(dir: &Path) -> Result<BankIndex> {
    let path = dir.join(BANK_INDEX);
    let bytes = fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Replays step `step` for the given labels: `(G_step(y), y)`.
///
/// Step 1 uses the base generator; later steps use the bank entry.
pub fn replay_dataset<T: Scalar>(
    bank: &StyleBank<T>,
    pair: &GeneratorPair<T>,
    labels: &[LabeledSample],
    step: usize,
) -> Result<Vec<LabeledSample>> {
    let style = match step {
        0 => return Err(Error::Lookup("time steps are 1-based".into())),
        1 => None,
        i => Some(bank.get(i)?),
    };
    if !pair.is_frozen() {
        return Err(Error::State("replay requires a frozen base generator".into()));
    }
    let Some(first) = labels.first() else {
        return Ok(Vec::new());
    };
    let maps: Vec<&[u8]> = labels.iter().map(|s| s.label.as_slice()).collect();
    let images = pair.render(style, &maps, first.size)?;
    Ok(labels
        .iter()
        .zip(images)
        .map(|(s, image)| LabeledSample {
            size: s.size,
            image,
            label: s.label.clone(),
            domain_id: s.domain_id,
            seed: s.seed,
        })
        .collect())
}

/// Storage cost of the bank relative to the base generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub base_bytes: usize,
    /// Largest single `S_i` blob; zero for an empty bank.
    pub per_domain_bytes: usize,
    pub ratio: f64,
}

impl SizeReport {
    fn new(base_bytes: usize, per_domain_bytes: usize) -> Self {
        let ratio = if base_bytes == 0 { 0.0 } else { per_domain_bytes as f64 / base_bytes as f64 };
        Self { base_bytes, per_domain_bytes, ratio }
    }

    /// Sizes from the checkpoint encoding of in-memory parameter sets.
    pub fn from_params<T: Scalar>(base: &ParamSet<T>, styles: &[&ParamSet<T>]) -> Result<Self> {
        let blob = |p: &ParamSet<T>| -> Result<usize> {
            let bytes = checkpoint::encode(STYLE_KIND, p);
            Ok(checkpoint::decode_header(&bytes, Path::new("<memory>"))?.0.blob_bytes())
        };
        let per = styles.iter().map(|s| blob(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(blob(base)?, per.into_iter().max().unwrap_or(0)))
    }
}

/// Measures the serialized bank under `dir` (as written by [`StyleBank::save`]).
pub fn bank_size_report(dir: &Path) -> Result<SizeReport> {
    let index = read_index(dir)?;
    let base = checkpoint::read_header(&dir.join(&index.base))?.blob_bytes();
    let mut per = 0;
    for rel in index.styles.values() {
        per = per.max(checkpoint::read_header(&dir.join(rel))?.blob_bytes());
    }
    Ok(SizeReport::new(base, per))
}

/// Saves `G_B` and `F_B` as `generator_base.ckpt` / `discriminator_base.ckpt` under `dir`.
pub fn save_pair<T: Scalar>(pair: &GeneratorPair<T>, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).at(dir)?;
    let g = dir.join("generator_base.ckpt");
    let f = dir.join("discriminator_base.ckpt");
    checkpoint::save(&g, GENERATOR_KIND, &pair.generator)?;
    checkpoint::save(&f, DISCRIMINATOR_KIND, &pair.discriminator)?;
    Ok((g, f))
}

pub fn load_pair<T: Scalar>(config: GeneratorConfig, dir: &Path) -> Result<GeneratorPair<T>> {
    let (_, g) = checkpoint::load(&dir.join("generator_base.ckpt"))?;
    let (_, f) = checkpoint::load(&dir.join("discriminator_base.ckpt"))?;
    GeneratorPair::from_params(config, g, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{preset_domains, synth_sample};
    use crate::nn::ConvSpec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn samples(domain: usize, n: usize) -> Vec<LabeledSample> {
        let d = &preset_domains()[domain];
        (0..n).map(|i| synth_sample(d, 16, domain, 100 + i as u64).unwrap()).collect()
    }

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { widths: vec![4, 8], disc_widths: [4, 8] }
    }

    #[test]
    fn single_layer_counts_match_hand_arithmetic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let base = ParamSet::<f32>::init_convs(&[ConvSpec::new("l", 8, 8, 4, 1, 0)], &mut rng);
        let style = StyleParams::identity(&base).unwrap();
        let r = SizeReport::from_params(&base, &[&style.params]).unwrap();
        assert_eq!(r.base_bytes, 1032 * 4);
        assert_eq!(r.per_domain_bytes, 136 * 4);
        assert!((r.ratio - 136.0 / 1032.0).abs() < 1e-12);
        assert_eq!(SizeReport::from_params(&base, &[]).unwrap().per_domain_bytes, 0);
    }

    #[test]
    fn zero_epoch_budget_leaves_initialization() {
        let gan = GanConfig { epochs: 0, ..GanConfig::default() };
        let (pair, log) = train_base_generator::<f32>(&samples(0, 2), &tiny(), &gan, 3).unwrap();
        let fresh = GeneratorPair::<f32>::new(tiny(), 3).unwrap();
        assert_eq!(pair.generator, fresh.generator);
        assert_eq!(pair.discriminator, fresh.discriminator);
        assert!(pair.is_frozen());
        assert!(log.generator.is_empty());
    }

    #[test]
    fn empty_data_and_unfrozen_base_are_rejected() {
        let r = train_base_generator::<f32>(&[], &tiny(), &GanConfig::default(), 0);
        assert!(matches!(r, Err(Error::Data(_))));
        let pair = GeneratorPair::<f32>::new(tiny(), 0).unwrap();
        let r = train_style_params(&pair, &samples(1, 2), &GanConfig::default(), 0);
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn replay_passes_labels_through_and_is_repeatable() {
        let gan = GanConfig { epochs: 1, style_epochs: 1, batch: 2, ..GanConfig::default() };
        let (pair, _) = train_base_generator::<f32>(&samples(0, 2), &tiny(), &gan, 1).unwrap();
        let labels = samples(2, 3);
        let bank = StyleBank::new();
        let a = replay_dataset(&bank, &pair, &labels, 1).unwrap();
        let b = replay_dataset(&bank, &pair, &labels, 1).unwrap();
        assert_eq!(a.len(), labels.len());
        assert_eq!(a, b);
        for (r, l) in a.iter().zip(&labels) {
            assert_eq!(r.label, l.label);
            assert!(r.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(matches!(replay_dataset(&bank, &pair, &labels, 2), Err(Error::Lookup(_))));
    }

    #[test]
    fn identity_style_renders_like_the_base_and_base_is_untouched() {
        let gan = GanConfig { epochs: 1, style_epochs: 1, batch: 2, ..GanConfig::default() };
        let (pair, _) = train_base_generator::<f64>(&samples(0, 2), &tiny(), &gan, 2).unwrap();
        let labels = samples(1, 2);
        let maps: Vec<&[u8]> = labels.iter().map(|s| s.label.as_slice()).collect();
        let identity = StyleParams::identity(&pair.generator).unwrap();
        assert_eq!(pair.render(None, &maps, 16).unwrap(), pair.render(Some(&identity), &maps, 16).unwrap());

        let before = pair.generator.checksum();
        let (style, _) = train_style_params(&pair, &labels, &gan, 4).unwrap();
        assert_eq!(pair.generator.checksum(), before);
        style.check_against(&pair.generator).unwrap();
        assert_ne!(style, identity);
    }

    #[test]
    fn bank_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let pair = GeneratorPair::<f32>::new(GeneratorConfig::default(), 0).unwrap();
        save_pair(&pair, dir.path()).unwrap();
        let mut bank = StyleBank::new();
        bank.insert(2, StyleParams::identity(&pair.generator).unwrap()).unwrap();
        bank.insert(3, StyleParams::identity(&pair.generator).unwrap()).unwrap();
        assert!(bank.insert(1, StyleParams::identity(&pair.generator).unwrap()).is_err());
        bank.save(dir.path(), "generator_base.ckpt").unwrap();
        let (loaded, index) = StyleBank::<f32>::load(dir.path()).unwrap();
        assert_eq!(loaded, bank);
        assert_eq!(index.styles[&2], "step_2/style_S2.ckpt");
        let report = bank_size_report(dir.path()).unwrap();
        assert!(report.ratio > 0.0 && report.ratio < 0.25, "{report:?}");
        let reloaded = load_pair::<f32>(GeneratorConfig::default(), dir.path()).unwrap();
        assert_eq!(reloaded.generator, pair.generator);
    }

    #[test]
    fn style_gradient_on_a_one_layer_toy_matches_finite_differences() {
        use crate::autograd::Graph;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let base = ParamSet::<f64>::init_convs(&[ConvSpec::same3("t", 2, 1)], &mut rng);
        let net = ModulatedNet::new(&base).unwrap();
        let x =
            Tensor::<f64>::new(&[1, 2, 4, 4], (0..32).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect()).unwrap();
        let mut style = StyleParams::identity(&base).unwrap();
        style.params.tensors_mut()[0].data_mut()[1] *= 1.7;
        let loss = |s: &StyleParams<f64>, grad: bool| {
            let mut g = Graph::new();
            let b = s.params.bind(&mut g, grad);
            let layers = net.layer_vars(&mut g, &b).unwrap();
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, layers[0].0, layers[0].1, 1, 1).unwrap();
            let l = g.bce_with_logits(y, 1.0);
            let v = g.scalar(l);
            let grads = grad.then(|| {
                let mut gr = g.backward(l).unwrap();
                b.grads(&g, &mut gr)
            });
            (v, grads)
        };
        let (_, grads) = loss(&style, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut plus = style.clone();
            plus.params.tensors_mut()[0].data_mut()[k] += h;
            let mut minus = style.clone();
            minus.params.tensors_mut()[0].data_mut()[k] -= h;
            let fd = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let an = grads[0].data()[k];
            assert!((fd - an).abs() / fd.abs().max(1e-12) < 1e-4, "{fd} vs {an}");
        }
    }
}
