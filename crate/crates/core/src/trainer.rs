//! Domain-incremental training: first-step supervision, replay-augmented and
//! whitened optimization at every later step, style-bank growth, and the
//! individual / joint / sequential-finetune baselines.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{ce_loss, images_tensor, labels_of, SegConfig, SegModel};
use crate::checkpoint;
use crate::datagen::{derive_seed, EvalSet, LabeledSample, StepData, StreamReader};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{dsc, hd95};
use crate::nn::{permutation, Adam};
use crate::replay::{
    replay_dataset, save_pair, train_base_generator, train_style_params, GanConfig, GanLog, GeneratorConfig,
    GeneratorPair, StyleBank,
};
use crate::whitening::{dsfw_graph, tap_covariances, variance_matrix, LayerWhitening, WhiteningState};

pub const MODEL_KIND: &str = "segmentation";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Incremental,
    Individual,
    Joint,
    SequentialFinetune,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Incremental, Mode::Individual, Mode::Joint, Mode::SequentialFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Incremental => "incremental",
            Mode::Individual => "individual",
            Mode::Joint => "joint",
            Mode::SequentialFinetune => "sequential_finetune",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown mode {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub k: usize,
    /// Pairs sampled for the variance matrix.
    pub n_pairs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Pool taps (0-based) that receive the whitening loss.
    pub taps: Vec<usize>,
    /// Stop after this many epochs without validation improvement and restore the best weights.
    pub early_stopping: Option<usize>,
    /// Re-estimate the whitening state at the start of every epoch.
    pub refresh_whitening: bool,
    pub model: SegConfig,
    pub generator: GeneratorConfig,
    pub gan: GanConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_r: 0.5,
            lambda_d: 0.1,
            k: 3,
            n_pairs: 100,
            lr: 2e-4,
            epochs: 30,
            batch: 16,
            seed: 0,
            taps: vec![0, 1, 2, 3],
            early_stopping: None,
            refresh_whitening: false,
            model: SegConfig::default(),
            generator: GeneratorConfig::default(),
            gan: GanConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_r >= 0.0) || !(self.lambda_d >= 0.0) {
            return bad(format!("loss weights must be >= 0, got {} and {}", self.lambda_r, self.lambda_d));
        }
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.n_pairs == 0 || self.batch == 0 {
            return bad("n_pairs and batch must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.early_stopping == Some(0) {
            return bad("early-stopping patience must be positive".into());
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.model.stages()) {
            return bad(format!("tap {t} does not exist in a {}-stage model", self.model.stages()));
        }
        self.model.validate()?;
        self.generator.validate()?;
        self.gan.validate()
    }
}

/// Per-purpose random streams, independent of one another so that zeroing a
/// loss term never perturbs the remaining schedule.
mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const PARTNER: u64 = 4;
    pub const GAN: u64 = 5;
}

fn rng_for(seed: u64, purpose: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[purpose, step as u64]))
}

/// `ce_current + (λ_r/(t-1)) Σ ce_replayed + λ_d · dsfw`.
pub fn compose_loss(ce_current: f64, ce_replayed: &[f64], dsfw: f64, t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t < 2 || ce_replayed.len() != t - 1 {
        return Err(Error::Validation(format!(
            "step {t} needs {} replayed losses, got {}",
            t.saturating_sub(1),
            ce_replayed.len()
        )));
    }
    let replay = cfg.lambda_r / (t - 1) as f64 * ce_replayed.iter().sum::<f64>();
    Ok(ce_current + replay + cfg.lambda_d * dsfw)
}

/// One line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub mode: Mode,
    pub step: usize,
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_replay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsfw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<f64>,
    /// Per-batch totals of the epoch (first epoch of a step only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub batch_losses: Vec<f64>,
}

/// Appends JSON lines to a file (or keeps them in memory only).
pub struct RunLog {
    writer: Option<BufWriter<File>>,
    pub records: Vec<EpochLog>,
}

impl RunLog {
    pub fn memory() -> Self {
        Self { writer: None, records: Vec::new() }
    }

    pub fn file(path: &Path) -> Result<Self> {
        let f = File::create(path).at(path)?;
        Ok(Self { writer: Some(BufWriter::new(f)), records: Vec::new() })
    }

    fn push(&mut self, rec: EpochLog) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").at("log.jsonl")?;
            w.flush().at("log.jsonl")?;
        }
        self.records.push(rec);
        Ok(())
    }

    fn gan(&mut self, mode: Mode, step: usize, phase: &str, log: &GanLog) -> Result<()> {
        for (e, (g, d)) in log.generator.iter().zip(&log.discriminator).enumerate() {
            self.push(EpochLog {
                mode,
                step,
                phase: phase.into(),
                epoch: e,
                loss: *g,
                ce: None,
                ce_replay: None,
                dsfw: None,
                discriminator: Some(*d),
                val_dsc: None,
                batch_losses: Vec::new(),
            })?;
        }
        Ok(())
    }
}

/// Mean DSC of a model over samples.
pub fn mean_dsc(model: &SegModel<f32>, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot score an empty set".into()));
    }
    let preds = model.predict_samples(samples, 32)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += dsc(p, &s.label)?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean DSC and mean HD95 per evaluation set.
pub fn evaluate(model: &SegModel<f32>, sets: &[EvalSet]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut d = Vec::with_capacity(sets.len());
    let mut h = Vec::with_capacity(sets.len());
    for set in sets {
        if set.samples.is_empty() {
            return Err(Error::Data(format!("evaluation set {} is empty", set.name)));
        }
        let preds = model.predict_samples(&set.samples, 32)?;
        let (mut sd, mut sh) = (0.0, 0.0);
        for (p, s) in preds.iter().zip(&set.samples) {
            sd += dsc(p, &s.label)?;
            sh += hd95(p, &s.label, s.size)?;
        }
        let n = set.samples.len() as f64;
        d.push(sd / n);
        h.push(sh / n);
    }
    Ok((d, h))
}

/// Estimates the variance matrices and indicators for every tapped layer.
///
/// `n_pairs` current samples are drawn (with replacement only when the step
/// has fewer samples), each paired with one uniformly chosen replay of its label.
pub fn estimate_whitening(
    model: &SegModel<f32>,
    current: &[LabeledSample],
    replays: &[Vec<LabeledSample>],
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WhiteningState> {
    if replays.is_empty() || current.is_empty() {
        return Err(Error::State("whitening needs current samples and at least one replayed set".into()));
    }
    let n = current.len();
    let picks: Vec<usize> = if cfg.n_pairs <= n {
        permutation(n, rng)[..cfg.n_pairs].to_vec()
    } else {
        log::info!("step {step}: sampling {} pairs with replacement from {n} samples", cfg.n_pairs);
        (0..cfg.n_pairs).map(|_| rng.random_range(0..n)).collect()
    };
    let partners: Vec<usize> = picks.iter().map(|_| rng.random_range(0..replays.len())).collect();
    let mut pairs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); cfg.taps.len()];
    let mut channels = vec![0; cfg.taps.len()];
    for chunk in picks.iter().zip(&partners).collect::<Vec<_>>().chunks(32) {
        let cur: Vec<&LabeledSample> = chunk.iter().map(|(&i, _)| &current[i]).collect();
        let rep: Vec<&LabeledSample> = chunk.iter().map(|(&i, &r)| &replays[r][i]).collect();
        let (_, taps_cur) = model.forward(&images_tensor(&cur)?)?;
        let (_, taps_rep) = model.forward(&images_tensor(&rep)?)?;
        for (slot, &tap) in cfg.taps.iter().enumerate() {
            channels[slot] = taps_cur[tap].shape()[1];
            let a = tap_covariances(&taps_cur[tap])?;
            let b = tap_covariances(&taps_rep[tap])?;
            pairs[slot].extend(a.into_iter().zip(b));
        }
    }
    let layers = cfg
        .taps
        .iter()
        .enumerate()
        .map(|(slot, &tap)| {
            let v = variance_matrix(&pairs[slot])?;
            LayerWhitening::new(tap, channels[slot], &v, cfg.k, cfg.n_pairs)
        })
        .collect::<Result<_>>()?;
    Ok(WhiteningState { step, k: cfg.k, layers })
}

/// Data and auxiliary state for optimizing one model at one step.
pub struct StepInputs<'a> {
    pub step: usize,
    pub train: &'a [LabeledSample],
    pub val: &'a [LabeledSample],
    /// `t - 1` replayed copies of `train`, aligned sample-for-sample.
    pub replays: &'a [Vec<LabeledSample>],
    pub whitening: Option<WhiteningState>,
}

struct BatchLoss {
    total: f64,
    ce: f64,
    ce_replay: f64,
    dsfw: f64,
}

fn batch_step(
    model: &mut SegModel<f32>,
    opt: &mut Adam<f32>,
    inputs: &StepInputs,
    idx: &[usize],
    cfg: &TrainConfig,
    partner_rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let b = idx.len();
    let mut batch: Vec<&LabeledSample> = idx.iter().map(|&i| &inputs.train[i]).collect();
    for set in inputs.replays {
        batch.extend(idx.iter().map(|&i| &set[i]));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(images_tensor(&batch)?);
    let out = model.forward_graph(&mut g, &bound, x)?;
    let block = |k: usize| (k * b..(k + 1) * b).collect::<Vec<usize>>();
    let mut loss;
    let mut parts = BatchLoss { total: 0.0, ce: 0.0, ce_replay: 0.0, dsfw: 0.0 };
    if inputs.replays.is_empty() {
        loss = ce_loss(&mut g, out.logits, labels_of(&batch))?;
        parts.ce = g.scalar(loss) as f64;
    } else {
        let t = inputs.replays.len() + 1;
        let cur = g.gather_batch(out.logits, &block(0))?;
        loss = ce_loss(&mut g, cur, labels_of(&batch[..b]))?;
        parts.ce = g.scalar(loss) as f64;
        let mut rep_sum: Option<Var> = None;
        for k in 1..t {
            let logits = g.gather_batch(out.logits, &block(k))?;
            let ce = ce_loss(&mut g, logits, labels_of(&batch[k * b..(k + 1) * b]))?;
            rep_sum = Some(match rep_sum {
                Some(s) => g.add(s, ce)?,
                None => ce,
            });
        }
        let rep_sum = rep_sum.expect("at least one replayed set");
        parts.ce_replay = g.scalar(rep_sum) as f64 / (t - 1) as f64;
        let weighted = g.scale(rep_sum, (cfg.lambda_r / (t - 1) as f64) as f32);
        loss = g.add(loss, weighted)?;
        if let Some(state) = &inputs.whitening {
            let partners: Vec<usize> = (0..b).map(|j| (1 + partner_rng.random_range(0..t - 1)) * b + j).collect();
            let mut dsfw_sum: Option<Var> = None;
            for layer in &state.layers {
                let tap = out.taps[layer.layer];
                let cur = g.gather_batch(tap, &block(0))?;
                let rep = g.gather_batch(tap, &partners)?;
                let term = dsfw_graph(&mut g, cur, rep, &layer.mask())?;
                dsfw_sum = Some(match dsfw_sum {
                    Some(s) => g.add(s, term)?,
                    None => term,
                });
            }
            if let Some(sum) = dsfw_sum {
                let avg = g.scale(sum, 1.0 / state.layers.len() as f32);
                parts.dsfw = g.scalar(avg) as f64;
                let weighted = g.scale(avg, cfg.lambda_d as f32);
                loss = g.add(loss, weighted)?;
            }
        }
    }
    parts.total = g.scalar(loss) as f64;
    if !parts.total.is_finite() {
        return Err(Error::State(format!("non-finite training loss at step {}", inputs.step)));
    }
    let mut grads = g.backward(loss)?;
    opt.step(&mut model.params, &bound.grads(&g, &mut grads))?;
    Ok(parts)
}

/// Optimizes `model` in place on one step's data with a fresh optimizer.
pub fn optimize(
    model: &mut SegModel<f32>,
    mut inputs: StepInputs,
    cfg: &TrainConfig,
    mode: Mode,
    log: &mut RunLog,
) -> Result<()> {
    if inputs.train.is_empty() {
        return Err(Error::Data(format!("step {} has no training samples", inputs.step)));
    }
    if inputs.replays.iter().any(|r| r.len() != inputs.train.len()) {
        return Err(Error::Dimension("replayed sets must align with the current samples".into()));
    }
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut shuffle = rng_for(cfg.seed, stream::SHUFFLE, inputs.step);
    let mut partner = rng_for(cfg.seed, stream::PARTNER, inputs.step);
    let mut pair_rng = rng_for(cfg.seed, stream::PAIRS, inputs.step);
    let mut best: Option<(f64, crate::nn::ParamSet<f32>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        if cfg.refresh_whitening && epoch > 0 && inputs.whitening.is_some() {
            inputs.whitening =
                Some(estimate_whitening(model, inputs.train, inputs.replays, cfg, inputs.step, &mut pair_rng)?);
        }
        let order = permutation(inputs.train.len(), &mut shuffle);
        let mut sums = [0.0; 4];
        let mut batch_losses = Vec::new();
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let l = batch_step(model, &mut opt, &inputs, idx, cfg, &mut partner)?;
            for (s, v) in sums.iter_mut().zip([l.total, l.ce, l.ce_replay, l.dsfw]) {
                *s += v;
            }
            if epoch == 0 {
                batch_losses.push(l.total);
            }
            batches += 1;
        }
        let mean = sums.map(|s| s / batches as f64);
        let val_dsc = match cfg.early_stopping {
            Some(_) if !inputs.val.is_empty() => Some(mean_dsc(model, inputs.val)?),
            _ => None,
        };
        let has_replay = !inputs.replays.is_empty();
        log.push(EpochLog {
            mode,
            step: inputs.step,
            phase: "segmentation".into(),
            epoch,
            loss: mean[0],
            ce: Some(mean[1]),
            ce_replay: has_replay.then_some(mean[2]),
            dsfw: inputs.whitening.as_ref().map(|_| mean[3]),
            discriminator: None,
            val_dsc,
            batch_losses,
        })?;
        if let (Some(patience), Some(score)) = (cfg.early_stopping, val_dsc) {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(())
}

fn fresh_model(cfg: &TrainConfig) -> Result<SegModel<f32>> {
    SegModel::new(cfg.model.clone(), derive_seed(cfg.seed, &[stream::INIT]))
}

fn plain_inputs<'a>(step: usize, data: &'a StepData) -> StepInputs<'a> {
    StepInputs { step, train: &data.train, val: &data.val, replays: &[], whitening: None }
}

/// Supervised first step: trains `M_1` from its seeded initialization.
pub fn train_first_model(d1: &StepData, cfg: &TrainConfig, mode: Mode, log: &mut RunLog) -> Result<SegModel<f32>> {
    cfg.validate()?;
    let mut model = fresh_model(cfg)?;
    optimize(&mut model, plain_inputs(1, d1), cfg, mode, log)?;
    Ok(model)
}

/// First step of the full method: `M_1` plus the frozen base generator pair.
pub fn train_first_step(
    d1: &StepData,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<(SegModel<f32>, GeneratorPair<f32>)> {
    if d1.train.is_empty() {
        return Err(Error::Data("first step has no training samples".into()));
    }
    let model = train_first_model(d1, cfg, Mode::Incremental, log)?;
    let pair = train_generator(d1, cfg, log)?;
    Ok((model, pair))
}

fn train_generator(d1: &StepData, cfg: &TrainConfig, log: &mut RunLog) -> Result<GeneratorPair<f32>> {
    let seed = derive_seed(cfg.seed, &[stream::GAN, 1]);
    let (pair, gan_log) = train_base_generator(&d1.train, &cfg.generator, &cfg.gan, seed)?;
    log.gan(Mode::Incremental, 1, "base_generator", &gan_log)?;
    Ok(pair)
}

/// Mutable state of an incremental run.
pub struct RunState {
    pub model: SegModel<f32>,
    pub pair: Option<GeneratorPair<f32>>,
    pub bank: StyleBank<f32>,
    pub whitening: Vec<WhiteningState>,
    /// Completed time steps.
    pub step: usize,
}

/// Replayed copies of `labels` for every past step `1..t`.
pub fn replay_all(state: &RunState, labels: &[LabeledSample], t: usize) -> Result<Vec<Vec<LabeledSample>>> {
    let pair =
        state.pair.as_ref().ok_or_else(|| Error::State("replay requested before the base generator exists".into()))?;
    let missing: Vec<usize> = (2..t).filter(|i| state.bank.get(*i).is_err()).collect();
    if !missing.is_empty() {
        return Err(Error::State(format!("style bank lacks steps {missing:?}")));
    }
    (1..t).map(|i| replay_dataset(&state.bank, pair, labels, i)).collect()
}

/// One step `t >= 2` of the full method: replay, whitening statistics,
/// optimization of `M_t`, then style learning for `S_t`.
pub fn incremental_step(state: &mut RunState, data: &StepData, cfg: &TrainConfig, log: &mut RunLog) -> Result<()> {
    let t = state.step + 1;
    if t < 2 || data.step != t {
        return Err(Error::State(format!("expected data for step {t}, got step {}", data.step)));
    }
    let replays = replay_all(state, &data.train, t)?;
    let mut pair_rng = rng_for(cfg.seed, stream::PAIRS, t);
    let whitening = estimate_whitening(&state.model, &data.train, &replays, cfg, t, &mut pair_rng)?;
    let inputs = StepInputs {
        step: t,
        train: &data.train,
        val: &data.val,
        replays: &replays,
        whitening: (!cfg.taps.is_empty()).then(|| whitening.clone()),
    };
    optimize(&mut state.model, inputs, cfg, Mode::Incremental, log)?;
    let pair = state.pair.as_ref().expect("checked by replay_all");
    let (style, gan_log) =
        train_style_params(pair, &data.train, &cfg.gan, derive_seed(cfg.seed, &[stream::GAN, t as u64]))?;
    log.gan(Mode::Incremental, t, "style", &gan_log)?;
    state.bank.insert(t, style)?;
    state.whitening.push(whitening);
    state.step = t;
    Ok(())
}

/// Sequential finetuning: same schedule, no replay, no whitening.
pub fn finetune_step(model: &mut SegModel<f32>, data: &StepData, cfg: &TrainConfig, log: &mut RunLog) -> Result<()> {
    optimize(model, plain_inputs(data.step, data), cfg, Mode::SequentialFinetune, log)
}

/// Outcome of one mode: train-test matrices (rows = steps, columns = evaluation sets).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: Mode,
    pub columns: Vec<String>,
    pub dsc: Vec<Vec<f64>>,
    pub hd: Vec<Vec<f64>>,
    /// Whitening statistics per step (incremental only).
    #[serde(default)]
    pub whitening: Vec<WhiteningState>,
}

pub fn save_model(model: &SegModel<f32>, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, MODEL_KIND, &model.params)?;
    Ok(path)
}

pub fn load_model(config: SegConfig, path: &Path) -> Result<SegModel<f32>> {
    let (kind, params) = checkpoint::load(path)?;
    if kind != MODEL_KIND {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a {MODEL_KIND} checkpoint, found {kind}"),
        });
    }
    SegModel::from_params(config, params)
}

fn step_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("step_{t}"))
}

/// Runs the requested modes over a stream, writing one directory per mode
/// under `out`. `M_1` is trained once and shared by the modes that start from it.
pub fn run_modes(reader: &StreamReader, cfg: &TrainConfig, modes: &[Mode], out: &Path) -> Result<Vec<ModeResult>> {
    cfg.validate()?;
    let steps = reader.steps();
    if steps == 0 {
        return Err(Error::Data("stream has no steps".into()));
    }
    let evals = reader.eval_sets()?;
    let columns: Vec<String> = evals.iter().map(|e| e.name.clone()).collect();
    let mut results = Vec::new();
    let needs_m1 = modes.iter().any(|m| matches!(m, Mode::Incremental | Mode::SequentialFinetune | Mode::Individual));
    let mut shared: Option<SegModel<f32>> = None;
    let mut shared_log = RunLog::memory();
    if needs_m1 {
        let d1 = reader.load_step(1)?;
        shared = Some(train_first_model(&d1, cfg, Mode::SequentialFinetune, &mut shared_log)?);
    }
    for &mode in modes {
        let dir = out.join(mode.name());
        fs::create_dir_all(&dir).at(&dir)?;
        let mut log = RunLog::file(&dir.join("log.jsonl"))?;
        if mode != Mode::Joint {
            for rec in &shared_log.records {
                log.push(EpochLog { mode, ..rec.clone() })?;
            }
        }
        let mut dsc_rows = Vec::new();
        let mut hd_rows = Vec::new();
        let mut whitening = Vec::new();
        let mut record = |model: &SegModel<f32>, t: usize| -> Result<()> {
            save_model(model, &step_dir(&dir, t))?;
            let (d, h) = evaluate(model, &evals)?;
            log::info!("{mode} step {t}: dsc {d:?}");
            dsc_rows.push(d);
            hd_rows.push(h);
            Ok(())
        };
        match mode {
            Mode::Incremental => {
                let d1 = reader.load_step(1)?;
                let model = shared.clone().expect("trained above");
                let pair = train_generator(&d1, cfg, &mut log)?;
                drop(d1);
                save_pair(&pair, &dir)?;
                record(&model, 1)?;
                let mut state =
                    RunState { model, pair: Some(pair), bank: StyleBank::new(), whitening: Vec::new(), step: 1 };
                for t in 2..=steps {
                    let data = reader.load_step(t)?;
                    incremental_step(&mut state, &data, cfg, &mut log)?;
                    let w = state.whitening.last().expect("pushed by the step");
                    let path = dir.join(format!("whitening_t{t}.json"));
                    fs::write(&path, serde_json::to_vec(w)?).at(&path)?;
                    state.bank.save(&dir, "generator_base.ckpt")?;
                    record(&state.model, t)?;
                }
                whitening = state.whitening;
            }
            Mode::SequentialFinetune => {
                let mut model = shared.clone().expect("trained above");
                record(&model, 1)?;
                for t in 2..=steps {
                    let data = reader.load_step(t)?;
                    finetune_step(&mut model, &data, cfg, &mut log)?;
                    record(&model, t)?;
                }
            }
            Mode::Individual => {
                record(shared.as_ref().expect("trained above"), 1)?;
                for t in 2..=steps {
                    let data = reader.load_step(t)?;
                    let mut model = fresh_model(cfg)?;
                    optimize(&mut model, plain_inputs(t, &data), cfg, mode, &mut log)?;
                    record(&model, t)?;
                }
            }
            Mode::Joint => {
                let mut union =
                    StepData { step: 1, entries: Vec::new(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
                for t in 1..=steps {
                    let data = reader.load_step(t)?;
                    union.train.extend(data.train);
                    union.val.extend(data.val);
                }
                let mut model = fresh_model(cfg)?;
                optimize(&mut model, plain_inputs(1, &union), cfg, mode, &mut log)?;
                save_model(&model, &step_dir(&dir, steps))?;
                let (d, h) = evaluate(&model, &evals)?;
                dsc_rows = vec![d; steps];
                hd_rows = vec![h; steps];
            }
        }
        results.push(ModeResult { mode, columns: columns.clone(), dsc: dsc_rows, hd: hd_rows, whitening });
    }
    Ok(results)
}
