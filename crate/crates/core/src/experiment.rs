//! Configuration-driven experiments: dataset materialization (cached by
//! content hash), mode execution, result files, ablation sweeps and checks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{build_stream, write_stream, StreamConfig, StreamReader};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{AccuracyMatrix, MetricKind};
use crate::trainer::{run_modes, Mode, ModeResult, TrainConfig};
use crate::whitening::WhiteningState;

pub const CONFIG_FILE: &str = "config.json";
pub const HASH_FILE: &str = "config.sha256";
pub const FAILED_MARKER: &str = "FAILED";
pub const RESULTS_FILE: &str = "results.json";
pub const R_DSC: &str = "R_dsc.json";
pub const R_HD: &str = "R_hd.json";
pub const CHECK_FILE: &str = "check.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Single,
    Compound,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Preset::Single),
            "compound" => Ok(Preset::Compound),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::Config(format!("unknown preset {s}"))),
        }
    }
}

/// Ablation grid: whitening cluster counts and tapped-layer subsets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub k: Vec<usize>,
    pub layers: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub image_size: usize,
    pub train_per_domain: usize,
    /// Full stream description; required by the custom preset, derived otherwise.
    pub stream: Option<StreamConfig>,
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    pub sweep: SweepSpec,
    pub out: PathBuf,
    /// Dataset cache root, `<out>/datasets` when unset.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Single,
            image_size: 64,
            train_per_domain: 200,
            stream: None,
            train: TrainConfig::default(),
            modes: Mode::ALL.to_vec(),
            sweep: SweepSpec::default(),
            out: PathBuf::from("runs/default"),
            data_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Fills in the stream and propagates the master seed; the result is what
    /// gets echoed into the run directory.
    pub fn resolve(&self) -> Result<Self> {
        let mut r = self.clone();
        let stream = match self.preset {
            Preset::Single => StreamConfig::single(self.image_size, self.train_per_domain, self.seed),
            Preset::Compound => StreamConfig::compound(self.image_size, self.train_per_domain, self.seed),
            Preset::Custom => {
                let mut s = self
                    .stream
                    .clone()
                    .ok_or_else(|| Error::Config("the custom preset needs a `stream` section".into()))?;
                s.master_seed = self.seed;
                s
            }
        };
        r.image_size = stream.image_size;
        r.stream = Some(stream);
        r.train.seed = self.seed;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("no modes requested".into()));
        }
        if let Some(&k) = self.sweep.k.iter().find(|&&k| k < 2) {
            return Err(Error::Config(format!("sweep k values must be >= 2, got {k}")));
        }
        if self.sweep.layers.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("empty layer subset in sweep".into()));
        }
        for set in &self.sweep.layers {
            let probe = TrainConfig { taps: set.clone(), ..self.train.clone() };
            probe.validate()?;
        }
        if let Some(s) = &self.stream {
            s.validate()?;
        }
        self.train.validate()
    }

    fn stream_config(&self) -> Result<&StreamConfig> {
        self.stream.as_ref().ok_or_else(|| Error::State("experiment config is not resolved".into()))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("datasets"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of a value.
pub fn content_hash<S: Serialize>(value: &S) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Builds the stream under `root/data-<hash>` unless an identical one exists.
pub fn ensure_dataset(stream: &StreamConfig, root: &Path) -> Result<StreamReader> {
    let hash = content_hash(stream)?;
    let dir = root.join(format!("data-{}", &hash[..16]));
    if let Ok(reader) = StreamReader::open(&dir) {
        if reader.config() == stream {
            log::info!("reusing dataset {}", dir.display());
            return Ok(reader);
        }
    }
    log::info!("building dataset {}", dir.display());
    if dir.exists() {
        fs::remove_dir_all(&dir).at(&dir)?;
    }
    write_stream(&build_stream(stream)?, &dir)?;
    StreamReader::open(&dir)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).at(path)
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes the resolved config and its hash; returns the hash.
fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).at(dir)?;
    let hash = content_hash(cfg)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let path = dir.join(HASH_FILE);
    fs::write(&path, format!("{hash}\n")).at(&path)?;
    Ok(hash)
}

/// Runs `body` in `dir`, leaving a failure marker with the error if it fails.
fn guarded<R>(dir: &Path, body: impl FnOnce() -> Result<R>) -> Result<R> {
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).at(&marker)?;
    }
    body().inspect_err(|e| {
        if let Err(w) = fs::write(&marker, format!("{e}\n")) {
            log::error!("could not write {}: {w}", marker.display());
        }
    })
}

/// `R_dsc` / `R_hd` for one mode; `IT` comes from the individual-mode diagonal when available.
pub fn matrices(result: &ModeResult, individual: Option<&ModeResult>) -> Result<(AccuracyMatrix, AccuracyMatrix)> {
    let diag = |r: &ModeResult, hd: bool| -> Vec<f64> {
        let m = if hd { &r.hd } else { &r.dsc };
        m.iter().enumerate().map(|(i, row)| row[i]).collect()
    };
    let dsc = AccuracyMatrix::new(
        MetricKind::Dsc,
        result.columns.clone(),
        result.dsc.clone(),
        individual.map(|i| diag(i, false)),
    )?;
    let hd = AccuracyMatrix::new(
        MetricKind::Hd95,
        result.columns.clone(),
        result.hd.clone(),
        individual.map(|i| diag(i, true)),
    )?;
    Ok((dsc, hd))
}

/// Serialized result of one mode, without per-step whitening statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub columns: Vec<String>,
    pub dsc: AccuracyMatrix,
    pub hd: AccuracyMatrix,
    /// Mean suppression ratio per incremental step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratio: Vec<f64>,
}

/// The mode whose matrices are published at the run root.
pub fn primary_mode(modes: &[Mode]) -> Option<Mode> {
    modes.iter().copied().find(|m| *m == Mode::Incremental).or_else(|| modes.first().copied())
}

fn write_results(dir: &Path, results: &[ModeResult]) -> Result<Vec<ModeSummary>> {
    let individual = results.iter().find(|r| r.mode == Mode::Individual);
    let mut summaries = Vec::new();
    for r in results {
        let (dsc, hd) = matrices(r, individual)?;
        let mode_dir = dir.join(r.mode.name());
        write_json(&mode_dir.join(R_DSC), &dsc)?;
        write_json(&mode_dir.join(R_HD), &hd)?;
        summaries.push(ModeSummary {
            mode: r.mode,
            columns: r.columns.clone(),
            dsc,
            hd,
            ratio: r.whitening.iter().map(WhiteningState::mean_ratio).collect(),
        });
    }
    let modes: Vec<Mode> = summaries.iter().map(|s| s.mode).collect();
    if let Some(p) = primary_mode(&modes) {
        let s = summaries.iter().find(|s| s.mode == p).expect("mode present");
        write_json(&dir.join(R_DSC), &s.dsc)?;
        write_json(&dir.join(R_HD), &s.hd)?;
    }
    write_json(&dir.join(RESULTS_FILE), &summaries)?;
    Ok(summaries)
}

/// Result of [`run_experiment`].
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub summaries: Vec<ModeSummary>,
    /// Raw per-mode results, including whitening statistics.
    pub results: Vec<ModeResult>,
}

/// Resolves the config, builds or reuses the dataset, runs every requested
/// mode into `config.out` and writes the result files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let cfg = config.resolve()?;
    let dir = cfg.out.clone();
    let config_hash = echo_config(&cfg, &dir)?;
    guarded(&dir, || {
        let reader = ensure_dataset(cfg.stream_config()?, &cfg.data_root())?;
        let results = run_modes(&reader, &cfg.train, &cfg.modes, &dir)?;
        let summaries = write_results(&dir, &results)?;
        Ok(RunOutcome { dir: dir.clone(), config_hash, summaries, results })
    })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub k: usize,
    pub taps: Vec<usize>,
    pub bwt: Option<f64>,
    pub tl: Option<f64>,
    pub il: Option<f64>,
    pub ftu: Option<f64>,
    /// Mean final-row DSC over the trained domains.
    pub final_dsc: f64,
    /// `|C_high| / C²`, averaged over tapped layers and steps.
    pub ratio: f64,
}

fn sweep_row(label: String, cfg: &TrainConfig, result: &ModeResult, ratio: f64) -> Result<SweepRow> {
    let (dsc, _) = matrices(result, None)?;
    let last = &dsc.r[dsc.t - 1][..dsc.t];
    Ok(SweepRow {
        label,
        k: cfg.k,
        taps: cfg.taps.clone(),
        bwt: dsc.metrics.bwt,
        tl: dsc.metrics.tl,
        il: dsc.metrics.il,
        ftu: dsc.metrics.ftu,
        final_dsc: last.iter().sum::<f64>() / last.len() as f64,
        ratio,
    })
}

fn mean_ratio_at_k(states: &[WhiteningState], k: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for s in states {
        for layer in &s.layers {
            sum += layer.with_k(k)?.ratio;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn write_table(dir: &Path, name: &str, rows: &[SweepRow]) -> Result<()> {
    write_json(&dir.join(format!("{name}.json")), &rows)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut csv = String::from("label,k,taps,BWT,TL,IL,FTU,final_dsc,ratio\n");
    for r in rows {
        let taps: Vec<String> = r.taps.iter().map(|t| t.to_string()).collect();
        csv += &format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}\n",
            r.label,
            r.k,
            taps.join(" "),
            fmt(r.bwt),
            fmt(r.tl),
            fmt(r.il),
            fmt(r.ftu),
            r.final_dsc,
            r.ratio
        );
    }
    let path = dir.join(format!("{name}.csv"));
    fs::write(&path, csv).at(&path)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTables {
    pub k: Vec<SweepRow>,
    pub layers: Vec<SweepRow>,
}

/// Runs the incremental method once per sweep value.
///
/// The ratio column of the k-sweep re-clusters the variance matrices of the
/// first run, so it reflects k alone for a fixed `V`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepTables> {
    let cfg = config.resolve()?;
    if cfg.sweep.k.is_empty() && cfg.sweep.layers.is_empty() {
        return Err(Error::Config("nothing to sweep: give k values or layer subsets".into()));
    }
    let dir = cfg.out.clone();
    echo_config(&cfg, &dir)?;
    guarded(&dir, || {
        let reader = ensure_dataset(cfg.stream_config()?, &cfg.data_root())?;
        let mut tables = SweepTables::default();
        let mut reference: Option<Vec<WhiteningState>> = None;
        for &k in &cfg.sweep.k {
            let train = TrainConfig { k, ..cfg.train.clone() };
            let out = dir.join("sweep_k").join(format!("k_{k}"));
            let result = run_modes(&reader, &train, &[Mode::Incremental], &out)?.remove(0);
            let fixed = reference.get_or_insert_with(|| result.whitening.clone());
            let ratio = mean_ratio_at_k(fixed, k)?;
            tables.k.push(sweep_row(format!("k={k}"), &train, &result, ratio)?);
            write_table(&dir, "sweep_k", &tables.k)?;
        }
        for taps in &cfg.sweep.layers {
            let train = TrainConfig { taps: taps.clone(), ..cfg.train.clone() };
            let label: Vec<String> = taps.iter().map(|t| t.to_string()).collect();
            let out = dir.join("sweep_layers").join(format!("layers_{}", label.join("-")));
            let result = run_modes(&reader, &train, &[Mode::Incremental], &out)?.remove(0);
            let ratio = mean_ratio_at_k(&result.whitening, train.k)?;
            tables.layers.push(sweep_row(format!("layers={}", label.join(",")), &train, &result, ratio)?);
            write_table(&dir, "sweep_layers", &tables.layers)?;
        }
        Ok(tables)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Minimum final-step DSC advantage on the first domain over sequential finetuning.
pub const MIN_FIRST_DOMAIN_GAP: f64 = 0.02;

/// Checks a completed run directory and writes `check.json`.
pub fn check_run(dir: &Path) -> Result<Vec<Check>> {
    let cfg: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    let stream = cfg.stream_config()?;
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| checks.push(Check { name: name.into(), passed, detail });
    let marker = dir.join(FAILED_MARKER);
    push("completed", !marker.exists(), format!("failure marker present: {}", marker.exists()));
    let summaries: Vec<ModeSummary> = match read_json(&dir.join(RESULTS_FILE)) {
        Ok(s) => s,
        Err(e) => {
            push("results", false, e.to_string());
            write_json(&dir.join(CHECK_FILE), &checks)?;
            return Ok(checks);
        }
    };
    let steps = stream.steps();
    let width = steps + stream.unseen.len();
    for s in &summaries {
        let r = &s.dsc.r;
        let ok = s.dsc.t == steps && r.iter().all(|row| row.len() == width && row.iter().all(|v| v.is_finite()));
        push(
            &format!("{}_populated", s.mode),
            ok,
            format!("{}x{} R, expected {steps}x{width}", r.len(), r.first().map_or(0, Vec::len)),
        );
        if !stream.unseen.is_empty() {
            push(&format!("{}_ftu", s.mode), s.dsc.metrics.ftu.is_some(), format!("FTU {:?}", s.dsc.metrics.ftu));
        }
    }
    let find = |m: Mode| summaries.iter().find(|s| s.mode == m);
    if let (Some(inc), Some(ft)) = (find(Mode::Incremental), find(Mode::SequentialFinetune)) {
        if steps >= 2 {
            let gap = inc.dsc.r[steps - 1][0] - ft.dsc.r[steps - 1][0];
            push(
                "first_domain_gap",
                gap >= MIN_FIRST_DOMAIN_GAP,
                format!(
                    "final DSC on {}: {:.4} vs {:.4} (gap {gap:.4})",
                    inc.columns[0],
                    inc.dsc.r[steps - 1][0],
                    ft.dsc.r[steps - 1][0]
                ),
            );
            let (a, b) = (inc.dsc.metrics.bwt.unwrap_or(f64::NAN), ft.dsc.metrics.bwt.unwrap_or(f64::NAN));
            push("bwt_order", a > b, format!("BWT {a:.4} vs {b:.4}"));
        }
    }
    write_json(&dir.join(CHECK_FILE), &checks)?;
    Ok(checks)
}
