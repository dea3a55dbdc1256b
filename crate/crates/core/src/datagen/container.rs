//! On-disk dataset container: one directory per time step holding
//! `manifest.json` plus binary PGM images and label maps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainStream, LabeledSample, StepData, StepEntry, StreamConfig};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub label: String,
    pub domain_id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub step: Option<usize>,
    pub image_size: usize,
    pub entries: Vec<StepEntry>,
    pub samples: Vec<SampleRecord>,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamLayout {
    pub config: StreamConfig,
    pub steps: Vec<String>,
    pub unseen: Vec<String>,
}

/// Test samples of one evaluation column (a step's domain or an unseen domain).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub samples: Vec<LabeledSample>,
}

fn write_pgm(path: &Path, size: usize, pixels: impl Iterator<Item = u8>) -> Result<()> {
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend(pixels);
    fs::write(path, bytes).at(path)
}

fn read_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && (bytes[*pos].is_ascii_whitespace() || bytes[*pos] == b'#') {
        if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            *pos += 1;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Reads an 8-bit binary PGM, returning `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut pos = 0;
    if read_token(&bytes, &mut pos) != Some(b"P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut num = || -> Result<usize> {
        let tok = read_token(&bytes, &mut pos).ok_or_else(|| bad("truncated header"))?;
        std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad("non-numeric header field"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
    Ok((w, h, data.to_vec()))
}

fn write_set(
    dir: &Path,
    name: &str,
    step: Option<usize>,
    entries: &[StepEntry],
    size: usize,
    splits: [(&str, &[LabeledSample]); 3],
) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = Manifest {
        name: name.to_string(),
        step,
        image_size: size,
        entries: entries.to_vec(),
        samples: Vec::new(),
        splits: Splits::default(),
    };
    for (split, samples) in splits {
        for (i, s) in samples.iter().enumerate() {
            let id = manifest.samples.len();
            let image = format!("{split}_{i:05}_img.pgm");
            let label = format!("{split}_{i:05}_lbl.pgm");
            write_pgm(&dir.join(&image), size, s.image.iter().map(|&v| (255.0 * v).round() as u8))?;
            write_pgm(&dir.join(&label), size, s.label.iter().copied())?;
            manifest.samples.push(SampleRecord { image, label, domain_id: s.domain_id, seed: s.seed });
            match split {
                "train" => manifest.splits.train.push(id),
                "val" => manifest.splits.val.push(id),
                _ => manifest.splits.test.push(id),
            }
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)
}

/// Writes a generated stream under `root`.
pub fn write_stream(stream: &DomainStream, root: &Path) -> Result<StreamLayout> {
    fs::create_dir_all(root).at(root)?;
    let size = stream.config.image_size;
    let mut layout = StreamLayout { config: stream.config.clone(), steps: Vec::new(), unseen: Vec::new() };
    for step in &stream.steps {
        let dir = format!("step_{}", step.step);
        let name = step_name(&step.entries);
        write_set(
            &root.join(&dir),
            &name,
            Some(step.step),
            &step.entries,
            size,
            [("train", &step.train), ("val", &step.val), ("test", &step.test)],
        )?;
        layout.steps.push(dir);
    }
    for (name, test) in &stream.unseen {
        let dir = format!("unseen_{name}");
        write_set(&root.join(&dir), name, None, &[], size, [("train", &[]), ("val", &[]), ("test", test)])?;
        layout.unseen.push(dir);
    }
    let path = root.join("stream.json");
    fs::write(&path, serde_json::to_vec_pretty(&layout)?).at(&path)?;
    Ok(layout)
}

pub fn step_name(entries: &[StepEntry]) -> String {
    entries.iter().map(|e| e.domain.as_str()).collect::<Vec<_>>().join("+")
}

fn load_sample(dir: &Path, rec: &SampleRecord, size: usize) -> Result<LabeledSample> {
    let (w, h, img) = read_pgm(&dir.join(&rec.image))?;
    let (lw, lh, lbl) = read_pgm(&dir.join(&rec.label))?;
    if (w, h) != (size, size) || (lw, lh) != (size, size) {
        return Err(Error::Format { path: dir.join(&rec.image), reason: format!("expected {size}x{size} raster") });
    }
    if let Some(bad) = lbl.iter().find(|&&c| c as usize >= super::NUM_CLASSES) {
        return Err(Error::Validation(format!("label value {bad} in {}", rec.label)));
    }
    Ok(LabeledSample {
        size,
        image: img.iter().map(|&v| v as f32 / 255.0).collect(),
        label: lbl,
        domain_id: rec.domain_id,
        seed: rec.seed,
    })
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads `(train, val, test)` from one container directory.
pub fn load_split_set(dir: &Path) -> Result<(Manifest, [Vec<LabeledSample>; 3])> {
    let m = read_manifest(dir)?;
    let load = |ids: &[usize]| -> Result<Vec<LabeledSample>> {
        ids.iter()
            .map(|&i| {
                let rec = m.samples.get(i).ok_or_else(|| Error::Format {
                    path: dir.join("manifest.json"),
                    reason: format!("split references missing sample {i}"),
                })?;
                load_sample(dir, rec, m.image_size)
            })
            .collect()
    };
    let sets = [load(&m.splits.train)?, load(&m.splits.val)?, load(&m.splits.test)?];
    Ok((m, sets))
}

/// Read access to a written stream.
///
/// Training data is only reachable one step at a time through
/// [`StreamReader::load_step`]; evaluation sees test splits only.
#[derive(Clone, Debug)]
pub struct StreamReader {
    root: PathBuf,
    layout: StreamLayout,
}

impl StreamReader {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("stream.json");
        let bytes = fs::read(&path).at(&path)?;
        Ok(Self { root: root.to_path_buf(), layout: serde_json::from_slice(&bytes)? })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &StreamConfig {
        &self.layout.config
    }

    pub fn steps(&self) -> usize {
        self.layout.steps.len()
    }

    pub fn step_dir(&self, t: usize) -> Result<PathBuf> {
        t.checked_sub(1)
            .and_then(|i| self.layout.steps.get(i))
            .map(|d| self.root.join(d))
            .ok_or_else(|| Error::Lookup(format!("no time step {t}")))
    }

    /// Loads the data delivered at 1-based step `t`.
    pub fn load_step(&self, t: usize) -> Result<StepData> {
        let (m, [train, val, test]) = load_split_set(&self.step_dir(t)?)?;
        Ok(StepData { step: t, entries: m.entries, train, val, test })
    }

    /// Test splits of every scheduled step followed by every unseen domain.
    pub fn eval_sets(&self) -> Result<Vec<EvalSet>> {
        let mut sets = Vec::new();
        for dir in self.layout.steps.iter().chain(&self.layout.unseen) {
            let (m, [_, _, test]) = load_split_set(&self.root.join(dir))?;
            sets.push(EvalSet { name: m.name, samples: test });
        }
        Ok(sets)
    }
}
