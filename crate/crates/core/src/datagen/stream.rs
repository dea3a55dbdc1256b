use serde::{Deserialize, Serialize};

use super::{derive_seed, preset_domains, synth_sample, DomainSpec, LabeledSample};
use crate::error::{Error, Result};

/// `count` training samples of `domain` delivered at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub domain: String,
    pub train: usize,
}

/// Declarative description of an incremental delivery schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub image_size: usize,
    pub domains: Vec<DomainSpec>,
    /// One list of entries per time step; more than one entry makes a compound domain.
    pub schedule: Vec<Vec<StepEntry>>,
    /// Domains never trained on, evaluated for forward transfer.
    #[serde(default)]
    pub unseen: Vec<String>,
    pub val_per_domain: usize,
    pub test_per_domain: usize,
    pub master_seed: u64,
}

impl StreamConfig {
    /// Three single-domain steps (A, B, C) plus the held-out domain D.
    pub fn single(image_size: usize, train_per_domain: usize, master_seed: u64) -> Self {
        let entry = |d: &str| vec![StepEntry { domain: d.into(), train: train_per_domain }];
        Self {
            image_size,
            domains: preset_domains(),
            schedule: vec![entry("A"), entry("B"), entry("C")],
            unseen: vec!["D".into()],
            val_per_domain: (train_per_domain / 10).max(4),
            test_per_domain: (train_per_domain / 4).max(8),
            master_seed,
        }
    }

    /// A, then B, then C and D mixed 50/50 into one compound step.
    pub fn compound(image_size: usize, train_per_domain: usize, master_seed: u64) -> Self {
        let half = (train_per_domain / 2).max(1);
        let mut cfg = Self::single(image_size, train_per_domain, master_seed);
        cfg.schedule[2] = vec![
            StepEntry { domain: "C".into(), train: half },
            StepEntry { domain: "D".into(), train: train_per_domain - half },
        ];
        cfg.unseen.clear();
        cfg
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("schedule references undefined domain {name}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config("a stream needs at least two domains".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 16 and at least 16",
                self.image_size
            )));
        }
        if self.test_per_domain == 0 {
            return Err(Error::Config("every domain needs a test split".into()));
        }
        let mut seen = Vec::new();
        for (t, step) in self.schedule.iter().enumerate() {
            if step.iter().map(|e| e.train).sum::<usize>() == 0 {
                return Err(Error::Config(format!("step {} has no samples", t + 1)));
            }
            for entry in step {
                self.domain_index(&entry.domain)?;
                if seen.contains(&entry.domain) {
                    return Err(Error::Config(format!("domain {} scheduled twice", entry.domain)));
                }
                seen.push(entry.domain.clone());
            }
        }
        for name in &self.unseen {
            self.domain_index(name)?;
            if seen.contains(name) {
                return Err(Error::Config(format!("unseen domain {name} is also scheduled")));
            }
        }
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }
}

/// Materialized samples of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepData {
    /// 1-based time step.
    pub step: usize,
    pub entries: Vec<StepEntry>,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// A fully generated stream: per-step data plus held-out unseen domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub config: StreamConfig,
    pub steps: Vec<StepData>,
    /// `(domain name, test samples)` for every unseen domain.
    pub unseen: Vec<(String, Vec<LabeledSample>)>,
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Val,
    Test,
}

fn generate(cfg: &StreamConfig, domain: &str, train: usize, split: Split) -> Result<Vec<LabeledSample>> {
    let d = cfg.domain_index(domain)?;
    // Sample ids are laid out train | val | test per domain so splits never overlap.
    let (start, count) = match split {
        Split::Train => (0, train),
        Split::Val => (train, cfg.val_per_domain),
        Split::Test => (train + cfg.val_per_domain, cfg.test_per_domain),
    };
    (start..start + count)
        .map(|id| {
            let seed = derive_seed(cfg.master_seed, &[d as u64, id as u64]);
            synth_sample(&cfg.domains[d], cfg.image_size, d, seed)
        })
        .collect()
}

/// Generates every step of the schedule in memory.
pub fn build_stream(cfg: &StreamConfig) -> Result<DomainStream> {
    cfg.validate()?;
    let mut steps = Vec::with_capacity(cfg.steps());
    for (t, entries) in cfg.schedule.iter().enumerate() {
        let mut step =
            StepData { step: t + 1, entries: entries.clone(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for e in entries {
            step.train.extend(generate(cfg, &e.domain, e.train, Split::Train)?);
            step.val.extend(generate(cfg, &e.domain, e.train, Split::Val)?);
            step.test.extend(generate(cfg, &e.domain, e.train, Split::Test)?);
        }
        steps.push(step);
    }
    let unseen = cfg
        .unseen
        .iter()
        .map(|name| Ok((name.clone(), generate(cfg, name, 0, Split::Test)?)))
        .collect::<Result<_>>()?;
    Ok(DomainStream { config: cfg.clone(), steps, unseen })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_preset_has_three_steps_and_an_unseen_domain() {
        let s = build_stream(&StreamConfig::single(16, 8, 1)).unwrap();
        assert_eq!(s.steps.len(), 3);
        assert!(s.steps.iter().all(|st| st.entries.len() == 1 && st.train.len() == 8));
        assert_eq!(s.unseen.len(), 1);
        assert_eq!(s.unseen[0].0, "D");
    }

    #[test]
    fn compound_preset_mixes_two_domains_in_step_three() {
        let s = build_stream(&StreamConfig::compound(16, 8, 1)).unwrap();
        let last = &s.steps[2];
        assert_eq!(last.entries.len(), 2);
        assert_eq!(last.train.len(), 8);
        let ids: std::collections::BTreeSet<_> = last.train.iter().map(|x| x.domain_id).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn empty_schedule_and_unknown_domain_are_config_errors() {
        let mut cfg = StreamConfig::single(16, 4, 0);
        cfg.schedule.clear();
        assert!(matches!(build_stream(&cfg), Err(Error::Config(_))));
        let mut cfg = StreamConfig::single(16, 4, 0);
        cfg.schedule[0][0].domain = "Z".into();
        assert!(matches!(build_stream(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn regeneration_is_bit_identical_and_splits_are_disjoint() {
        let cfg = StreamConfig::single(16, 6, 3);
        let a = build_stream(&cfg).unwrap();
        assert_eq!(a, build_stream(&cfg).unwrap());
        for step in &a.steps {
            let mut seeds: Vec<u64> = step.train.iter().chain(&step.val).chain(&step.test).map(|s| s.seed).collect();
            let n = seeds.len();
            seeds.sort_unstable();
            seeds.dedup();
            assert_eq!(seeds.len(), n);
        }
    }
}
