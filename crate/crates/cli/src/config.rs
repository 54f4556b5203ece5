//! Experiment configuration: one flat `key = value` file covering every stage.
//!
//! Keys are either top-level (`seed`, `split.ratios`, ...) or prefixed with
//! the section they configure (`synth.`, `model.`, `train.`). Component seeds
//! default to the root seed unless set explicitly.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use turnshift::config::{parse_bool, parse_entries, parse_list, parse_value, KeyValue};
use turnshift::corpus::SynthConfig;
use turnshift::model::ModelConfig;
use turnshift::sequencing::DEFAULT_WINDOW;
use turnshift::training::TrainConfig;

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub vocab_min_count: u64,
    pub vocab_max_size: usize,
    pub window: usize,
    /// Count every baseline position in the loss, not only CU targets.
    pub full_lm_loss: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub subset_size: usize,
    pub annotator: String,
    pub embedder: String,
}

#[derive(Debug, Default, Clone, Copy)]
struct ExplicitSeeds {
    synth: bool,
    split: bool,
    model: bool,
    train: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            seed: DEFAULT_SEED,
            synth: SynthConfig::default(),
            split_ratios: [8.0 / 9.0, 1.0 / 18.0, 1.0 / 18.0],
            split_seed: DEFAULT_SEED,
            vocab_min_count: 1,
            vocab_max_size: 20_000,
            window: DEFAULT_WINDOW,
            full_lm_loss: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            subset_size: turnshift::analysis::DEFAULT_SUBSET_SIZE,
            annotator: "oracle".into(),
            embedder: "hidden".into(),
        };
        cfg.set_root_seed(DEFAULT_SEED, ExplicitSeeds::default());
        cfg
    }
}

impl ExperimentConfig {
    fn set_root_seed(&mut self, seed: u64, explicit: ExplicitSeeds) {
        self.seed = seed;
        if !explicit.synth {
            self.synth.seed = seed;
        }
        if !explicit.split {
            self.split_seed = seed;
        }
        if !explicit.model {
            self.model.seed = seed;
        }
        if !explicit.train {
            self.train.seed = seed;
        }
    }

    /// Defaults, then the optional file, then the command-line root seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut explicit = ExplicitSeeds::default();
        let mut root = DEFAULT_SEED;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let entries = parse_entries(&text).with_context(|| format!("in {}", path.display()))?;
            for e in entries {
                let at = || format!("{}:{}", path.display(), e.line);
                match e.key.as_str() {
                    "seed" => root = parse_value(&e.key, &e.value).with_context(at)?,
                    "synth.seed" => explicit.synth = true,
                    "split.seed" => explicit.split = true,
                    "model.seed" => explicit.model = true,
                    "train.seed" => explicit.train = true,
                    _ => {}
                }
                if e.key != "seed" {
                    cfg.set(&e.key, &e.value).with_context(at)?;
                }
            }
        }
        cfg.set_root_seed(seed.unwrap_or(root), explicit);
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("synth.") {
            self.synth.set(k, value)?;
        } else if let Some(k) = key.strip_prefix("model.") {
            if k == "vocab_size" {
                bail!("model.vocab_size is taken from the vocabulary and cannot be set");
            }
            self.model.set(k, value)?;
        } else if let Some(k) = key.strip_prefix("train.") {
            if k == "variant" {
                bail!("the variant is chosen per command with --variant");
            }
            self.train.set(k, value)?;
        } else {
            match key {
                "split.ratios" => {
                    let parts = parse_list(value)
                        .iter()
                        .map(|p| parse_value::<f64>(key, p))
                        .collect::<turnshift::Result<Vec<_>>>()?;
                    self.split_ratios = parts
                        .try_into()
                        .map_err(|_| anyhow::anyhow!("split.ratios needs three values"))?;
                }
                "split.seed" => self.split_seed = parse_value(key, value)?,
                "vocab.min_count" => self.vocab_min_count = parse_value(key, value)?,
                "vocab.max_size" => self.vocab_max_size = parse_value(key, value)?,
                "data.window" => self.window = parse_value(key, value)?,
                "data.full_lm_loss" => self.full_lm_loss = parse_bool(key, value)?,
                "analysis.subset_size" => self.subset_size = parse_value(key, value)?,
                "analysis.annotator" => self.annotator = value.to_owned(),
                "analysis.embedder" => self.embedder = value.to_owned(),
                _ => bail!("unknown key {key:?}"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(1);
        model.validate()?;
        if self.window < 3 {
            bail!("data.window must be at least 3");
        }
        if self.subset_size == 0 {
            bail!("analysis.subset_size must be at least 1");
        }
        if !["oracle", "heuristic", "import"].contains(&self.annotator.as_str()) {
            bail!("analysis.annotator must be oracle, heuristic or import");
        }
        if !["hidden", "token"].contains(&self.embedder.as_str()) {
            bail!("analysis.embedder must be hidden or token");
        }
        Ok(())
    }
}
