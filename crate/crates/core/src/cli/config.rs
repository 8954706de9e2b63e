//! Run configuration: one TOML file with a section per component. Model
//! sections start from a named preset (`preset = "desk"` or `"full"`) and
//! override individual fields; unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::AblationConfig;
use crate::cfm::CFMConfig;
use crate::error::{ensure, Error, Result};
use crate::lm::LMConfig;
use crate::rapbank::{SegmentParams, Subset, SubsetThresholds};

/// Which examples a training stage draws from. Subsets are nested, so
/// `standard` also includes premium segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagePool {
    All,
    Basic,
    Standard,
    Premium,
}

impl StagePool {
    pub fn admits(self, subset: Option<Subset>) -> bool {
        let floor = match self {
            StagePool::All => return true,
            StagePool::Basic => Subset::Basic,
            StagePool::Standard => Subset::Standard,
            StagePool::Premium => Subset::Premium,
        };
        subset.is_some_and(|s| s >= floor)
    }

    pub fn name(self) -> &'static str {
        match self {
            StagePool::All => "all",
            StagePool::Basic => "basic",
            StagePool::Standard => "standard",
            StagePool::Premium => "premium",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub pool: StagePool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// JSONL index of training examples.
    pub data: Option<PathBuf>,
    /// K-means codebook used to tokenize vocal features.
    pub codebook: Option<PathBuf>,
    pub batch: usize,
    pub micro_batches: usize,
    pub lr: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Ordered curriculum; schedule lengths have no default.
    pub stages: Vec<Stage>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            data: None,
            codebook: None,
            batch: 4,
            micro_batches: 1,
            lr: 1e-3,
            checkpoint_every: 0,
            stages: Vec::new(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch >= 1 && self.micro_batches >= 1, "batch sizes must be positive");
        ensure!(self.lr.is_finite() && self.lr > 0.0, "learning rate must be positive");
        ensure!(
            !self.stages.is_empty(),
            "training needs at least one stage; give [[train.stages]] with pool and steps"
        );
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Stage index that owns global step `step`.
    pub fn stage_at(&self, step: usize) -> Option<usize> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.steps;
            if step < end {
                return Some(i);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub temperature: f64,
    pub top_k: usize,
    pub max_tokens: Option<usize>,
    /// Euler steps; defaults to the decoder's configured count.
    pub cfm_steps: Option<usize>,
    pub griffin_lim_iters: usize,
    /// External vocoder command; Griffin-Lim is used when absent.
    pub vocoder: Option<String>,
    /// Length of the reference excerpt fed to the speaker encoders.
    pub reference_seconds: f64,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_k: 40,
            max_tokens: None,
            cfm_steps: None,
            griffin_lim_iters: 32,
            vocoder: None,
            reference_seconds: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub lm: LMConfig,
    pub cfm: CFMConfig,
    pub thresholds: SubsetThresholds,
    pub segment: SegmentParams,
    pub train: TrainSettings,
    pub generate: GenerateSettings,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            lm: LMConfig::desk(),
            cfm: CFMConfig::desk(),
            thresholds: SubsetThresholds::default(),
            segment: SegmentParams::default(),
            train: TrainSettings::default(),
            generate: GenerateSettings::default(),
            ablation: AblationConfig::default(),
        }
    }
}

const SECTIONS: [&str; 8] = [
    "seed",
    "lm",
    "cfm",
    "thresholds",
    "segment",
    "train",
    "generate",
    "ablation",
];

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn section<T: Serialize + DeserializeOwned>(
    table: &mut toml::Table,
    key: &str,
    preset: impl Fn(&str) -> Option<T>,
    default_preset: &str,
) -> Result<T> {
    let mut overlay = match table.remove(key) {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(Error::invalid(format!("[{key}] must be a table"))),
    };
    let name = match overlay.remove("preset") {
        None => default_preset.to_string(),
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(Error::invalid(format!("[{key}] preset must be a string"))),
    };
    let base = preset(&name).ok_or_else(|| Error::invalid(format!("unknown [{key}] preset `{name}`")))?;
    let mut merged = toml::Table::try_from(&base).map_err(|e| Error::invalid(e.to_string()))?;
    merge(&mut merged, overlay);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::invalid(format!("[{key}]: {}", e.message())))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::invalid(e.to_string()))?;
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::invalid(format!("unknown configuration key `{k}`")));
        }
        let seed = match table.remove("seed") {
            Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(_) => return Err(Error::invalid("seed must be a non-negative integer")),
            None => return Err(Error::invalid("configuration files must set `seed` explicitly")),
        };
        let lm = section(
            &mut table,
            "lm",
            |p| match p {
                "desk" => Some(LMConfig::desk()),
                "full" => Some(LMConfig::default()),
                _ => None,
            },
            "desk",
        )?;
        let cfm = section(
            &mut table,
            "cfm",
            |p| match p {
                "desk" => Some(CFMConfig::desk()),
                "full" => Some(CFMConfig::default()),
                _ => None,
            },
            "desk",
        )?;
        let default_only = |p: &str| p == "default";
        let thresholds: SubsetThresholds =
            section(&mut table, "thresholds", |p| default_only(p).then(SubsetThresholds::default), "default")?;
        let segment = section(&mut table, "segment", |p| default_only(p).then(SegmentParams::default), "default")?;
        let train = section(&mut table, "train", |p| default_only(p).then(TrainSettings::default), "default")?;
        let generate = section(&mut table, "generate", |p| default_only(p).then(GenerateSettings::default), "default")?;
        let ablation = section(&mut table, "ablation", |p| default_only(p).then(AblationConfig::default), "default")?;
        lm.validate()?;
        cfm.validate()?;
        thresholds.validate()?;
        Ok(Self {
            seed,
            lm,
            cfm,
            thresholds,
            segment,
            train,
            generate,
            ablation,
        })
    }

    /// Load a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::formats::read_text(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidInput(message) => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train.data, &mut cfg.train.codebook].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
