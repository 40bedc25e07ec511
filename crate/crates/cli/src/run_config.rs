//! The run configuration file: TOML `key = value` lines under `[section]` headers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use catair::costmodel::{Convention, Schedule};
use catair::degrade::{DatasetRequest, STANDARD_SIGMAS};
use catair::training::TrainConfig;
use catair::{ModelConfig, Task};
use serde::{Deserialize, Serialize};

pub const ECHO_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub extend: ExtendSection,
    pub eval: EvalSection,
    pub flops: FlopsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataSection::default(),
            train: TrainConfig::default(),
            extend: ExtendSection::default(),
            eval: EvalSection::default(),
            flops: FlopsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    /// Pairs per task. Ignored when `total` is set.
    pub counts: BTreeMap<Task, usize>,
    /// Total pair count, split by `weights`.
    pub total: Option<usize>,
    pub weights: BTreeMap<Task, f64>,
    pub sigmas: Vec<u32>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            counts: [Task::Denoise, Task::Derain, Task::Dehaze].into_iter().map(|t| (t, 8)).collect(),
            total: None,
            weights: BTreeMap::new(),
            sigmas: STANDARD_SIGMAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtendSection {
    pub new_tasks: Vec<Task>,
    pub lr: f64,
    pub prompt_lr_multiplier: f64,
    /// Fine-tuning mix; empty keeps the default of double weight for new tasks.
    pub mix: BTreeMap<Task, f64>,
}

impl Default for ExtendSection {
    fn default() -> Self {
        Self {
            new_tasks: Vec::new(),
            lr: 2e-4,
            prompt_lr_multiplier: 5.0,
            mix: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub gamma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { gamma: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsSection {
    pub height: usize,
    pub width: usize,
    pub gamma: f64,
    pub convention: Convention,
    pub schedule: Schedule,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            gamma: 0.5,
            convention: Convention::Table,
            schedule: Schedule::TrueChannels,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.to_string().trim_end()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        let text = toml::to_string_pretty(self).context("serializing the run configuration")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn dataset_request(&self) -> Result<DatasetRequest> {
        let d = &self.data;
        let mut req = match d.total {
            Some(total) => DatasetRequest::weighted(&d.weights, total, d.height, d.width, self.seed)?,
            None => DatasetRequest::new(d.counts.clone(), d.height, d.width, self.seed),
        };
        if req.total() == 0 {
            bail!("the dataset request asks for no pairs");
        }
        req.sigmas = d.sigmas.clone();
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_fields() {
        let cfg = RunConfig::parse(
            "seed = 4\n[model]\nbase_channels = 8\nwindow = 4\n[train]\nsteps = 10\n[data.counts]\ndeblur = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.enc_blocks, ModelConfig::default().enc_blocks);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.data.counts, BTreeMap::from([(Task::Deblur, 2)]));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::parse("seed = 1\n\n[train]\nsteps = 3\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn unknown_section_reports_its_line() {
        let msg = RunConfig::parse("seed = 1\n[optimizer]\nlr = 1\n").unwrap_err().to_string();
        assert!(msg.contains("line 2") || msg.contains("line 1"), "{msg}");
        assert!(msg.contains("optimizer"), "{msg}");
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.extend.new_tasks = vec![Task::Lowlight];
        cfg.echo(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join(ECHO_FILE))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn weighted_request() {
        let cfg = RunConfig::parse("[data]\ntotal = 16\n[data.weights]\ndenoise = 1\nderain = 1\ndehaze = 1\ndeblur = 1\n").unwrap();
        let req = cfg.dataset_request().unwrap();
        assert!(req.counts.values().all(|&n| n == 4));
    }
}
