//! Run configuration, manifests and output-directory handling.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use celnet::data::SyntheticSpec;
use celnet::explain::ExplainConfig;
use celnet::localize::MaskParams;
use celnet::model::CelnetConfig;
use celnet::train::TrainConfig;
use celnet::wsi::{DetectionParams, TilingParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Every tunable of every subcommand. `seed` overrides the per-module seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: CelnetConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub splits: SplitSizes,
    pub explain: ExplainConfig,
    pub mask: MaskParams,
    pub tiling: TilingParams,
    pub detection: DetectionParams,
    pub batch_size: usize,
}

impl RunConfig {
    /// Reads a config file, or the `config` section of an emitted manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let value = match value {
            Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
                map.remove("config").unwrap()
            }
            other => other,
        };
        serde_json::from_value(value).with_context(|| format!("config {} violates the schema", path.display()))
    }

    /// Propagates the master seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synthetic.seed = self.seed;
        if self.batch_size == 0 {
            self.batch_size = 32;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        self.explain.fusion.validate()?;
        if !(0.0..=1.0).contains(&self.mask.threshold) {
            bail!("mask threshold {} outside [0, 1]", self.mask.threshold);
        }
        if !(self.detection.suppression_radius > 0.0) {
            bail!("suppression radius must be positive");
        }
        Ok(self)
    }
}

/// Patch counts written by `gen-data`; the localization count lives in `synthetic`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 5000, valid: 500, test: 1000 }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    inputs: &'a Value,
    config: &'a RunConfig,
}

/// Output directory held for the duration of a run.
pub struct OutputDir {
    pub path: PathBuf,
    lock: PathBuf,
}

const LOCK_NAME: &str = ".celnet.lock";

impl OutputDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))?;
        let lock = path.join(LOCK_NAME);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("output directory {} is locked by another run", path.display()))?;
        Ok(OutputDir { path: path.to_path_buf(), lock })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_manifest(&self, command: &str, inputs: Value, config: &RunConfig) -> Result<()> {
        let manifest = Manifest { command, version: env!("CARGO_PKG_VERSION"), inputs: &inputs, config };
        self.write_json("manifest.json", &manifest)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        let mut f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    /// One compact JSON record per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<()> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        self.write_text(name, &text)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
