//! The run configuration document shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::SearchConfig;
use crate::augment::Guidance;
use crate::error::{Error, Result};
use crate::pipeline::{SscaConfig, TrainConfig};
use crate::testbed::{CorruptionSpec, ShortcutDatasetConfig};
use crate::tinynet::Arch;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub corruptions: Vec<CorruptionSpec>,
    /// Noise seed shared by every evaluated model.
    pub corruption_seed: u64,
    /// Correctly classified test images searched for the flip rate; 0 skips it.
    pub flip_rate_samples: usize,
    pub flip_rate_seed: u64,
    pub flip_rate_guidance: Guidance,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corruptions: CorruptionSpec::defaults(),
            corruption_seed: 0,
            flip_rate_samples: 0,
            flip_rate_seed: 0,
            flip_rate_guidance: Guidance::Counterfactual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub dataset: ShortcutDatasetConfig,
    /// `None` selects the default architecture for the dataset dimensions.
    pub arch: Option<Arch>,
    pub train: TrainConfig,
    pub ssca: SscaConfig,
    /// Search used by `attribute` and the flip-rate measurement.
    pub attribution: SearchConfig,
    pub eval: EvalConfig,
    /// Seed of the donor sampling pool.
    pub donor_seed: u64,
    /// Base directory for outputs whose path is not given on the command line.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: ShortcutDatasetConfig::default(),
            arch: None,
            train: TrainConfig::default(),
            ssca: SscaConfig::default(),
            attribution: SearchConfig::default(),
            eval: EvalConfig::default(),
            donor_seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses a configuration document. Syntax and schema errors carry
    /// the offending line and column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.ssca.validate().map_err(wrap)?;
        self.attribution.validate().map_err(wrap)?;
        self.resolved_arch().map_err(wrap)?;
        if let Some(dir) = &self.output_dir {
            if dir.is_file() {
                return Err(Error::Config(format!("output_dir {} is a file", dir.display())));
            }
        }
        Ok(())
    }

    /// The configured architecture, checked against the dataset dimensions.
    pub fn resolved_arch(&self) -> Result<Arch> {
        let (h, w, c) = self.dataset.image_dims();
        let arch = self
            .arch
            .clone()
            .unwrap_or_else(|| Arch::default_for(h, w, c, self.dataset.num_classes));
        if (arch.input_height, arch.input_width, arch.input_channels) != (h, w, c)
            || arch.num_classes != self.dataset.num_classes
        {
            return Err(Error::InvalidArchitecture(format!(
                "arch expects {}x{}x{} with {} classes, dataset is {h}x{w}x{c} with {}",
                arch.input_height, arch.input_width, arch.input_channels, arch.num_classes, self.dataset.num_classes
            )));
        }
        crate::tinynet::TinyNetParams::init(arch.clone(), 0)?;
        Ok(arch)
    }

    /// `name` under `output_dir`, or under the working directory.
    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}", "t").unwrap(), RunConfig::default());
        let text = serde_json::to_string_pretty(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text, "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = RunConfig::from_json("{\n  \"version\": 1,\n  \"trian\": {}\n}", "run.json").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("run.json:3:"), "{msg}");
        let err = RunConfig::from_json("{\"train\": {\"epochs\": 2, \"lr\": 1}}", "x").unwrap_err();
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = RunConfig::from_json("{\n\"version\": 1,\n\"dataset\": {\"seed\": }\n}", "bad.json").unwrap_err();
        assert!(err.to_string().contains("bad.json:3:"), "{err}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for doc in [
            r#"{"version": 2}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"dataset": {"p_spurious": 1.5}}"#,
            r#"{"ssca": {"mining": {"tau_aug": 2.0}}}"#,
            r#"{"arch": {"input_height": 8, "input_width": 8, "input_channels": 3, "num_classes": 4, "layers": [{"kind": "dense", "out": 4}]}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc, "t"), Err(Error::Config(_))), "{doc}");
        }
    }
}
