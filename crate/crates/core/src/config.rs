//! The tool's TOML config file: one section per module plus paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::doc_render::RenderConfig;
use crate::dv_loss::LossConfig;
use crate::error::{Error, Result};
use crate::eval_harness::{LengthRule, Policy};
use crate::label_align::LabelConfig;
use crate::patch_grid::GridConfig;
use crate::toy_model::task::TaskConfig;
use crate::toy_model::ToyConfig;
use crate::util::sha256_hex;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub frequency_table: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub prompt: String,
    pub strip: bool,
    pub lowercase: bool,
    pub contains: bool,
    pub min_chars: usize,
    pub max_chars: usize,
    pub count_spaces: bool,
    pub sweep_token_counts: Vec<usize>,
    /// Keep this many columns while sweeping; 0 searches the grid shape.
    pub sweep_cols: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let policy = Policy::default();
        let rule = LengthRule::default();
        EvalConfig {
            samples: 100,
            prompt: "read".into(),
            strip: policy.strip,
            lowercase: policy.lowercase,
            contains: policy.contains,
            min_chars: rule.min_chars,
            max_chars: rule.max_chars,
            count_spaces: rule.count_spaces,
            sweep_token_counts: vec![24, 32, 40, 48],
            sweep_cols: 8,
        }
    }
}

impl EvalConfig {
    pub fn policy(&self) -> Policy {
        Policy {
            strip: self.strip,
            lowercase: self.lowercase,
            contains: self.contains,
        }
    }

    pub fn length_rule(&self) -> LengthRule {
        LengthRule {
            min_chars: self.min_chars,
            max_chars: self.max_chars,
            count_spaces: self.count_spaces,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolConfig {
    pub seed: u64,
    pub workers: usize,
    pub grid: GridConfig,
    pub render: RenderConfig,
    pub labels: LabelConfig,
    pub loss: LossConfig,
    pub toy: ToyConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            seed: 0,
            workers: 1,
            grid: GridConfig::default(),
            render: RenderConfig::default(),
            labels: LabelConfig::default(),
            loss: LossConfig::default(),
            toy: ToyConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ToolConfig {
    /// Parse TOML; unknown keys are errors. Relative paths resolve against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ToolConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [
            &mut cfg.paths.vocab,
            &mut cfg.paths.corpus,
            &mut cfg.paths.frequency_table,
            &mut cfg.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingPath {
            key: "--config".into(),
            path: path.to_path_buf(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.loss.validate()?;
        self.toy.validate()?;
        self.task.validate()?;
        self.labels.instruction_choice()?;
        self.eval.length_rule().validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Every configured input path must exist; the error names the key.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = [
            ("paths.vocab", &self.paths.vocab),
            ("paths.corpus", &self.paths.corpus),
            ("paths.frequency_table", &self.paths.frequency_table),
        ];
        for (key, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::MissingPath {
                        key: key.into(),
                        path: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// A required input path; the error names the key when it is unset.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let slot = match key {
            "paths.vocab" => &self.paths.vocab,
            "paths.corpus" => &self.paths.corpus,
            "paths.frequency_table" => &self.paths.frequency_table,
            "paths.output_dir" => &self.paths.output_dir,
            other => return Err(Error::Config(format!("unknown path key {other}"))),
        };
        slot.as_deref()
            .ok_or_else(|| Error::Config(format!("{key} is not set in the config")))
    }

    /// Hash of the canonical JSON form of the resolved config. The worker
    /// count does not affect outputs and is left out.
    pub fn hash(&self) -> String {
        let canonical = ToolConfig {
            workers: 1,
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ToolConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(cfg, ToolConfig::default());
        assert_eq!(cfg.loss.beta, 0.3);
        assert_eq!(cfg.grid.cell, 32);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = ToolConfig::parse("[loss]\nbeta = 0.2\ngamma = 1\n", Path::new(".")).unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("gamma"));
        assert!(ToolConfig::parse("colour = 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let text = "seed = 9\n[grid]\ncell = 16\nmin_pixels = 4096\nmax_pixels = 65536\n[toy]\nsteps = 10\n";
        let cfg = ToolConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grid.cell, 16);
        assert_eq!(cfg.toy.steps, 10);
        assert_ne!(cfg.hash(), ToolConfig::default().hash());
    }

    #[test]
    fn missing_paths_name_their_key() {
        let cfg = ToolConfig::parse("[paths]\nvocab = \"nope.tsv\"\n", Path::new("/nonexistent")).unwrap();
        match cfg.check_paths().unwrap_err() {
            Error::MissingPath { key, .. } => assert_eq!(key, "paths.vocab"),
            other => panic!("{other:?}"),
        }
        let cfg = ToolConfig::default();
        assert!(cfg.require("paths.corpus").unwrap_err().to_string().contains("paths.corpus"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ToolConfig::parse("[loss]\nbeta = 1.5\n", Path::new(".")).is_err());
        assert!(ToolConfig::parse("workers = 0\n", Path::new(".")).is_err());
    }
}
