//! Run configuration: model source, decoding settings and inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deco::DecoConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::read_jsonl;
use crate::model::{load_weight_dump, LayerwiseModel, TokenSequence, ToyModel, ToyModelConfig, TraceReplayModel};
use crate::synthetic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Toy(ToyModelConfig),
    Trace(PathBuf),
    WeightDump(PathBuf),
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Toy(ToyModelConfig::default())
    }
}

impl ModelSource {
    pub fn load(&self) -> Result<Box<dyn LayerwiseModel>> {
        Ok(match self {
            ModelSource::Toy(cfg) => Box::new(ToyModel::new(*cfg)?),
            ModelSource::Trace(p) => Box::new(TraceReplayModel::open(p)?),
            ModelSource::WeightDump(p) => Box::new(load_weight_dump(p)?),
        })
    }

    /// Replayed traces serve steps in call order and cannot be shared
    /// between workers.
    pub fn is_replay(&self) -> bool {
        matches!(self, ModelSource::Trace(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Defaults to the depth-scaled settings of the loaded model.
    #[serde(default)]
    pub deco: Option<DecoConfig>,
    /// JSON-lines prompts file; seeded random prompts when absent.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    #[serde(default = "default_num_prompts")]
    pub num_prompts: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub verbosity: u8,
}

fn default_num_prompts() -> usize {
    8
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            decode: DecodeConfig::default(),
            deco: None,
            prompts: None,
            num_prompts: default_num_prompts(),
            out: None,
            verbosity: 0,
        }
    }
}

impl RunConfig {
    /// Parses a config file; errors name the offending key.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::Schema {
                path: origin.to_string(),
                line: e.inner().line(),
                message: if key == "." {
                    e.inner().to_string()
                } else {
                    format!("key `{key}`: {}", e.inner())
                },
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        if let ModelSource::Toy(cfg) = &self.model {
            cfg.validate()?;
        }
        let mut files: Vec<&Path> = self.prompts.iter().map(|p| p.as_path()).collect();
        match &self.model {
            ModelSource::Trace(p) | ModelSource::WeightDump(p) => files.push(p),
            ModelSource::Toy(_) => {}
        }
        for f in files {
            if !f.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} does not exist", f.display()),
                )));
            }
        }
        if self.prompts.is_none() && self.num_prompts == 0 {
            return Err(Error::Config("num_prompts must be positive".into()));
        }
        Ok(())
    }

    pub fn deco_for(&self, num_layers: usize) -> Result<DecoConfig> {
        let deco = self.deco.unwrap_or_else(|| DecoConfig::for_depth(num_layers));
        if deco.enabled {
            deco.validate(num_layers)?;
        }
        Ok(deco)
    }

    /// Prompts from the configured file, or `num_prompts` seeded random ones.
    pub fn load_prompts(&self, vocab_size: usize) -> Result<Vec<TokenSequence>> {
        let prompts = match &self.prompts {
            Some(p) => read_prompts(p)?,
            None => synthetic::random_prompts(self.decode.seed, self.num_prompts, vocab_size, 8, 8),
        };
        for p in &prompts {
            p.validate(vocab_size)?;
        }
        Ok(prompts)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptLine {
    prompt_tokens: Vec<u32>,
    #[serde(default)]
    visual_prefix_len: usize,
}

pub fn read_prompts(path: &Path) -> Result<Vec<TokenSequence>> {
    let lines: Vec<PromptLine> = read_jsonl(path)?;
    if lines.is_empty() {
        return Err(Error::invalid(format!("{} holds no prompts", path.display())));
    }
    Ok(lines
        .into_iter()
        .map(|l| TokenSequence {
            ids: l.prompt_tokens,
            visual_prefix_len: l.visual_prefix_len,
        })
        .collect())
}
