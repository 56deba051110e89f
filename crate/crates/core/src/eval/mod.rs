//! Hallucination metrics and the decoding benchmark.

mod bench;
mod captions;
mod normalize;
mod pope;

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub use bench::{bench, BenchConfig, BenchReport, LatencyStats, MIN_PROMPTS};
pub use captions::{amber_score, chair_score, AmberReport, CaptionInput, CaptionRecord, ChairReport};
pub use normalize::{singularize, Normalizer};
pub use pope::{
    co_occurrence, object_frequencies, pope_f1, pope_generate, ImageObjects, PopeGeneration, PopeItem,
    PopeScore, PopeSplit, YesNo,
};

/// Reads a JSON-lines file, skipping blank lines. Parse failures are reported
/// with their 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let value = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: origin.to_string(),
            line: i + 1,
            message: match e.path().to_string().as_str() {
                "." => e.inner().to_string(),
                p => format!("{p}: {}", e.inner()),
            },
        })?;
        out.push(value);
    }
    Ok(out)
}
