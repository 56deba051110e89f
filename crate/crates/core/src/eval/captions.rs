//! Caption-level object hallucination metrics: CHAIR and AMBER-style
//! CHAIR/Cover/Hal/Cog.
//!
//! Ratios whose denominator is zero are reported as 0 with a flag set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::normalize::Normalizer;
use crate::error::{Error, Result};

/// One line of a caption/annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionInput {
    pub image_id: String,
    #[serde(default)]
    pub mentioned: Option<Vec<String>>,
    #[serde(default)]
    pub raw_caption: Option<String>,
    pub ground_truth: Vec<String>,
    #[serde(default)]
    pub potential_hallucinations: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub mentioned: BTreeSet<String>,
    pub ground_truth: BTreeSet<String>,
    pub potential_hallucinations: Option<BTreeSet<String>>,
}

impl CaptionRecord {
    pub fn new<S: AsRef<str>>(image_id: &str, mentioned: &[S], ground_truth: &[S]) -> Self {
        let set = |v: &[S]| v.iter().map(|s| s.as_ref().to_string()).collect();
        Self {
            image_id: image_id.into(),
            mentioned: set(mentioned),
            ground_truth: set(ground_truth),
            potential_hallucinations: None,
        }
    }

    pub fn with_potential<S: AsRef<str>>(mut self, potential: &[S]) -> Self {
        self.potential_hallucinations = Some(potential.iter().map(|s| s.as_ref().to_string()).collect());
        self
    }

    pub fn hallucinated(&self) -> impl Iterator<Item = &String> {
        self.mentioned.difference(&self.ground_truth)
    }

    /// Normalises an input line. Captions without an explicit mention list are
    /// run through the dictionary extractor against `universe`.
    pub fn from_input(input: &CaptionInput, norm: &Normalizer, universe: &BTreeSet<String>) -> Result<Self> {
        let mentioned = match (&input.mentioned, &input.raw_caption) {
            (Some(m), _) => norm.normalize_set(m),
            (None, Some(caption)) => norm.extract(caption, universe),
            (None, None) => {
                return Err(Error::invalid(format!(
                    "record {} has neither mentioned nor raw_caption",
                    input.image_id
                )))
            }
        };
        Ok(Self {
            image_id: input.image_id.clone(),
            mentioned,
            ground_truth: norm.normalize_set(&input.ground_truth),
            potential_hallucinations: input.potential_hallucinations.as_ref().map(|p| norm.normalize_set(p)),
        })
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairReport {
    pub chair_i: f64,
    pub chair_s: f64,
    pub hallucinated_objects: usize,
    pub mentioned_objects: usize,
    pub hallucinated_captions: usize,
    pub captions: usize,
    /// Set when no objects were mentioned at all.
    pub chair_i_undefined: bool,
}

pub fn chair_score(records: &[CaptionRecord]) -> Result<ChairReport> {
    if records.is_empty() {
        return Err(Error::invalid("CHAIR over no captions"));
    }
    let mut hallucinated_objects = 0;
    let mut mentioned_objects = 0;
    let mut hallucinated_captions = 0;
    for r in records {
        let h = r.hallucinated().count();
        hallucinated_objects += h;
        mentioned_objects += r.mentioned.len();
        if h > 0 {
            hallucinated_captions += 1;
        }
    }
    let (chair_i, chair_i_undefined) = ratio(hallucinated_objects, mentioned_objects);
    Ok(ChairReport {
        chair_i,
        chair_s: hallucinated_captions as f64 / records.len() as f64,
        hallucinated_objects,
        mentioned_objects,
        hallucinated_captions,
        captions: records.len(),
        chair_i_undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmberReport {
    pub chair: f64,
    /// Micro-averaged: covered truth objects over all truth objects.
    pub cover: f64,
    /// Mean of per-record coverage.
    pub cover_macro: f64,
    pub hal: f64,
    /// Hallucinated mentions that are annotated potential hallucinations,
    /// over all hallucinated mentions.
    pub cog: f64,
    pub chair_undefined: bool,
    pub cover_undefined: bool,
    pub cog_undefined: bool,
    /// Records left out of Cover because their truth set is empty.
    pub cover_excluded: Vec<String>,
    pub hallucinated_mentions: usize,
    pub mentioned_objects: usize,
    pub covered_truth: usize,
    pub truth_objects: usize,
    pub cog_hits: usize,
}

pub fn amber_score(records: &[CaptionRecord]) -> Result<AmberReport> {
    if records.is_empty() {
        return Err(Error::invalid("AMBER over no captions"));
    }
    if let Some(r) = records.iter().find(|r| r.potential_hallucinations.is_none()) {
        return Err(Error::invalid(format!(
            "record {} has no potential-hallucination set",
            r.image_id
        )));
    }
    let chair = chair_score(records)?;
    let mut covered_truth = 0;
    let mut truth_objects = 0;
    let mut macro_sum = 0.0;
    let mut macro_n = 0;
    let mut cover_excluded = Vec::new();
    let mut cog_hits = 0;
    for r in records {
        if r.ground_truth.is_empty() {
            cover_excluded.push(r.image_id.clone());
        } else {
            let c = r.mentioned.intersection(&r.ground_truth).count();
            covered_truth += c;
            truth_objects += r.ground_truth.len();
            macro_sum += c as f64 / r.ground_truth.len() as f64;
            macro_n += 1;
        }
        let potential = r.potential_hallucinations.as_ref().expect("checked above");
        cog_hits += r.hallucinated().filter(|o| potential.contains(*o)).count();
    }
    if !cover_excluded.is_empty() {
        log::warn!("{} records with empty truth sets excluded from cover", cover_excluded.len());
    }
    let (cover, cover_undefined) = ratio(covered_truth, truth_objects);
    let (cog, cog_undefined) = ratio(cog_hits, chair.hallucinated_objects);
    Ok(AmberReport {
        chair: chair.chair_i,
        cover,
        cover_macro: if macro_n == 0 { 0.0 } else { macro_sum / macro_n as f64 },
        hal: chair.chair_s,
        cog,
        chair_undefined: chair.chair_i_undefined,
        cover_undefined,
        cog_undefined,
        cover_excluded,
        hallucinated_mentions: chair.hallucinated_objects,
        mentioned_objects: chair.mentioned_objects,
        covered_truth,
        truth_objects,
        cog_hits,
    })
}
