//! `eval` subcommands other than the benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::{emit, write_text, CaptionArgs, Cli, EvalCmd};
use crate::error::{Error, Result};
use crate::eval::{
    amber_score, chair_score, object_frequencies, pope_f1, pope_generate, read_jsonl, CaptionInput, CaptionRecord,
    ImageObjects, Normalizer, PopeItem, PopeSplit,
};

fn read_universe(path: &Path, norm: &Normalizer) -> Result<BTreeSet<String>> {
    let names: Vec<String> = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok(norm.normalize_set(&names))
}

fn caption_records(args: &CaptionArgs) -> Result<Vec<CaptionRecord>> {
    let norm = match &args.synonyms {
        Some(p) => Normalizer::from_file(p)?,
        None => Normalizer::default(),
    };
    let universe = match &args.universe {
        Some(p) => read_universe(p, &norm)?,
        None => BTreeSet::new(),
    };
    let inputs: Vec<CaptionInput> = read_jsonl(&args.captions)?;
    if args.universe.is_none() {
        if let Some(i) = inputs.iter().position(|c| c.mentioned.is_none()) {
            return Err(Error::Schema {
                path: args.captions.display().to_string(),
                line: i + 1,
                message: "raw_caption without mentioned needs --universe".into(),
            });
        }
    }
    inputs.iter().map(|c| CaptionRecord::from_input(c, &norm, &universe)).collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image_id: String,
    objects: Vec<String>,
}

pub fn run(cli: &Cli, cmd: &EvalCmd) -> Result<()> {
    let out = cli.out.as_deref();
    match cmd {
        EvalCmd::Chair(args) => emit(&chair_score(&caption_records(args)?)?, out),
        EvalCmd::Amber(args) => emit(&amber_score(&caption_records(args)?)?, out),
        EvalCmd::PopeGen {
            annotations,
            universe,
            splits,
            k,
        } => {
            if *k < 2 {
                return Err(Error::Config("k must be at least 2".into()));
            }
            let norm = Normalizer::default();
            let lines: Vec<AnnotationLine> = read_jsonl(annotations)?;
            let images: Vec<ImageObjects> = lines
                .iter()
                .map(|l| ImageObjects {
                    image_id: l.image_id.clone(),
                    objects: norm.normalize_set(&l.objects),
                })
                .collect();
            let universe = match universe {
                Some(p) => read_universe(p, &norm)?,
                None => images.iter().flat_map(|im| im.objects.iter().cloned()).collect(),
            };
            let mut frequency = object_frequencies(&images);
            for o in &universe {
                frequency.entry(o.clone()).or_insert(0);
            }
            let splits: Vec<PopeSplit> = if splits.is_empty() {
                vec![PopeSplit::Random, PopeSplit::Popular, PopeSplit::Adversarial]
            } else {
                splits.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let seed = cli.seed.unwrap_or(0);
            let mut text = String::new();
            for split in splits {
                let generated = pope_generate(&images, &universe, &frequency, split, *k, seed)?;
                if !generated.short_images.is_empty() {
                    log::warn!(
                        "{} split: {} images received fewer negatives than requested",
                        split.as_str(),
                        generated.short_images.len()
                    );
                }
                for item in &generated.items {
                    text.push_str(&serde_json::to_string(item)?);
                    text.push('\n');
                }
            }
            write_text(&text, out)
        }
        EvalCmd::PopeScore { items } => {
            let items: Vec<PopeItem> = read_jsonl(items)?;
            let scores: BTreeMap<String, _> = pope_f1(&items)?;
            emit(&scores, out)
        }
        EvalCmd::Bench { .. } => unreachable!("dispatched separately"),
    }
}
