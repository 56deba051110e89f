//! POPE polling questions: generation under the random, popular and
//! adversarial negative-sampling policies, and yes/no scoring.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeSplit {
    Random,
    Popular,
    Adversarial,
}

impl PopeSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            PopeSplit::Random => "random",
            PopeSplit::Popular => "popular",
            PopeSplit::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for PopeSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PopeSplit::Random),
            "popular" => Ok(PopeSplit::Popular),
            "adversarial" => Ok(PopeSplit::Adversarial),
            _ => Err(Error::Config(format!("unknown POPE split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopeItem {
    pub image_id: String,
    pub object: String,
    pub gold: YesNo,
    pub split: PopeSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<YesNo>,
}

impl PopeItem {
    pub fn question(&self) -> String {
        format!("Is there a {} in the image?", self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageObjects {
    pub image_id: String,
    pub objects: BTreeSet<String>,
}

/// Number of images containing each object.
pub fn object_frequencies(images: &[ImageObjects]) -> BTreeMap<String, usize> {
    let mut freq = BTreeMap::new();
    for im in images {
        for o in &im.objects {
            *freq.entry(o.clone()).or_insert(0) += 1;
        }
    }
    freq
}

/// Number of images containing both objects, keyed by ordered pair.
pub fn co_occurrence(images: &[ImageObjects]) -> BTreeMap<(String, String), usize> {
    let mut co = BTreeMap::new();
    for im in images {
        for a in &im.objects {
            for b in &im.objects {
                if a != b {
                    *co.entry((a.clone(), b.clone())).or_insert(0) += 1;
                }
            }
        }
    }
    co
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopeGeneration {
    pub items: Vec<PopeItem>,
    /// Images that received fewer negatives than requested.
    pub short_images: Vec<String>,
}

/// `k / 2` positives sampled from the objects present in each image and
/// `k / 2` negatives chosen from the absent ones by the split policy:
/// uniform (random), highest frequency (popular), or highest summed
/// co-occurrence with the present objects (adversarial). Ranking ties are
/// broken by object name.
pub fn pope_generate(
    images: &[ImageObjects],
    universe: &BTreeSet<String>,
    frequency: &BTreeMap<String, usize>,
    split: PopeSplit,
    k: usize,
    seed: u64,
) -> Result<PopeGeneration> {
    if let Some(o) = universe.iter().find(|o| !frequency.contains_key(*o)) {
        return Err(Error::invalid(format!("frequency table does not cover object {o:?}")));
    }
    let co = co_occurrence(images);
    let mut rng = rng::stream(seed, rng::STREAM_POPE);
    let half = k / 2;
    let mut items = Vec::new();
    let mut short_images = Vec::new();
    for im in images {
        let present: Vec<&String> = im.objects.iter().collect();
        let mut positives: Vec<&String> = present.choose_multiple(&mut rng, half.min(present.len())).copied().collect();
        positives.sort();
        let absent: Vec<&String> = universe.iter().filter(|o| !im.objects.contains(*o)).collect();
        let mut negatives: Vec<&String> = match split {
            PopeSplit::Random => absent.choose_multiple(&mut rng, half.min(absent.len())).copied().collect(),
            PopeSplit::Popular => {
                let mut ranked = absent.clone();
                ranked.sort_by(|a, b| frequency[*b].cmp(&frequency[*a]).then(a.cmp(b)));
                ranked.truncate(half);
                ranked
            }
            PopeSplit::Adversarial => {
                let score = |o: &String| -> usize {
                    present
                        .iter()
                        .map(|p| co.get(&(o.clone(), (*p).clone())).copied().unwrap_or(0))
                        .sum()
                };
                let mut ranked: Vec<(usize, &String)> = absent.iter().map(|o| (score(o), *o)).collect();
                ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
                ranked.into_iter().take(half).map(|(_, o)| o).collect()
            }
        };
        negatives.sort();
        if negatives.len() < half {
            log::warn!(
                "image {}: only {} negatives available, {half} requested",
                im.image_id,
                negatives.len()
            );
            short_images.push(im.image_id.clone());
        }
        for (objs, gold) in [(positives, YesNo::Yes), (negatives, YesNo::No)] {
            for o in objs {
                items.push(PopeItem {
                    image_id: im.image_id.clone(),
                    object: o.clone(),
                    gold,
                    split,
                    answer: None,
                });
            }
        }
    }
    Ok(PopeGeneration { items, short_images })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    /// Set when the model never answered "yes".
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn score(items: &[&PopeItem]) -> PopeScore {
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for it in items {
        match (it.gold, it.answer.expect("answers checked")) {
            (YesNo::Yes, YesNo::Yes) => tp += 1,
            (YesNo::No, YesNo::Yes) => fp += 1,
            (YesNo::No, YesNo::No) => tn += 1,
            (YesNo::Yes, YesNo::No) => fneg += 1,
        }
    }
    let div = |n: usize, d: usize| if d == 0 { (0.0, true) } else { (n as f64 / d as f64, false) };
    let (precision, precision_undefined) = div(tp, tp + fp);
    let (recall, recall_undefined) = div(tp, tp + fneg);
    let (f1, f1_undefined) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    PopeScore {
        precision,
        recall,
        f1,
        accuracy: (tp + tn) as f64 / items.len() as f64,
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    }
}

/// Scores per split plus an `"all"` entry, treating "yes" as the positive
/// class.
pub fn pope_f1(items: &[PopeItem]) -> Result<BTreeMap<String, PopeScore>> {
    if items.is_empty() {
        return Err(Error::invalid("no POPE items to score"));
    }
    if let Some(i) = items.iter().position(|it| it.answer.is_none()) {
        return Err(Error::invalid(format!("POPE item {i} has no answer")));
    }
    let mut by_split: BTreeMap<&str, Vec<&PopeItem>> = BTreeMap::new();
    for it in items {
        by_split.entry(it.split.as_str()).or_default().push(it);
    }
    let mut out: BTreeMap<String, PopeScore> = by_split.iter().map(|(k, v)| (k.to_string(), score(v))).collect();
    out.insert("all".into(), score(&items.iter().collect::<Vec<_>>()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str, objs: &[&str]) -> ImageObjects {
        ImageObjects {
            image_id: id.into(),
            objects: objs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn answered(gold: YesNo, answer: YesNo) -> PopeItem {
        PopeItem {
            image_id: "i".into(),
            object: "o".into(),
            gold,
            split: PopeSplit::Random,
            answer: Some(answer),
        }
    }

    #[test]
    fn confusion_matrix_example() {
        use YesNo::*;
        let items = vec![
            answered(Yes, Yes),
            answered(Yes, Yes),
            answered(No, Yes),
            answered(Yes, No),
            answered(No, No),
        ];
        let s = &pope_f1(&items).unwrap()["random"];
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.accuracy - 0.6).abs() < 1e-12);
    }

    #[test]
    fn all_no_is_flagged() {
        use YesNo::*;
        let items = vec![answered(Yes, No), answered(No, No)];
        let s = &pope_f1(&items).unwrap()["all"];
        assert_eq!((s.recall, s.f1), (0.0, 0.0));
        assert!(s.precision_undefined && s.f1_undefined);
    }

    #[test]
    fn perfect_answers() {
        use YesNo::*;
        let s = &pope_f1(&[answered(Yes, Yes), answered(No, No)]).unwrap()["all"];
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn unanswered_rejected() {
        let mut it = answered(YesNo::Yes, YesNo::Yes);
        it.answer = None;
        assert!(pope_f1(&[it]).is_err());
    }

    #[test]
    fn question_text() {
        let it = answered(YesNo::Yes, YesNo::Yes);
        assert_eq!(it.question(), "Is there a o in the image?");
    }

    #[test]
    fn popular_picks_dominant_object() {
        let images = vec![
            img("1", &["table", "cup"]),
            img("2", &["table", "dog"]),
            img("3", &["cat"]),
            img("4", &["table", "cat"]),
        ];
        let freq = object_frequencies(&images);
        let universe: BTreeSet<String> = freq.keys().cloned().collect();
        let g = pope_generate(&images, &universe, &freq, PopeSplit::Popular, 2, 0).unwrap();
        let neg = |id: &str| {
            g.items
                .iter()
                .find(|it| it.image_id == id && it.gold == YesNo::No)
                .map(|it| it.object.clone())
        };
        assert_eq!(neg("3").as_deref(), Some("table"));
        // image 1 lacks cat (2 images) and dog (1)
        assert_eq!(neg("1").as_deref(), Some("cat"));
    }

    #[test]
    fn adversarial_prefers_co_occurring() {
        let images = vec![
            img("1", &["fork", "knife"]),
            img("2", &["fork", "knife"]),
            img("3", &["fork"]),
            img("4", &["dog", "ball"]),
            img("5", &["dog", "ball"]),
            img("6", &["dog", "ball"]),
        ];
        let freq = object_frequencies(&images);
        let universe: BTreeSet<String> = freq.keys().cloned().collect();
        let g = pope_generate(&images, &universe, &freq, PopeSplit::Adversarial, 2, 0).unwrap();
        let neg: Vec<_> = g.items.iter().filter(|it| it.image_id == "3" && it.gold == YesNo::No).collect();
        assert_eq!(neg[0].object, "knife");
    }

    #[test]
    fn full_image_gets_no_negatives() {
        let images = vec![img("1", &["a", "b"]), img("2", &["a"])];
        let freq = object_frequencies(&images);
        let universe: BTreeSet<String> = freq.keys().cloned().collect();
        let g = pope_generate(&images, &universe, &freq, PopeSplit::Random, 4, 1).unwrap();
        assert_eq!(g.short_images, vec!["1".to_string(), "2".to_string()]);
        assert!(!g.items.iter().any(|it| it.image_id == "1" && it.gold == YesNo::No));
    }

    #[test]
    fn frequency_must_cover_universe() {
        let images = vec![img("1", &["a"])];
        let universe: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let freq = object_frequencies(&images);
        assert!(pope_generate(&images, &universe, &freq, PopeSplit::Random, 2, 0).is_err());
    }

    #[test]
    fn random_split_deterministic() {
        let images: Vec<_> = (0..5).map(|i| img(&i.to_string(), &["a", "b", "c"][..1 + i % 3])).collect();
        let mut freq = object_frequencies(&images);
        for o in ["d", "e", "f"] {
            freq.insert(o.into(), 0);
        }
        let universe: BTreeSet<String> = freq.keys().cloned().collect();
        let a = pope_generate(&images, &universe, &freq, PopeSplit::Random, 4, 9).unwrap();
        let b = pope_generate(&images, &universe, &freq, PopeSplit::Random, 4, 9).unwrap();
        assert_eq!(a, b);
    }
}
