//! Object-name normalisation and dictionary-based extraction from captions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::Result;

/// Irregular plurals and words that look plural but are not.
const EXCEPTIONS: &[(&str, &str)] = &[
    ("people", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("mice", "mouse"),
    ("teeth", "tooth"),
    ("feet", "foot"),
    ("geese", "goose"),
    ("knives", "knife"),
    ("wives", "wife"),
    ("buses", "bus"),
    ("bus", "bus"),
    ("glasses", "glasses"),
    ("scissors", "scissors"),
    ("skis", "ski"),
    ("sheep", "sheep"),
    ("fish", "fish"),
    ("series", "series"),
    ("species", "species"),
    ("grass", "grass"),
    ("dress", "dress"),
    ("glass", "glass"),
    ("cactus", "cactus"),
    ("tennis", "tennis"),
    ("pants", "pants"),
    ("shorts", "shorts"),
    ("jeans", "jeans"),
    ("clothes", "clothes"),
    ("ties", "tie"),
    ("pies", "pie"),
    ("cookies", "cookie"),
    ("movies", "movie"),
    ("shoes", "shoe"),
    ("toes", "toe"),
    ("horses", "horse"),
    ("vases", "vase"),
    ("bases", "base"),
    ("houses", "house"),
    ("cases", "case"),
    ("plates", "plate"),
];

/// Singular form of one word: exception list first, then suffix rules
/// (`-ies` → `-y`, `-ves` → `-f`, `-ches/-shes/-xes/-sses/-zes` → drop `es`,
/// words ending in `ss`, `us` or `is` unchanged, otherwise drop a final `s`).
pub fn singularize(word: &str) -> String {
    if let Some((_, s)) = EXCEPTIONS.iter().find(|(p, _)| *p == word) {
        return (*s).to_string();
    }
    let n = word.len();
    if n > 4 && word.ends_with("ies") {
        return format!("{}y", &word[..n - 3]);
    }
    if n > 4 && word.ends_with("ves") {
        return format!("{}f", &word[..n - 3]);
    }
    for suf in ["ches", "shes", "xes", "sses", "zes"] {
        if n > suf.len() && word.ends_with(suf) {
            return word[..n - 2].to_string();
        }
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if n > 2 && word.ends_with('s') {
        return word[..n - 1].to_string();
    }
    word.to_string()
}

/// Lowercases, trims, collapses whitespace, singularises the last word and
/// maps synonyms onto canonical names.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    synonyms: BTreeMap<String, String>,
}

impl Normalizer {
    /// `synonyms` maps surface forms to canonical names; both sides are
    /// normalised on load.
    pub fn new(synonyms: BTreeMap<String, String>) -> Self {
        let base = Normalizer::default();
        let synonyms = synonyms
            .into_iter()
            .map(|(k, v)| (base.normalize(&k), base.normalize(&v)))
            .collect();
        Self { synonyms }
    }

    /// Loads a JSON object `{"surface form": "canonical", ...}`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Self::new(map))
    }

    pub fn normalize(&self, name: &str) -> String {
        let lower = name.trim().to_lowercase();
        let mut words: Vec<&str> = lower.split_whitespace().collect();
        let last = words.pop().map(singularize);
        let mut out = words.join(" ");
        if let Some(last) = last {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&last);
        }
        match self.synonyms.get(&out) {
            Some(canon) => canon.clone(),
            None => out,
        }
    }

    pub fn normalize_set<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> BTreeSet<String> {
        names.into_iter().map(|n| self.normalize(n)).filter(|n| !n.is_empty()).collect()
    }

    /// Objects mentioned in a free-text caption: the longest (up to three
    /// word) spans whose normalised form is in `universe`.
    pub fn extract(&self, caption: &str, universe: &BTreeSet<String>) -> BTreeSet<String> {
        let cleaned: String = caption
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
            .collect();
        let words: Vec<&str> = cleaned.split_whitespace().collect();
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < words.len() {
            let mut matched = 0;
            for len in (1..=3.min(words.len() - i)).rev() {
                let name = self.normalize(&words[i..i + len].join(" "));
                if universe.contains(&name) {
                    found.insert(name);
                    matched = len;
                    break;
                }
            }
            i += matched.max(1);
        }
        found
    }
}
