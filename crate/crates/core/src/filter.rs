//! Pre-filtering of scene objects down to those an utterance is about.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::llm::{ChatTurn, LlmClient};
use crate::scene::SceneTranscript;

/// Words that make room structure relevant even when not named directly.
pub const SPATIAL_ANCHORS: [&str; 4] = ["corner", "room", "wall", "floor"];
/// Categories kept whenever a spatial anchor word appears.
pub const STRUCTURE_CATEGORIES: [&str; 2] = ["wall", "floor"];

const BUILTIN_LEXICON: &str = include_str!("../assets/lexicon.json");

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad lexicon JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Category synonyms and hypernyms. Relations are used in both directions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Self {
        let entries = entries
            .into_iter()
            .map(|(k, v)| {
                (
                    k.trim().to_lowercase(),
                    v.into_iter().map(|s| s.trim().to_lowercase()).collect(),
                )
            })
            .collect();
        Self { entries }
    }

    /// The lexicon shipped with the crate (common ScanNet categories).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Adds or extends entries from another lexicon.
    pub fn extend(&mut self, other: Lexicon) {
        for (k, v) in other.entries {
            let slot = self.entries.entry(k).or_default();
            for term in v {
                if !slot.contains(&term) {
                    slot.push(term);
                }
            }
        }
    }

    /// Every term that can name objects of `category`.
    pub fn terms_for(&self, category: &str) -> BTreeSet<String> {
        let mut terms = BTreeSet::from([category.to_string()]);
        if let Some(direct) = self.entries.get(category) {
            terms.extend(direct.iter().cloned());
        }
        for (key, related) in &self.entries {
            if related.iter().any(|r| r == category) {
                terms.insert(key.clone());
            }
        }
        terms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    Lexical,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterResult {
    pub kept_ids: BTreeSet<u32>,
    pub method: FilterMethod,
    pub rationale: Option<String>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn word_matches(token: &str, word: &str) -> bool {
    if token == word {
        return true;
    }
    if let Some(stem) = token.strip_suffix("ies") {
        if word.strip_suffix('y') == Some(stem) {
            return true;
        }
    }
    token.strip_suffix("es") == Some(word) || token.strip_suffix('s') == Some(word)
}

/// Whether the tokenized utterance contains `term` as a (possibly plural)
/// word or word sequence.
fn mentions(tokens: &[String], term: &str) -> bool {
    let words = tokenize(term);
    if words.is_empty() || words.len() > tokens.len() {
        return false;
    }
    tokens.windows(words.len()).any(|window| {
        window
            .iter()
            .zip(&words)
            .all(|(tok, word)| word_matches(tok, word))
    })
}

pub fn filter_lexical(scene: &SceneTranscript, utterance: &str, lexicon: &Lexicon) -> FilterResult {
    let tokens = tokenize(utterance);
    let mut kept = BTreeSet::new();
    let mut terms_cache: BTreeMap<&str, bool> = BTreeMap::new();
    for obj in &scene.objects {
        let hit = *terms_cache.entry(obj.category.as_str()).or_insert_with(|| {
            lexicon
                .terms_for(&obj.category)
                .iter()
                .any(|term| mentions(&tokens, term))
        });
        if hit {
            kept.insert(obj.id);
        }
    }
    if kept.is_empty() {
        return FilterResult {
            kept_ids: scene.ids(),
            method: FilterMethod::Lexical,
            rationale: Some("no lexical match".into()),
        };
    }
    if SPATIAL_ANCHORS.iter().any(|a| mentions(&tokens, a)) {
        kept.extend(
            scene
                .objects
                .iter()
                .filter(|o| STRUCTURE_CATEGORIES.contains(&o.category.as_str()))
                .map(|o| o.id),
        );
    }
    FilterResult {
        kept_ids: kept,
        method: FilterMethod::Lexical,
        rationale: None,
    }
}

const FILTER_INSTRUCTIONS: &str = "You pick out the objects of a 3D scene that are relevant to a \
referring expression: the referred object, every object of the same kind, and every object the \
expression uses as a reference (including walls or floor for spatial words such as corner). \
Reply with a JSON list of relevant object ids, for example [3, 7, 12], and nothing else.";

pub fn filter_prompt(scene: &SceneTranscript, utterance: &str) -> Vec<ChatTurn> {
    let listing: Vec<String> = scene
        .objects
        .iter()
        .map(|o| format!("{}: {}", o.id, o.category))
        .collect();
    vec![
        ChatTurn::system(FILTER_INSTRUCTIONS),
        ChatTurn::user(format!(
            "Objects (id: category):\n{}\n\nReferring expression: {}",
            listing.join("\n"),
            utterance
        )),
    ]
}

/// Reads the first JSON list in `reply`. Integers are taken as ids, strings
/// as category names.
fn parse_selection(reply: &str, scene: &SceneTranscript) -> Option<(BTreeSet<u32>, Vec<u64>)> {
    let start = reply.find('[')?;
    let end = start + reply[start..].find(']')?;
    let items: Vec<serde_json::Value> = serde_json::from_str(&reply[start..=end]).ok()?;
    let mut kept = BTreeSet::new();
    let mut dropped = Vec::new();
    for item in items {
        match item {
            serde_json::Value::Number(n) => {
                let id = n.as_u64()?;
                match u32::try_from(id)
                    .ok()
                    .filter(|id| scene.object(*id).is_some())
                {
                    Some(id) => {
                        kept.insert(id);
                    }
                    None => dropped.push(id),
                }
            }
            serde_json::Value::String(s) => {
                let category = s.trim().to_lowercase();
                kept.extend(
                    scene
                        .objects
                        .iter()
                        .filter(|o| o.category == category)
                        .map(|o| o.id),
                );
            }
            _ => return None,
        }
    }
    Some((kept, dropped))
}

/// Asks the model for the relevant ids; any failure falls back to
/// [`filter_lexical`] with the cause recorded.
pub fn filter_llm(
    scene: &SceneTranscript,
    utterance: &str,
    llm: &dyn LlmClient,
    lexicon: &Lexicon,
) -> FilterResult {
    let fallback = |why: String| {
        let mut result = filter_lexical(scene, utterance, lexicon);
        result.rationale = Some(match result.rationale {
            Some(prev) => format!("{why}; {prev}"),
            None => why,
        });
        result
    };
    let reply = match llm.complete(&filter_prompt(scene, utterance)) {
        Ok(c) => c.text,
        Err(err) => return fallback(format!("llm filter unavailable ({err})")),
    };
    match parse_selection(&reply, scene) {
        Some((kept, dropped)) if !kept.is_empty() => FilterResult {
            kept_ids: kept,
            method: FilterMethod::Llm,
            rationale: (!dropped.is_empty())
                .then(|| format!("ignored ids not in scene: {dropped:?}")),
        },
        Some(_) => fallback("llm filter selected no scene objects".into()),
        None => fallback("llm filter reply unparseable".into()),
    }
}
