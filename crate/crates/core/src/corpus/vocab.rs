use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::split_words;
use super::{CorpusError, RecipeRecord};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Bijection between tokens and ids. Ids 0 and 1 are the padding and
/// unknown-word specials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list. Missing specials are
    /// inserted at the front.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(
            tokens
                .into_iter()
                .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN),
        );
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_text(&text))
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Counts tokens over every component of every record, drops tokens seen
/// fewer than `min_freq` times and keeps the `max_size - 2` most frequent,
/// ties broken lexicographically.
pub fn build_vocabulary(corpus: &[RecipeRecord], min_freq: usize, max_size: usize) -> Vocabulary {
    assert!(min_freq >= 1, "min_freq must be at least 1");
    assert!(max_size >= 2, "max_size must leave room for the specials");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for record in corpus {
        for sentence in record.sentences() {
            for word in split_words(sentence) {
                *counts.entry(word).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, n)| *n >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - 2);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}
