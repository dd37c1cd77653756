use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, PAD};
use super::RecipeRecord;
use crate::component::Component;

/// Truncation limits applied when encoding recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub max_sentence_len: usize,
    pub max_sentences: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_sentence_len: 20,
            max_sentences: 20,
        }
    }
}

/// Fixed-length token ids with a mask that is `true` on real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    /// Number of real (unpadded) tokens.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }

    /// Real token ids, padding stripped.
    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize_sentence(vocab: &Vocabulary, text: &str, max_len: usize) -> TokenSequence {
    assert!(max_len >= 1, "max_len must be positive");
    let mut ids: Vec<u32> = split_words(text)
        .take(max_len)
        .map(|w| vocab.id(&w))
        .collect();
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    TokenSequence { ids, mask }
}

/// Token-id form of a [`RecipeRecord`]. Empty components are empty lists
/// (or an all-pad title), never a padding sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedRecipe {
    pub id: String,
    pub title: TokenSequence,
    pub ingredients: Vec<TokenSequence>,
    pub instructions: Vec<TokenSequence>,
    pub image_feature: Option<Vec<f32>>,
}

impl TokenizedRecipe {
    pub fn is_paired(&self) -> bool {
        self.image_feature.is_some()
    }

    /// Sentences of one component; the title yields zero or one sentence.
    pub fn sentences(&self, component: Component) -> &[TokenSequence] {
        match component {
            Component::Title if self.title.is_empty() => &[],
            Component::Title => std::slice::from_ref(&self.title),
            Component::Ingredients => &self.ingredients,
            Component::Instructions => &self.instructions,
        }
    }

    pub fn has(&self, component: Component) -> bool {
        !self.sentences(component).is_empty()
    }
}

pub fn encode_recipe(vocab: &Vocabulary, record: &RecipeRecord, limits: Limits) -> TokenizedRecipe {
    assert!(
        limits.max_sentence_len > 0 && limits.max_sentences > 0,
        "limits must be positive"
    );
    let list = |lines: &[String]| -> Vec<TokenSequence> {
        lines
            .iter()
            .map(|l| tokenize_sentence(vocab, l, limits.max_sentence_len))
            .filter(|s| !s.is_empty())
            .take(limits.max_sentences)
            .collect()
    };
    TokenizedRecipe {
        id: record.id.clone(),
        title: tokenize_sentence(vocab, &record.title, limits.max_sentence_len),
        ingredients: list(&record.ingredients),
        instructions: list(&record.instructions),
        image_feature: record.image_feature.clone(),
    }
}
