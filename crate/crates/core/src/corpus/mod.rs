//! Recipe documents: JSONL parsing, vocabulary, tokenization and batching.

mod batch;
mod tokenize;
mod vocab;

pub use batch::{make_batches, Batch, BatchMode};
pub use tokenize::{
    encode_recipe, split_words, tokenize_sentence, Limits, TokenSequence, TokenizedRecipe,
};
pub use vocab::{build_vocabulary, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: image feature has length {found}, expected {expected}")]
    FeatureLength {
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("line {line}: duplicate record id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: record {id:?} has no title, ingredients or instructions")]
    EmptyRecord { line: usize, id: String },
    #[error("no {0} records available for batching")]
    NoRecords(BatchMode),
    #[error("batch size {batch_size} exceeds the {available} available {mode} records")]
    BatchTooLarge {
        batch_size: usize,
        available: usize,
        mode: BatchMode,
    },
}

/// One recipe document with an optional precomputed image feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeRecord {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<Vec<f32>>,
}

impl RecipeRecord {
    pub fn is_paired(&self) -> bool {
        self.image_feature.is_some()
    }

    /// Every sentence of every component, title first.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.title.as_str())
            .chain(self.ingredients.iter().map(String::as_str))
            .chain(self.instructions.iter().map(String::as_str))
    }

    fn has_text(&self) -> bool {
        self.sentences().any(|s| !s.trim().is_empty())
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_recipe_corpus(
    path: impl AsRef<Path>,
    feature_dim: usize,
) -> Result<Vec<RecipeRecord>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line.map_err(io_err)?);
    }
    parse_recipe_lines(lines.iter().map(String::as_str), feature_dim)
}

pub fn parse_recipe_lines<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    feature_dim: usize,
) -> Result<Vec<RecipeRecord>, CorpusError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw) in lines.into_iter().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: RecipeRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Schema {
            line,
            message: e.to_string(),
        })?;
        if let Some(f) = &record.image_feature {
            if f.len() != feature_dim {
                return Err(CorpusError::FeatureLength {
                    line,
                    found: f.len(),
                    expected: feature_dim,
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::Schema {
                    line,
                    message: "image feature contains non-finite values".into(),
                });
            }
        }
        if !record.has_text() {
            return Err(CorpusError::EmptyRecord {
                line,
                id: record.id,
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_recipe_corpus(
    path: impl AsRef<Path>,
    records: &[RecipeRecord],
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("recipe records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
