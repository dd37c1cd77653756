use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::TokenizedRecipe;
use super::CorpusError;
use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Paired,
    TextOnly,
}

impl BatchMode {
    pub fn accepts(self, r: &TokenizedRecipe) -> bool {
        match self {
            BatchMode::Paired => r.is_paired(),
            BatchMode::TextOnly => !r.is_paired(),
        }
    }
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMode::Paired => "paired",
            BatchMode::TextOnly => "text-only",
        })
    }
}

/// A mini-batch of recipes. Paired batches carry their image features as a
/// `B x D_img` matrix in record order.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub records: Vec<&'a TokenizedRecipe>,
    pub image_features: Option<Tensor<f32>>,
    pub mode: BatchMode,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// Splits the records matching `mode` into shuffled full batches for one
/// epoch. The shuffle depends only on `(seed, epoch)`; a trailing partial
/// batch is dropped.
pub fn make_batches(
    dataset: &[TokenizedRecipe],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    mode: BatchMode,
) -> Result<Vec<Batch<'_>>, CorpusError> {
    let mut pool: Vec<&TokenizedRecipe> = dataset.iter().filter(|r| mode.accepts(r)).collect();
    if pool.is_empty() {
        return Err(CorpusError::NoRecords(mode));
    }
    if batch_size == 0 || batch_size > pool.len() {
        return Err(CorpusError::BatchTooLarge {
            batch_size,
            available: pool.len(),
            mode,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    pool.shuffle(&mut rng);
    Ok(pool
        .chunks_exact(batch_size)
        .map(|chunk| {
            let image_features = (mode == BatchMode::Paired).then(|| {
                let rows: Vec<&[f32]> = chunk
                    .iter()
                    .map(|r| r.image_feature.as_deref().expect("paired record"))
                    .collect();
                Tensor::from_rows(&rows)
            });
            Batch {
                records: chunk.to_vec(),
                image_features,
                mode,
            }
        })
        .collect())
}
