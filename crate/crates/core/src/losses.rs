//! Cosine triplet losses: the in-batch bidirectional loss that aligns images
//! with recipes, and the self-supervised loss between projected recipe
//! components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::component::{Component, ComponentSet};
use crate::corpus::BatchMode;
use crate::diffcore::{cosine_similarity, Scalar, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("in-batch negatives need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("paired-mode loss requires image embeddings")]
    MissingImages,
    #[error("feature sets differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("no loss term is active for a {0} batch")]
    NoActiveTerm(BatchMode),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub paired: LossWeights,
    pub text_only: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            paired: LossWeights {
                alpha: 1.0,
                beta: 1.0,
            },
            text_only: LossWeights {
                alpha: 0.0,
                beta: 1.0,
            },
        }
    }
}

impl LossConfig {
    pub fn weights(&self, mode: BatchMode) -> LossWeights {
        match mode {
            BatchMode::Paired => self.paired,
            BatchMode::TextOnly => self.text_only,
        }
    }
}

/// `max(0, c(a, n) - c(a, p) + m)`.
pub fn triplet_cos<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T], margin: T) -> T {
    (cosine_similarity(anchor, negative) - cosine_similarity(anchor, positive) + margin)
        .max(T::zero())
}

/// Both directions of the triplet loss for a positive pair `(a_i, b_i)`
/// and the negatives `b_j`, `a_j`.
pub fn bi_triplet<T: Scalar>(a_i: &[T], b_i: &[T], b_j: &[T], a_j: &[T], margin: T) -> T {
    triplet_cos(a_i, b_i, b_j, margin) + triplet_cos(b_i, a_i, a_j, margin)
}

/// In-batch bidirectional triplet loss between row-aligned feature sets
/// `a` and `b` (`B x D`). Every other row serves as a negative; each
/// anchor's terms are averaged over its `B - 1` negatives and the result
/// is averaged over anchors.
pub fn batch_bi_loss<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    margin: T,
) -> Result<Var, LossError> {
    let (sa, sb) = (
        tape.value(a).shape().to_vec(),
        tape.value(b).shape().to_vec(),
    );
    if sa != sb {
        return Err(LossError::ShapeMismatch(sa, sb));
    }
    let n = tape.value(a).rows();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let an = tape.l2_normalize(a);
    let bn = tape.l2_normalize(b);
    let sim = tape.matmul_t(an, bn);
    Ok(tape.bi_triplet(sim, margin))
}

/// Image-recipe alignment loss with images as the `a` set.
pub fn pair_loss<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    recipes: Var,
    margin: T,
) -> Result<Var, LossError> {
    batch_bi_loss(tape, images, recipes, margin)
}

/// Mean over ordered component pairs `(a, b)`, `a != b`, both in
/// `enabled`, of `batch_bi_loss(E_a, normalize(g_{b->a}(E_b)))`.
/// Returns `None` when fewer than two components are enabled.
pub fn recipe_component_loss<T, P>(
    tape: &mut Tape<T>,
    components: [Var; 3],
    enabled: ComponentSet,
    margin: T,
    mut project: P,
) -> Result<Option<Var>, LossError>
where
    T: Scalar,
    P: FnMut(&mut Tape<T>, Component, Component, Var) -> Var,
{
    let pairs: Vec<(Component, Component)> = Component::ordered_pairs()
        .filter(|(a, b)| enabled.contains(*a) && enabled.contains(*b))
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (target, source) in &pairs {
        let projected = project(tape, *target, *source, components[source.index()]);
        let projected = tape.l2_normalize(projected);
        terms.push(batch_bi_loss(
            tape,
            components[target.index()],
            projected,
            margin,
        )?);
    }
    let stacked = tape.concat_rows(&terms);
    let sum = tape.sum(stacked);
    Ok(Some(tape.scale(sum, T::from_f64(1.0 / pairs.len() as f64))))
}

/// Loss terms for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub pair: Option<Var>,
    pub rec: Option<Var>,
}

/// `alpha * L_pair + beta * L_rec` with the weights for `mode`. Text-only
/// batches never include the pair term.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pair: Option<Var>,
    rec: Option<Var>,
    cfg: &LossConfig,
    mode: BatchMode,
) -> Result<LossTerms, LossError> {
    let w = cfg.weights(mode);
    let pair = match mode {
        BatchMode::Paired => Some(pair.ok_or(LossError::MissingImages)?),
        BatchMode::TextOnly => None,
    };
    let mut parts = Vec::new();
    if let Some(p) = pair {
        parts.push(tape.scale(p, T::from_f64(w.alpha)));
    }
    if let Some(r) = rec {
        parts.push(tape.scale(r, T::from_f64(w.beta)));
    }
    let total = match parts.as_slice() {
        [] => return Err(LossError::NoActiveTerm(mode)),
        [one] => *one,
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    };
    Ok(LossTerms { total, pair, rec })
}
