//! Exact cosine ranking, medR / Recall@K over random ranking groups, and
//! reconstruction of missing recipe components from the projection heads.

mod metrics;

pub use metrics::{compute_metrics, rank_of_true, top_k, Metrics};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::component::{Component, ComponentSet};
use crate::corpus::TokenizedRecipe;
use crate::diffcore::{dot, Scalar, Tensor};
use crate::encoders::{ComponentEmbeddings, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("ranking size {n} exceeds the {available} available samples")]
    DatasetTooSmall { n: usize, available: usize },
    #[error("ranking size and group count must be positive")]
    EmptyRanking,
    #[error("sample {0:?} has no image feature")]
    Unpaired(String),
    #[error("cannot hallucinate {0}: no source component available")]
    NoSources(Component),
    #[error("image and recipe embedding counts differ ({0} vs {1})")]
    CountMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("embedding dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "image-to-recipe")]
    ImageToRecipe,
    #[serde(rename = "recipe-to-image")]
    RecipeToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToRecipe => "image-to-recipe",
            Direction::RecipeToImage => "recipe-to-image",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image-to-recipe" | "im2recipe" => Ok(Direction::ImageToRecipe),
            "recipe-to-image" | "recipe2im" => Ok(Direction::RecipeToImage),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    pub per_group: Vec<Metrics>,
    pub aggregate: Metrics,
}

/// Draws `groups` independent random subsets of `n` distinct indices from
/// `0..total`. A sample may appear in several groups.
pub fn draw_groups(
    total: usize,
    n: usize,
    groups: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, RetrievalError> {
    if n == 0 || groups == 0 {
        return Err(RetrievalError::EmptyRanking);
    }
    if total < n {
        return Err(RetrievalError::DatasetTooSmall {
            n,
            available: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..groups)
        .map(|_| index::sample(&mut rng, total, n).into_vec())
        .collect())
}

/// Ranks of the true partner for every query of one group. `queries[i]`
/// and `candidates[i]` are partners.
pub fn group_ranks<T: Scalar>(queries: &Tensor<T>, candidates: &Tensor<T>) -> Vec<usize> {
    let n = queries.rows();
    (0..n)
        .map(|i| {
            let q = queries.row(i);
            let target = dot(q, candidates.row(i));
            1 + (0..n)
                .filter(|&j| j != i && dot(q, candidates.row(j)) > target)
                .count()
        })
        .collect()
}

fn select_rows<T: Scalar>(m: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let rows: Vec<&[T]> = idx.iter().map(|&i| m.row(i)).collect();
    Tensor::from_rows(&rows)
}

/// Grouped retrieval evaluation over precomputed, row-aligned image and
/// recipe embeddings.
pub fn evaluate_embeddings<T: Scalar>(
    images: &Tensor<T>,
    recipes: &Tensor<T>,
    n: usize,
    groups: usize,
    seed: u64,
    direction: Direction,
) -> Result<RetrievalReport, RetrievalError> {
    if images.rows() != recipes.rows() {
        return Err(RetrievalError::CountMismatch(images.rows(), recipes.rows()));
    }
    let (queries, candidates) = match direction {
        Direction::ImageToRecipe => (images, recipes),
        Direction::RecipeToImage => (recipes, images),
    };
    let per_group: Vec<Metrics> = draw_groups(images.rows(), n, groups, seed)?
        .iter()
        .map(|g| {
            compute_metrics(&group_ranks(
                &select_rows(queries, g),
                &select_rows(candidates, g),
            ))
        })
        .collect();
    Ok(RetrievalReport {
        direction,
        n,
        groups,
        aggregate: Metrics::mean(&per_group),
        per_group,
    })
}

/// Source of the `g_{source -> target}` projections.
pub trait Projector<T> {
    fn project(&self, target: Component, source: Component, e: &[T]) -> Vec<T>;
}

impl<T: Scalar> Projector<T> for ModelParams<T> {
    fn project(&self, target: Component, source: Component, e: &[T]) -> Vec<T> {
        ModelParams::project(self, target, source, e)
    }
}

/// Identity projections.
pub struct IdentityHeads;

impl<T: Scalar> Projector<T> for IdentityHeads {
    fn project(&self, _: Component, _: Component, e: &[T]) -> Vec<T> {
        e.to_vec()
    }
}

/// Mean of `g_{b -> target}(e_b)` over every available component `b`
/// other than `target`.
pub fn hallucinate_component<T: Scalar>(
    available: &ComponentEmbeddings<T>,
    heads: &impl Projector<T>,
    target: Component,
) -> Result<Vec<T>, RetrievalError> {
    let sources: Vec<Component> = available.present.iter().filter(|&c| c != target).collect();
    if sources.is_empty() {
        return Err(RetrievalError::NoSources(target));
    }
    let mut acc = vec![T::zero(); available.get(sources[0]).len()];
    for &s in &sources {
        for (a, v) in acc
            .iter_mut()
            .zip(heads.project(target, s, available.get(s)))
        {
            *a = *a + v;
        }
    }
    let k = T::from_f64(sources.len() as f64);
    Ok(acc.into_iter().map(|v| v / k).collect())
}

/// How components withheld at test time are filled in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Use the learned empty-component vector.
    EmptyVector,
    /// Average the projections of the remaining components; falls back to
    /// the empty vector when nothing remains.
    Hallucinate,
}

impl FromStr for MissingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "empty" | "empty-vector" | "empty_vector" => Ok(MissingPolicy::EmptyVector),
            "hallucinate" => Ok(MissingPolicy::Hallucinate),
            other => Err(format!("unknown missing-component policy {other:?}")),
        }
    }
}

/// Components to withhold and how to replace them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MissingSpec {
    pub missing: ComponentSet,
    pub policy: MissingPolicy,
}

impl Default for MissingSpec {
    fn default() -> Self {
        Self {
            missing: ComponentSet::EMPTY,
            policy: MissingPolicy::EmptyVector,
        }
    }
}

/// Withholds `spec.missing` (plus anything already absent from the recipe
/// when hallucinating) and fills the gaps according to `spec.policy`.
pub fn apply_missing<T: Scalar>(
    params: &ModelParams<T>,
    comps: &mut ComponentEmbeddings<T>,
    spec: MissingSpec,
) {
    for c in spec.missing.iter() {
        comps.present.remove(c);
        comps.vectors[c.index()] = params.empty_vector(c).to_vec();
    }
    if spec.policy == MissingPolicy::Hallucinate {
        let absent: Vec<Component> = Component::ALL
            .into_iter()
            .filter(|&c| !comps.present.contains(c))
            .filter(|&c| params.config().components.set().contains(c))
            .collect();
        let mut filled = Vec::new();
        for c in absent {
            if let Ok(v) = hallucinate_component(comps, params, c) {
                filled.push((c, v));
            }
        }
        for (c, v) in filled {
            comps.vectors[c.index()] = v;
        }
    }
}

/// Component embeddings with the missing-component policy applied.
pub fn embed_components<T: Scalar>(
    params: &ModelParams<T>,
    recipes: &[&TokenizedRecipe],
    spec: MissingSpec,
) -> Result<Vec<ComponentEmbeddings<T>>, RetrievalError> {
    let mut comps = params.embed_components(recipes)?;
    for c in &mut comps {
        apply_missing(params, c, spec);
    }
    Ok(comps)
}

/// Normalized recipe embeddings (`n x joint_dim`).
pub fn embed_recipes<T: Scalar>(
    params: &ModelParams<T>,
    recipes: &[&TokenizedRecipe],
    spec: MissingSpec,
) -> Result<Tensor<T>, RetrievalError> {
    let comps = embed_components(params, recipes, spec)?;
    Ok(params.merge(&comps))
}

/// Normalized image embeddings for paired recipes, in input order.
pub fn embed_images<T: Scalar>(
    params: &ModelParams<T>,
    recipes: &[&TokenizedRecipe],
) -> Result<Tensor<T>, RetrievalError> {
    let mut rows = Vec::with_capacity(recipes.len());
    for r in recipes {
        let f = r
            .image_feature
            .as_ref()
            .ok_or_else(|| RetrievalError::Unpaired(r.id.clone()))?;
        rows.push(f.iter().map(|&v| T::from_f64(v as f64)).collect::<Vec<T>>());
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, params.config().joint_dim]));
    }
    Ok(params.encode_images(&Tensor::from_rows(&rows))?)
}

/// Embeds every paired sample of `dataset` and runs the grouped protocol.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[&TokenizedRecipe],
    n: usize,
    groups: usize,
    seed: u64,
    direction: Direction,
    spec: MissingSpec,
) -> Result<RetrievalReport, RetrievalError> {
    if let Some(r) = dataset.iter().find(|r| !r.is_paired()) {
        return Err(RetrievalError::Unpaired(r.id.clone()));
    }
    if dataset.len() < n {
        return Err(RetrievalError::DatasetTooSmall {
            n,
            available: dataset.len(),
        });
    }
    let images = embed_images(params, dataset)?;
    let recipes = embed_recipes(params, dataset, spec)?;
    evaluate_embeddings(&images, &recipes, n, groups, seed, direction)
}

/// One line of an embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

pub fn write_embeddings<W: Write>(mut out: W, records: &[EmbeddingRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_embeddings<R: BufRead>(input: R) -> Result<Vec<EmbeddingRecord>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| RetrievalError::Dump {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
