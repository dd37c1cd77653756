//! Browser bindings for three small interactive views: the bidirectional
//! triplet hinge on 2-D points, retrieval metrics as embedding noise grows,
//! and an epoch-by-epoch training session on the bundled toy corpus.
//!
//! Every export returns JSON text; the plain Rust functions underneath are
//! what the native tests exercise.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;
use xmrr::corpus::{build_vocabulary, encode_recipe, TokenizedRecipe, Vocabulary};
use xmrr::diffcore::Tensor;
use xmrr::losses::{bi_triplet, triplet_cos};
use xmrr::retrieval::{
    evaluate, evaluate_embeddings, Direction, Metrics, MissingPolicy, MissingSpec,
};
use xmrr::synthetic::{generate_toy_corpus, ToyConfig};
use xmrr::trainer::{EpochRecord, TrainConfig, Trainer};
use xmrr::{Component, ComponentSet};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Retrieval(#[from] xmrr::retrieval::RetrievalError),
    #[error(transparent)]
    Train(#[from] xmrr::trainer::TrainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    r.and_then(|v| Ok(serde_json::to_string(&v)?))
        .map_err(|e| JsError::new(&e.to_string()))
}

/// Loss terms of a two-sample batch: image/recipe pair `i` against pair `j`.
#[derive(Debug, Serialize, PartialEq)]
pub struct PairView {
    pub cos_match: f64,
    pub cos_image_other_recipe: f64,
    pub cos_recipe_other_image: f64,
    /// `max(0, cos(a_i, b_j) - cos(a_i, b_i) + margin)`
    pub image_anchor: f64,
    /// `max(0, cos(b_i, a_j) - cos(b_i, a_i) + margin)`
    pub recipe_anchor: f64,
    pub total: f64,
}

fn cos(u: [f64; 2], v: [f64; 2]) -> f64 {
    let n = |w: [f64; 2]| (w[0] * w[0] + w[1] * w[1]).sqrt().max(1e-8);
    (u[0] * v[0] + u[1] * v[1]) / (n(u) * n(v))
}

/// Hinge terms with pair `i` as the anchor in both directions.
pub fn pair_view(ai: [f64; 2], bi: [f64; 2], aj: [f64; 2], bj: [f64; 2], margin: f64) -> PairView {
    PairView {
        cos_match: cos(ai, bi),
        cos_image_other_recipe: cos(ai, bj),
        cos_recipe_other_image: cos(bi, aj),
        image_anchor: triplet_cos(&ai, &bi, &bj, margin),
        recipe_anchor: triplet_cos(&bi, &ai, &aj, margin),
        total: bi_triplet(&ai, &bi, &bj, &aj, margin),
    }
}

/// Points are passed flat: `[ai.x, ai.y, bi.x, bi.y, aj.x, aj.y, bj.x, bj.y]`.
#[wasm_bindgen]
pub fn triplet(points: Vec<f64>, margin: f64) -> Result<String, JsError> {
    js(match points[..] {
        [a, b, c, d, e, f, g, h] => Ok(pair_view([a, b], [c, d], [e, f], [g, h], margin)),
        _ => Err(DemoError::Invalid(format!(
            "expected 8 coordinates, got {}",
            points.len()
        ))),
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct NoisePoint {
    pub noise: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            r.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Image-to-recipe metrics when every recipe embedding is its image
/// embedding plus Gaussian noise of the given scale.
pub fn noise_curve(
    n: usize,
    dim: usize,
    groups: usize,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<NoisePoint>, DemoError> {
    if n == 0 || dim == 0 || n > 5000 || dim > 1024 {
        return Err(DemoError::Invalid(
            "need 1 <= N <= 5000 and 1 <= dim <= 1024".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    };
    let base = gauss(n);
    let offsets = gauss(n);
    let images = unit_rows(base.clone());
    levels
        .iter()
        .map(|&noise| {
            let noisy: Vec<Vec<f64>> = base
                .iter()
                .zip(&offsets)
                .map(|(b, o)| {
                    let scale = noise / (dim as f64).sqrt();
                    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    b.iter().zip(o).map(|(x, e)| x / norm + scale * e).collect()
                })
                .collect();
            let recipes = unit_rows(noisy);
            let report =
                evaluate_embeddings(&images, &recipes, n, groups, seed, Direction::ImageToRecipe)?;
            Ok(NoisePoint {
                noise,
                metrics: report.aggregate,
            })
        })
        .collect()
}

#[wasm_bindgen]
pub fn retrieval_vs_noise(
    n: usize,
    dim: usize,
    groups: usize,
    levels: Vec<f64>,
    seed: u32,
) -> Result<String, JsError> {
    js(noise_curve(n, dim, groups, &levels, seed as u64))
}

struct ToyData {
    vocab: Vocabulary,
    train: Vec<TokenizedRecipe>,
    val: Vec<TokenizedRecipe>,
}

fn desk_train_config() -> TrainConfig {
    let v: serde_json::Value =
        serde_json::from_str(DESK_CONFIG).expect("bundled config is valid JSON");
    serde_json::from_value(v["train"].clone()).expect("bundled train section")
}

/// The toy corpus is generated once and shared by every session.
fn toy() -> &'static ToyData {
    static TOY: OnceLock<ToyData> = OnceLock::new();
    TOY.get_or_init(|| {
        let corpus = generate_toy_corpus(&ToyConfig::default());
        let vocab = build_vocabulary(&corpus.train, 1, 100_000);
        let lim = desk_train_config().model.limits();
        ToyData {
            train: corpus
                .train
                .iter()
                .map(|r| encode_recipe(&vocab, r, lim))
                .collect(),
            val: corpus
                .val
                .iter()
                .map(|r| encode_recipe(&vocab, r, lim))
                .collect(),
            vocab,
        }
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct MissingRow {
    pub component: Component,
    pub empty_vector_r1: f64,
    pub hallucinated_r1: f64,
}

/// Training on the toy corpus, one epoch per call.
#[wasm_bindgen]
pub struct ToySession {
    trainer: Trainer<'static>,
}

impl ToySession {
    pub fn create(seed: u64, lr: f64, use_text_only: bool) -> Result<Self, DemoError> {
        if !(lr > 0.0 && lr < 1.0) {
            return Err(DemoError::Invalid(format!(
                "learning rate {lr} outside (0, 1)"
            )));
        }
        let data = toy();
        let cfg = TrainConfig {
            seed,
            lr,
            use_text_only,
            ..desk_train_config()
        };
        Ok(Self {
            trainer: Trainer::new(cfg, data.vocab.len(), &data.train, &data.val)?,
        })
    }

    pub fn advance(&mut self) -> Result<EpochRecord, DemoError> {
        Ok(self.trainer.run_epoch()?)
    }

    /// Validation R@1 with one component withheld, filled in by the empty
    /// vector and by hallucination.
    pub fn missing_table(&self) -> Result<Vec<MissingRow>, DemoError> {
        let cfg = self.trainer.config();
        let val: Vec<&TokenizedRecipe> = toy().val.iter().filter(|r| r.is_paired()).collect();
        let n = cfg.val_ranking_size.min(val.len());
        let r1 = |c: Component, policy| -> Result<f64, DemoError> {
            let spec = MissingSpec {
                missing: [c].into_iter().collect::<ComponentSet>(),
                policy,
            };
            let rep = evaluate(
                self.trainer.params(),
                &val,
                n,
                cfg.val_groups,
                0,
                Direction::ImageToRecipe,
                spec,
            )?;
            Ok(rep.aggregate.r1)
        };
        Component::ALL
            .into_iter()
            .map(|c| {
                Ok(MissingRow {
                    component: c,
                    empty_vector_r1: r1(c, MissingPolicy::EmptyVector)?,
                    hallucinated_r1: r1(c, MissingPolicy::Hallucinate)?,
                })
            })
            .collect()
    }
}

#[wasm_bindgen]
impl ToySession {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lr: f64, use_text_only: bool) -> Result<ToySession, JsError> {
        Self::create(seed as u64, lr, use_text_only).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Runs one epoch and returns its record.
    pub fn step(&mut self) -> Result<String, JsError> {
        js(self.advance())
    }

    pub fn epoch(&self) -> usize {
        self.trainer.epoch()
    }

    pub fn missing(&self) -> Result<String, JsError> {
        js(self.missing_table())
    }
}
