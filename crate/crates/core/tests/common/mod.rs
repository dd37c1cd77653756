#![allow(dead_code)]

pub mod gradcases;
pub mod oracle;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmrr::corpus::{
    build_vocabulary, encode_recipe, parse_recipe_corpus, TokenizedRecipe, Vocabulary,
};
use xmrr::diffcore::Tensor;
use xmrr::encoders::ModelConfig;
use xmrr::trainer::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The training section of the shipped desk-scale run config.
pub fn desk_config() -> TrainConfig {
    let text = std::fs::read_to_string(repo_root().join("configs/desk.json")).expect("desk config");
    let v: serde_json::Value = serde_json::from_str(&text).expect("desk config json");
    serde_json::from_value(v["train"].clone()).expect("train section")
}

pub struct Toy {
    pub vocab: Vocabulary,
    pub train: Vec<TokenizedRecipe>,
    pub val: Vec<TokenizedRecipe>,
}

/// The bundled toy corpus, tokenized with a vocabulary built from its
/// training split.
pub fn toy(model: &ModelConfig) -> Toy {
    let dir = repo_root().join("data/toy");
    let train = parse_recipe_corpus(dir.join("train.jsonl"), model.image_dim).expect("toy train");
    let val = parse_recipe_corpus(dir.join("val.jsonl"), model.image_dim).expect("toy val");
    let vocab = build_vocabulary(&train, 1, 100_000);
    let lim = model.limits();
    Toy {
        train: train
            .iter()
            .map(|r| encode_recipe(&vocab, r, lim))
            .collect(),
        val: val.iter().map(|r| encode_recipe(&vocab, r, lim)).collect(),
        vocab,
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        layers: 1,
        ff_width: 16,
        joint_dim: 6,
        image_dim: 5,
        max_sentence_len: 6,
        max_sentences: 4,
        ..ModelConfig::default()
    }
}
