//! Seeded toy recipe corpus. Each recipe is built from a handful of
//! concepts (dish, cooking method, style, ingredients) that appear in all
//! three text components; its image feature is a fixed random projection
//! of the concept indicator vector plus Gaussian noise.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::RecipeRecord;

const DISHES: &[&str] = &[
    "soup",
    "salad",
    "stew",
    "pie",
    "curry",
    "risotto",
    "tart",
    "casserole",
    "skillet",
    "bowl",
    "wrap",
    "gratin",
];
const METHODS: &[&str] = &[
    "bake", "roast", "simmer", "fry", "grill", "steam", "braise", "saute",
];
const STYLES: &[&str] = &[
    "spicy", "creamy", "smoky", "zesty", "rustic", "sweet", "herby", "crispy",
];
const INGREDIENTS: &[&str] = &[
    "chicken",
    "beef",
    "tofu",
    "salmon",
    "shrimp",
    "lentils",
    "chickpeas",
    "mushrooms",
    "spinach",
    "potatoes",
    "carrots",
    "tomatoes",
    "peppers",
    "onions",
    "garlic",
    "ginger",
    "lemon",
    "basil",
    "cheese",
    "rice",
    "noodles",
    "beans",
    "pumpkin",
    "eggplant",
];
const UNITS: &[&str] = &[
    "cup",
    "tablespoon",
    "teaspoon",
    "pound",
    "ounce",
    "handful",
    "pinch",
    "clove",
];
const AMOUNTS: &[&str] = &["1", "2", "3", "half", "quarter"];
const TOOLS: &[&str] = &["pan", "pot", "oven", "tray", "wok", "dish"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub paired: usize,
    pub text_only: usize,
    /// Held-out paired records.
    pub val_paired: usize,
    pub image_dim: usize,
    /// Standard deviation of the additive image noise.
    pub noise: f64,
    /// Fraction of text-only records with one component left empty.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            paired: 64,
            text_only: 192,
            val_paired: 256,
            image_dim: 32,
            noise: 0.1,
            missing_fraction: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub train: Vec<RecipeRecord>,
    pub val: Vec<RecipeRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Concepts {
    dish: usize,
    method: usize,
    style: usize,
    ingredients: Vec<usize>,
}

impl Concepts {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let k = rng.random_range(3..=5);
        let mut ingredients: Vec<usize> =
            rand::seq::index::sample(rng, INGREDIENTS.len(), k).into_vec();
        ingredients.sort_unstable();
        Self {
            dish: rng.random_range(0..DISHES.len()),
            method: rng.random_range(0..METHODS.len()),
            style: rng.random_range(0..STYLES.len()),
            ingredients,
        }
    }

    fn indicator(&self) -> Vec<usize> {
        let mut idx = vec![
            self.dish,
            DISHES.len() + self.method,
            DISHES.len() + METHODS.len() + self.style,
        ];
        let off = DISHES.len() + METHODS.len() + STYLES.len();
        idx.extend(self.ingredients.iter().map(|&i| off + i));
        idx
    }

    fn title(&self) -> String {
        format!(
            "{} {} {}",
            STYLES[self.style], INGREDIENTS[self.ingredients[0]], DISHES[self.dish]
        )
    }

    fn ingredient_lines(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut lines: Vec<String> = self
            .ingredients
            .iter()
            .map(|&i| {
                format!(
                    "{} {} {}",
                    AMOUNTS.choose(rng).unwrap(),
                    UNITS.choose(rng).unwrap(),
                    INGREDIENTS[i]
                )
            })
            .collect();
        lines.shuffle(rng);
        lines
    }

    fn instruction_lines(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let ing = |j: usize| INGREDIENTS[self.ingredients[j % self.ingredients.len()]];
        let tool = TOOLS.choose(rng).unwrap();
        vec![
            format!("prepare the {} and {}", ing(0), ing(1)),
            format!("{} the {} in a {}", METHODS[self.method], ing(2), tool),
            format!("add the {} and keep it {}", ing(3), STYLES[self.style]),
            format!(
                "serve the {} {} warm",
                STYLES[self.style], DISHES[self.dish]
            ),
        ]
    }
}

const CONCEPT_COUNT: usize = 12 + 8 + 8 + 24;

/// Generates the toy corpus. Ids are `train-NNN` (paired first, then
/// text-only) and `val-NNN`.
pub fn generate_toy_corpus(cfg: &ToyConfig) -> ToyCorpus {
    debug_assert_eq!(
        CONCEPT_COUNT,
        DISHES.len() + METHODS.len() + STYLES.len() + INGREDIENTS.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (CONCEPT_COUNT as f64).sqrt().sqrt();
    let w = Normal::new(0.0, scale).expect("valid std");
    let projection: Vec<f64> = (0..cfg.image_dim * CONCEPT_COUNT)
        .map(|_| w.sample(&mut rng))
        .collect();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("valid std");

    let mut seen = HashSet::new();
    let mut next_concepts = |rng: &mut ChaCha8Rng| loop {
        let c = Concepts::sample(rng);
        if seen.insert(c.clone()) {
            return c;
        }
    };
    let image = |c: &Concepts, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let idx = c.indicator();
        (0..cfg.image_dim)
            .map(|r| {
                let s: f64 = idx.iter().map(|&k| projection[r * CONCEPT_COUNT + k]).sum();
                (s / (idx.len() as f64).sqrt() + noise.sample(rng)) as f32
            })
            .collect()
    };
    let record =
        |id: String, c: &Concepts, rng: &mut ChaCha8Rng, feature: Option<Vec<f32>>| RecipeRecord {
            id,
            title: c.title(),
            ingredients: c.ingredient_lines(rng),
            instructions: c.instruction_lines(rng),
            image_feature: feature,
        };

    let mut train = Vec::with_capacity(cfg.paired + cfg.text_only);
    for i in 0..cfg.paired {
        let c = next_concepts(&mut rng);
        let f = image(&c, &mut rng);
        train.push(record(format!("train-{i:03}"), &c, &mut rng, Some(f)));
    }
    for i in 0..cfg.text_only {
        let c = next_concepts(&mut rng);
        let mut r = record(format!("train-{:03}", cfg.paired + i), &c, &mut rng, None);
        if rng.random_bool(cfg.missing_fraction.clamp(0.0, 1.0)) {
            match rng.random_range(0..3) {
                0 => r.title.clear(),
                1 => r.ingredients.clear(),
                _ => r.instructions.clear(),
            }
        }
        train.push(r);
    }
    let mut val = Vec::with_capacity(cfg.val_paired);
    for i in 0..cfg.val_paired {
        let c = next_concepts(&mut rng);
        let f = image(&c, &mut rng);
        val.push(record(format!("val-{i:03}"), &c, &mut rng, Some(f)));
    }
    ToyCorpus { train, val }
}
