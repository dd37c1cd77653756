mod common;

use common::oracle::{self, rows_of, unit_rows};
use common::{rng, tiny_model};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use xmrr::corpus::{tokenize_sentence, TokenizedRecipe, Vocabulary};
use xmrr::diffcore::Tensor;
use xmrr::encoders::ModelParams;
use xmrr::retrieval::{
    apply_missing, compute_metrics, draw_groups, embed_components, evaluate, evaluate_embeddings,
    hallucinate_component, rank_of_true, Direction, MissingPolicy, MissingSpec,
};
use xmrr::{Component, ComponentSet};

#[test]
fn metrics_match_brute_force_on_random_instances() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let total = r.random_range(2..=500);
        let n = r.random_range(1..=total);
        let groups = r.random_range(1..=3);
        let d = r.random_range(2..=16);
        let images = unit_rows(&mut r, total, d);
        // partners correlated with the images so ranks spread out
        let noise = unit_rows(&mut r, total, d);
        let recipes = Tensor::from_rows(
            &(0..total)
                .map(|i| {
                    images
                        .row(i)
                        .iter()
                        .zip(noise.row(i))
                        .map(|(a, b)| a + 1.5 * b)
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>(),
        );
        let dir = if seed % 2 == 0 {
            Direction::ImageToRecipe
        } else {
            Direction::RecipeToImage
        };
        let report = evaluate_embeddings(&images, &recipes, n, groups, seed, dir).unwrap();
        let (q_all, c_all) = match dir {
            Direction::ImageToRecipe => (&images, &recipes),
            Direction::RecipeToImage => (&recipes, &images),
        };
        let drawn = draw_groups(total, n, groups, seed).unwrap();
        let mut per = Vec::new();
        for g in &drawn {
            let (q, c) = (rows_of(q_all, g), rows_of(c_all, g));
            let ranks: Vec<usize> = (0..n).map(|i| oracle::rank(q.row(i), &c, i)).collect();
            for (i, &want) in ranks.iter().enumerate() {
                assert_eq!(rank_of_true(q.row(i), &c, i), want);
            }
            assert_eq!(compute_metrics(&ranks), oracle::metrics(&ranks));
            per.push(oracle::metrics(&ranks));
        }
        assert_eq!(report.per_group, per, "seed {seed}");
        let m = &report.aggregate;
        assert!(m.r1 <= m.r5 && m.r5 <= m.r10 && m.medr >= 1.0);
    }
}

#[test]
fn random_embeddings_give_chance_median_rank() {
    let n = 1000;
    for seed in 0..10 {
        let mut r = rng(1000 + seed);
        let a = unit_rows(&mut r, n, 512);
        let b = unit_rows(&mut r, n, 512);
        let rep = evaluate_embeddings(&a, &b, n, 1, seed, Direction::ImageToRecipe).unwrap();
        let medr = rep.aggregate.medr;
        assert!(
            (0.4 * n as f64..=0.6 * n as f64).contains(&medr),
            "seed {seed}: medR {medr}"
        );
    }
}

#[test]
fn single_full_group_equals_direct_metrics() {
    let mut r = rng(77);
    let a = unit_rows(&mut r, 40, 6);
    let b = unit_rows(&mut r, 40, 6);
    let rep = evaluate_embeddings(&a, &b, 40, 1, 3, Direction::ImageToRecipe).unwrap();
    let ranks: Vec<usize> = (0..40).map(|i| oracle::rank(a.row(i), &b, i)).collect();
    assert_eq!(rep.aggregate, oracle::metrics(&ranks));
    assert_eq!(rep.per_group.len(), 1);
}

#[test]
fn evaluation_is_deterministic_per_seed() {
    let mut r = rng(5);
    let a = unit_rows(&mut r, 60, 4);
    let b = unit_rows(&mut r, 60, 4);
    let x = evaluate_embeddings(&a, &b, 20, 5, 9, Direction::RecipeToImage).unwrap();
    let y = evaluate_embeddings(&a, &b, 20, 5, 9, Direction::RecipeToImage).unwrap();
    assert_eq!(
        serde_json::to_string(&x).unwrap(),
        serde_json::to_string(&y).unwrap()
    );
}

proptest! {
    #[test]
    fn rank_ignores_order_of_other_candidates(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let n = r.random_range(2..30);
        let c = unit_rows(&mut r, n, 5);
        let q = unit_rows(&mut r, 1, 5);
        let truth = r.random_range(0..n);
        let base = rank_of_true(q.row(0), &c, truth);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let shuffled = rows_of(&c, &order);
        let new_truth = order.iter().position(|&i| i == truth).unwrap();
        prop_assert_eq!(rank_of_true(q.row(0), &shuffled, new_truth), base);
    }

    #[test]
    fn recall_is_monotone(ranks in proptest::collection::vec(1usize..50, 1..40)) {
        let m = compute_metrics(&ranks);
        prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        prop_assert_eq!(m, oracle::metrics(&ranks));
    }
}

fn recipes(vocab: &Vocabulary) -> Vec<TokenizedRecipe> {
    let tok = |s: &str| tokenize_sentence(vocab, s, 6);
    (0..6)
        .map(|i| TokenizedRecipe {
            id: format!("r{i}"),
            title: tok(["a b", "c", "d e f", "b", "f a", "e"][i]),
            ingredients: vec![tok("a c"), tok(["d", "e", "f", "a", "b", "c"][i])],
            instructions: vec![tok(["f e", "d c", "b a", "a", "c c", "e f"][i])],
            image_feature: Some((0..5).map(|k| ((i * 5 + k) as f32 * 0.37).sin()).collect()),
        })
        .collect()
}

#[test]
fn hallucination_is_mean_of_projected_sources() {
    let vocab = Vocabulary::from_tokens("a b c d e f".split(' ').map(String::from));
    let params = ModelParams::<f64>::new(tiny_model(), vocab.len(), 4).unwrap();
    let rs = recipes(&vocab);
    let refs: Vec<&TokenizedRecipe> = rs.iter().collect();
    let full = embed_components(&params, &refs, MissingSpec::default()).unwrap();
    for e in &full {
        let mut without = e.clone();
        without.present.remove(Component::Title);
        let h = hallucinate_component(&without, &params, Component::Title).unwrap();
        let a = params.project(
            Component::Title,
            Component::Ingredients,
            e.get(Component::Ingredients),
        );
        let b = params.project(
            Component::Title,
            Component::Instructions,
            e.get(Component::Instructions),
        );
        for k in 0..h.len() {
            assert!((h[k] - (a[k] + b[k]) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn ingredients_only_fills_title_and_instructions() {
    let vocab = Vocabulary::from_tokens("a b c d e f".split(' ').map(String::from));
    let params = ModelParams::<f64>::new(tiny_model(), vocab.len(), 4).unwrap();
    let rs = recipes(&vocab);
    let refs: Vec<&TokenizedRecipe> = rs.iter().collect();
    let mut missing = ComponentSet::EMPTY;
    missing.insert(Component::Title);
    missing.insert(Component::Instructions);
    let full = embed_components(&params, &refs, MissingSpec::default()).unwrap();
    for e in full {
        let ing = e.get(Component::Ingredients).to_vec();
        let mut h = e.clone();
        apply_missing(
            &params,
            &mut h,
            MissingSpec {
                missing,
                policy: MissingPolicy::Hallucinate,
            },
        );
        assert_eq!(
            h.get(Component::Title),
            params.project(Component::Title, Component::Ingredients, &ing)
        );
        assert_eq!(
            h.get(Component::Instructions),
            params.project(Component::Instructions, Component::Ingredients, &ing)
        );
        let mut empty = e.clone();
        apply_missing(
            &params,
            &mut empty,
            MissingSpec {
                missing,
                policy: MissingPolicy::EmptyVector,
            },
        );
        assert_eq!(
            empty.get(Component::Title),
            params.empty_vector(Component::Title)
        );
    }
}

#[test]
fn model_evaluation_checks_dataset() {
    let vocab = Vocabulary::from_tokens("a b c d e f".split(' ').map(String::from));
    let params = ModelParams::<f32>::new(tiny_model(), vocab.len(), 4).unwrap();
    let mut rs = recipes(&vocab);
    let refs: Vec<&TokenizedRecipe> = rs.iter().collect();
    let rep = evaluate(
        &params,
        &refs,
        6,
        2,
        0,
        Direction::ImageToRecipe,
        MissingSpec::default(),
    )
    .unwrap();
    assert_eq!(rep.per_group.len(), 2);
    assert!(evaluate(
        &params,
        &refs,
        7,
        1,
        0,
        Direction::ImageToRecipe,
        MissingSpec::default()
    )
    .is_err());
    rs[0].image_feature = None;
    let refs: Vec<&TokenizedRecipe> = rs.iter().collect();
    assert!(evaluate(
        &params,
        &refs,
        3,
        1,
        0,
        Direction::ImageToRecipe,
        MissingSpec::default()
    )
    .is_err());
}
