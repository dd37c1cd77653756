mod common;

use common::tiny_model;
use xmrr::corpus::{tokenize_sentence, TokenizedRecipe, Vocabulary};
use xmrr::encoders::{ModelError, ModelParams};
use xmrr::Component;

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens("a b c d e f g h".split(' ').map(String::from))
}

fn recipe(v: &Vocabulary, title: &str, ing: &[&str], ins: &[&str]) -> TokenizedRecipe {
    let t = |s: &str| tokenize_sentence(v, s, 6);
    TokenizedRecipe {
        id: title.to_string(),
        title: t(title),
        ingredients: ing.iter().map(|s| t(s)).collect(),
        instructions: ins.iter().map(|s| t(s)).collect(),
        image_feature: None,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn padding_does_not_change_embeddings() {
    let v = vocab();
    let m = ModelParams::<f64>::new(tiny_model(), v.len(), 11).unwrap();
    let short = recipe(&v, "a b", &["c d", "e"], &["f"]);
    // a batch partner with longer sentences and more sentences forces padding
    // at both hierarchy levels
    let long = recipe(
        &v,
        "a b c d e f",
        &["a b c d e", "f", "g", "h"],
        &["a b c d e f", "b", "c"],
    );
    let alone = m.embed_components(&[&short]).unwrap().remove(0);
    let batched = m.embed_components(&[&long, &short]).unwrap().remove(1);
    for c in Component::ALL {
        assert!(close(alone.get(c), batched.get(c), 1e-6), "{c}");
    }
}

#[test]
fn token_order_matters() {
    let v = vocab();
    let m = ModelParams::<f64>::new(tiny_model(), v.len(), 11).unwrap();
    let a = m
        .embed_components(&[&recipe(&v, "a b", &["c"], &["d"])])
        .unwrap()
        .remove(0);
    let b = m
        .embed_components(&[&recipe(&v, "b a", &["c"], &["d"])])
        .unwrap()
        .remove(0);
    assert!(!close(
        a.get(Component::Title),
        b.get(Component::Title),
        1e-9
    ));
}

#[test]
fn sentence_order_matters() {
    let v = vocab();
    let m = ModelParams::<f64>::new(tiny_model(), v.len(), 11).unwrap();
    let a = m
        .embed_components(&[&recipe(&v, "a", &["c d", "e"], &["f g", "h"])])
        .unwrap()
        .remove(0);
    let b = m
        .embed_components(&[&recipe(&v, "a", &["e", "c d"], &["h", "f g"])])
        .unwrap()
        .remove(0);
    assert!(!close(
        a.get(Component::Ingredients),
        b.get(Component::Ingredients),
        1e-9
    ));
    assert!(!close(
        a.get(Component::Instructions),
        b.get(Component::Instructions),
        1e-9
    ));
}

#[test]
fn many_sentences_reduce_to_one_vector() {
    let v = vocab();
    let m = ModelParams::<f32>::new(tiny_model(), v.len(), 2).unwrap();
    let seven = ["a", "b c", "d e f", "g", "h a b c d", "e", "f f"];
    let r = recipe(&v, "a", &seven[..4], &seven);
    let (c, joint) = m.encode_recipe_embedding(&r).unwrap();
    assert_eq!(c.get(Component::Instructions).len(), 8);
    assert_eq!(joint.len(), 6);
    assert!(c.vectors.iter().flatten().all(|x| x.is_finite()));
}

#[test]
fn component_encoders_share_no_parameters() {
    let v = vocab();
    let m = ModelParams::<f64>::new(tiny_model(), v.len(), 5).unwrap();
    let r = recipe(&v, "a b", &["c d", "e"], &["f", "g h"]);
    let before = m.embed_components(&[&r]).unwrap().remove(0);
    let mut p = m.clone();
    for id in p.param_ids_with_prefix(ModelParams::<f64>::encoder_prefix(Component::Title)) {
        for x in p.store_mut().get_mut(id).data_mut() {
            *x += 0.05;
        }
    }
    let after = p.embed_components(&[&r]).unwrap().remove(0);
    assert_ne!(before.get(Component::Title), after.get(Component::Title));
    assert_eq!(
        before.get(Component::Ingredients),
        after.get(Component::Ingredients)
    );
    assert_eq!(
        before.get(Component::Instructions),
        after.get(Component::Instructions)
    );
}

#[test]
fn embeddings_are_deterministic() {
    let v = vocab();
    let r = recipe(&v, "a b", &["c d", "e"], &["f", "g h"]);
    let a = ModelParams::<f32>::new(tiny_model(), v.len(), 5).unwrap();
    let b = ModelParams::<f32>::new(tiny_model(), v.len(), 5).unwrap();
    assert_eq!(
        a.encode_recipe_embedding(&r).unwrap(),
        b.encode_recipe_embedding(&r).unwrap()
    );
}

#[test]
fn full_scale_shapes() {
    let cfg = xmrr::encoders::ModelConfig::default();
    let m = ModelParams::<f32>::new(cfg, 50, 1).unwrap();
    let e = m.encode_image(&vec![0.01; 2048]).unwrap();
    assert_eq!(e.len(), 1024);
    let n: f32 = e.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-5);
    let name = |n: &str| m.store().get(m.store().id(n).unwrap()).shape().to_vec();
    assert_eq!(name("merge.weight"), vec![1536, 1024]);
    assert_eq!(name("heads.ins_to_ing.weight"), vec![512, 512]);
    assert_eq!(name("empty.title"), vec![1, 512]);
}

#[test]
fn invalid_head_count_is_rejected() {
    let cfg = xmrr::encoders::ModelConfig {
        heads: 3,
        ..tiny_model()
    };
    assert!(matches!(
        ModelParams::<f32>::new(cfg, 10, 0),
        Err(ModelError::Diff(_))
    ));
}
