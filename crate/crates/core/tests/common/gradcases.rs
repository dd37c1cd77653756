//! Finite-difference checks for every tape primitive and for the full
//! training loss. Each case returns the worst coordinate error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmrr::corpus::{tokenize_sentence, BatchMode, TokenizedRecipe, Vocabulary};
use xmrr::diffcore::{grad_check, Tape, Tensor, Var};
use xmrr::encoders::ModelParams;
use xmrr::losses::{pair_loss, recipe_component_loss, total_loss, LossConfig};

use super::{rng, tiny_model, uniform};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Case = fn(&mut ChaCha8Rng, u64) -> f64;

/// Random linear readout so every output coordinate matters.
pub fn readout(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = t.value(y).shape().to_vec();
    let w = uniform(&mut rng(seed ^ 0xabc), shape[0], shape[1]);
    let w = t.constant(w);
    let p = t.mul(y, w);
    t.sum(p)
}

/// `f(x)` checked with every other input held constant.
fn gc(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    grad_check(f, x, EPS).expect("scalar output")
}

fn matmul(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (a, b) = (uniform(r, 3, 4), uniform(r, 4, 2));
    let e1 = gc(&a, |t, x| {
        let c = t.constant(b.clone());
        let y = t.matmul(x, c);
        readout(t, y, s)
    });
    let e2 = gc(&b, |t, x| {
        let c = t.constant(a.clone());
        let y = t.matmul(c, x);
        readout(t, y, s)
    });
    e1.max(e2)
}

fn matmul_t(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (a, b) = (uniform(r, 3, 4), uniform(r, 5, 4));
    let e1 = gc(&a, |t, x| {
        let c = t.constant(b.clone());
        let y = t.matmul_t(x, c);
        readout(t, y, s)
    });
    let e2 = gc(&b, |t, x| {
        let c = t.constant(a.clone());
        let y = t.matmul_t(c, x);
        readout(t, y, s)
    });
    e1.max(e2)
}

fn elementwise(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (a, b, row) = (uniform(r, 3, 4), uniform(r, 3, 4), uniform(r, 1, 4));
    let e1 = gc(&a, |t, x| {
        let b = t.constant(b.clone());
        let row = t.constant(row.clone());
        let y = t.add(x, b);
        let y = t.mul(y, x);
        let y = t.scale(y, 0.7);
        let y = t.add_row(y, row);
        readout(t, y, s)
    });
    let e2 = gc(&row, |t, x| {
        let a = t.constant(a.clone());
        let y = t.add_row(a, x);
        readout(t, y, s)
    });
    e1.max(e2)
}

fn linear(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (x0, w0, b0) = (uniform(r, 3, 4), uniform(r, 4, 5), uniform(r, 1, 5));
    let ex = gc(&x0, |t, x| {
        let (w, b) = (t.constant(w0.clone()), t.constant(b0.clone()));
        let y = t.linear(x, w, b);
        readout(t, y, s)
    });
    let ew = gc(&w0, |t, w| {
        let (x, b) = (t.constant(x0.clone()), t.constant(b0.clone()));
        let y = t.linear(x, w, b);
        readout(t, y, s)
    });
    let eb = gc(&b0, |t, b| {
        let (x, w) = (t.constant(x0.clone()), t.constant(w0.clone()));
        let y = t.linear(x, w, b);
        readout(t, y, s)
    });
    ex.max(ew).max(eb)
}

fn masked_means(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let x0 = uniform(r, 6, 3);
    let mask: Vec<bool> = (0..6).map(|i| i % 3 == 0 || r.random_bool(0.5)).collect();
    let e1 = gc(&x0, |t, x| {
        let y = t.segment_mean(x, 3, Some(mask.clone()));
        readout(t, y, s)
    });
    let e2 = gc(&x0, |t, x| {
        let y = t.mean_rows(x, None);
        readout(t, y, s)
    });
    e1.max(e2)
}

fn concat_select_slice(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (x0, other) = (uniform(r, 3, 4), uniform(r, 3, 2));
    let e1 = gc(&x0, |t, x| {
        let o = t.constant(other.clone());
        let c = t.concat_cols(&[o, x, x]);
        let sl = t.slice_cols(c, 1, 5);
        readout(t, sl, s)
    });
    let e2 = gc(&x0, |t, x| {
        let c = t.concat_rows(&[x, x]);
        let sel = t.select_rows(c, vec![Some(4), None, Some(0), Some(4), Some(2)]);
        readout(t, sel, s)
    });
    e1.max(e2)
}

fn gather(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let table = uniform(r, 7, 3);
    let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..7)).collect();
    gc(&table, |t, x| {
        let y = t.gather(x, &ids);
        readout(t, y, s)
    })
}

fn softmax_gelu_relu(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let x0 = uniform(r, 3, 5).map(|v| 3.0 * v);
    let e1 = gc(&x0, |t, x| {
        let y = t.softmax(x);
        readout(t, y, s)
    });
    let e2 = gc(&x0, |t, x| {
        let y = t.gelu(x);
        readout(t, y, s)
    });
    let e3 = gc(&x0, |t, x| {
        let y = t.relu(x);
        readout(t, y, s)
    });
    e1.max(e2).max(e3)
}

fn layer_norm(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (x0, g0, b0) = (uniform(r, 3, 6), uniform(r, 1, 6), uniform(r, 1, 6));
    let ex = gc(&x0, |t, x| {
        let (g, b) = (t.constant(g0.clone()), t.constant(b0.clone()));
        let y = t.layer_norm(x, g, b);
        readout(t, y, s)
    });
    let eg = gc(&g0, |t, g| {
        let (x, b) = (t.constant(x0.clone()), t.constant(b0.clone()));
        let y = t.layer_norm(x, g, b);
        readout(t, y, s)
    });
    let eb = gc(&b0, |t, b| {
        let (x, g) = (t.constant(x0.clone()), t.constant(g0.clone()));
        let y = t.layer_norm(x, g, b);
        readout(t, y, s)
    });
    ex.max(eg).max(eb)
}

fn normalize_cosine(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (a, b) = (uniform(r, 3, 4), uniform(r, 3, 4));
    let e1 = gc(&a, |t, x| {
        let y = t.l2_normalize(x);
        readout(t, y, s)
    });
    let e2 = gc(&a, |t, x| {
        let c = t.constant(b.clone());
        let y = t.cosine(x, c);
        readout(t, y, s)
    });
    let e3 = gc(&b, |t, x| {
        let c = t.constant(a.clone());
        let y = t.cosine(c, x);
        readout(t, y, s)
    });
    e1.max(e2).max(e3)
}

fn attention(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let qkv = [uniform(r, 8, 4), uniform(r, 8, 4), uniform(r, 8, 4)];
    let mask: Vec<bool> = (0..8).map(|i| i % 4 == 0 || r.random_bool(0.6)).collect();
    (0..3)
        .map(|which| {
            gc(&qkv[which], |t, x| {
                let mut ins = qkv.clone().map(|m| t.constant(m));
                ins[which] = x;
                let y = t.attention(ins[0], ins[1], ins[2], 4, 2, Some(&mask));
                readout(t, y, s)
            })
        })
        .fold(0.0, f64::max)
}

fn bi_triplet(r: &mut ChaCha8Rng, _: u64) -> f64 {
    let sim = uniform(r, 4, 4);
    gc(&sim, |t, x| t.bi_triplet(x, 0.3))
}

fn dropout(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let x0 = uniform(r, 3, 4);
    gc(&x0, |t, x| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(s);
        let y = t.dropout(x, 0.3, &mut mask_rng);
        readout(t, y, s)
    })
}

pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul),
        ("matmul_t", matmul_t),
        ("add/mul/scale/add_row", elementwise),
        ("linear", linear),
        ("masked mean", masked_means),
        ("concat/select/slice", concat_select_slice),
        ("gather", gather),
        ("softmax/gelu/relu", softmax_gelu_relu),
        ("layer_norm", layer_norm),
        ("l2_normalize/cosine", normalize_cosine),
        ("attention", attention),
        ("bi_triplet", bi_triplet),
        ("dropout", dropout),
    ]
}

fn two_recipes(vocab: &Vocabulary, r: &mut ChaCha8Rng) -> Vec<TokenizedRecipe> {
    let tok = |s: &str| tokenize_sentence(vocab, s, 6);
    (0..2)
        .map(|i| TokenizedRecipe {
            id: format!("r{i}"),
            title: tok(if i == 0 { "a b c" } else { "d e" }),
            ingredients: vec![tok("a d"), tok(if i == 0 { "b" } else { "c e f" })],
            instructions: vec![tok("f e d c"), tok("a"), tok("b b")],
            image_feature: Some((0..5).map(|_| r.random_range(-1.0..1.0f32)).collect()),
        })
        .collect()
}

/// Paired-batch loss (pair + component terms) of a 2-sample batch through
/// every encoder, differentiated with respect to each parameter tensor.
/// Returns the worst error and the name of the parameter where it occurred.
pub fn full_loss_error(seed: u64) -> (f64, String) {
    let vocab = Vocabulary::from_tokens("a b c d e f".split(' ').map(String::from));
    let cfg = tiny_model();
    let loss_cfg = LossConfig::default();
    let mut r = rng(seed);
    let mut params = ModelParams::<f64>::new(cfg.clone(), vocab.len(), seed).unwrap();
    // move biases and gains off their init values
    for id in params.store().ids().collect::<Vec<_>>() {
        for v in params.store_mut().get_mut(id).data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let recipes = two_recipes(&vocab, &mut r);
    let refs: Vec<&TokenizedRecipe> = recipes.iter().collect();
    let feats: Vec<Vec<f64>> = recipes
        .iter()
        .map(|x| {
            x.image_feature
                .as_ref()
                .unwrap()
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let feats = Tensor::from_rows(&feats);
    let mut worst = (0.0, String::new());
    for id in params.store().ids() {
        let err = gc(params.store().get(id), |t, x| {
            t.bind_param(id, x);
            let rv = params.forward_recipes(t, &refs, None).unwrap();
            let f = t.constant(feats.clone());
            let img = params.forward_images(t, f);
            let pair = pair_loss(t, img, rv.recipe, loss_cfg.margin).unwrap();
            let rec = recipe_component_loss(
                t,
                rv.components,
                cfg.components.set(),
                loss_cfg.margin,
                |t, a, b, v| params.project_var(t, a, b, v),
            )
            .unwrap();
            total_loss(t, Some(pair), rec, &loss_cfg, BatchMode::Paired)
                .unwrap()
                .total
        });
        if err >= worst.0 {
            worst = (err, params.store().name(id).to_string());
        }
    }
    worst
}
