mod common;

use common::{desk_config, toy};
use xmrr::corpus::{make_batches, BatchMode, TokenizedRecipe};
use xmrr::trainer::{TrainConfig, TrainError, Trainer};

fn short(cfg: TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, ..cfg }
}

#[test]
fn text_only_step_leaves_image_projection_untouched() {
    let cfg = desk_config();
    let data = toy(&cfg.model);
    let mut t = Trainer::new(cfg.clone(), data.vocab.len(), &data.train, &data.val).unwrap();
    let paired = make_batches(&data.train, 32, 0, 0, BatchMode::Paired).unwrap();
    let text = make_batches(&data.train, 32, 0, 0, BatchMode::TextOnly).unwrap();
    let first = t.train_step(&paired[0], 1e-3).unwrap();
    assert!(first.is_finite() && first > 0.0);

    let img = t.params().image_param_ids();
    let snapshot = |t: &Trainer| {
        img.map(|id| {
            let s = t.optimizer().slot(id).unwrap();
            (
                t.params().store().get(id).clone(),
                s.m.clone(),
                s.v.clone(),
                s.step,
            )
        })
    };
    let merge_before = t
        .params()
        .store()
        .get(t.params().store().id("merge.weight").unwrap())
        .clone();
    let before = snapshot(&t);
    let loss = t.train_step(&text[0], 1e-3).unwrap();
    assert!(loss > 0.0);
    assert_eq!(before, snapshot(&t));
    // the recipe merge layer is outside the component loss as well
    assert_eq!(
        &merge_before,
        t.params()
            .store()
            .get(t.params().store().id("merge.weight").unwrap())
    );
    // while the component heads did move
    let head = t.params().store().id("heads.ing_to_ttl.weight").unwrap();
    assert_eq!(t.optimizer().slot(head).unwrap().step, 2);
}

#[test]
fn best_score_is_history_maximum() {
    let cfg = short(desk_config(), 3);
    let data = toy(&cfg.model);
    let mut t = Trainer::new(cfg, data.vocab.len(), &data.train, &data.val).unwrap();
    t.run().unwrap();
    let hist = t.history();
    assert_eq!(hist.len(), 3);
    let max = hist.iter().map(|h| h.val_r1).fold(f64::MIN, f64::max);
    let (epoch, best) = t.best_score().unwrap();
    assert_eq!(best, max);
    assert_eq!(hist[epoch].val_r1, best);
    assert!(hist.iter().all(|h| h.train_loss.is_finite()));
    assert_eq!(hist[0].lr, 1e-3);
}

#[test]
fn runs_are_reproducible() {
    let cfg = short(desk_config(), 2);
    let data = toy(&cfg.model);
    let run = || {
        let mut t = Trainer::new(cfg.clone(), data.vocab.len(), &data.train, &data.val).unwrap();
        t.run().unwrap();
        let params: Vec<Vec<f32>> = t
            .params()
            .tensors()
            .map(|(_, x)| x.data().to_vec())
            .collect();
        (t.history().to_vec(), params)
    };
    assert_eq!(run(), run());
}

#[test]
fn paired_only_corpus_skips_alternation() {
    let cfg = short(desk_config(), 1);
    let data = toy(&cfg.model);
    let paired: Vec<TokenizedRecipe> = data
        .train
        .iter()
        .filter(|r| r.is_paired())
        .cloned()
        .collect();
    let mut t = Trainer::new(cfg, data.vocab.len(), &paired, &[]).unwrap();
    t.run().unwrap();
    assert_eq!(t.history().len(), 1);
}

#[test]
fn missing_paired_data_is_an_error() {
    let cfg = desk_config();
    let data = toy(&cfg.model);
    let text: Vec<TokenizedRecipe> = data
        .train
        .iter()
        .filter(|r| !r.is_paired())
        .cloned()
        .collect();
    assert!(matches!(
        Trainer::new(cfg, data.vocab.len(), &text, &[]),
        Err(TrainError::NoPairedData)
    ));
}

#[test]
fn learning_rate_decays_on_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-4);
    assert!((cfg.lr_at(30) - 1e-5).abs() < 1e-18);
    assert!((cfg.lr_at(59) - 1e-5).abs() < 1e-18);
    assert!((cfg.lr_at(60) - 1e-6).abs() < 1e-19);
}
