mod common;

use common::{desk_config, toy};
use xmrr::corpus::Vocabulary;
use xmrr::trainer::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointState, TrainConfig, Trainer,
    FORMAT_VERSION,
};

fn trained() -> (CheckpointState, Vocabulary) {
    let cfg = TrainConfig {
        epochs: 1,
        ..desk_config()
    };
    let data = toy(&cfg.model);
    let mut t = Trainer::new(cfg, data.vocab.len(), &data.train, &data.val).unwrap();
    t.run().unwrap();
    (t.checkpoint(data.vocab.clone()), data.vocab)
}

#[test]
fn round_trip_is_bit_exact() {
    let (state, vocab) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.vocabulary, vocab);
    assert_eq!(back.config, state.config);
    assert_eq!(back.epoch, 1);
    assert_eq!(back.best_val_r1, state.best_val_r1);
    assert_eq!(back.text_cursor, state.text_cursor);
    for ((n1, a), (n2, b)) in state.params.tensors().zip(back.params.tensors()) {
        assert_eq!(n1, n2);
        let bits = |t: &xmrr::diffcore::Tensor<f32>| {
            t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b), "{n1}");
    }
    assert_eq!(state.optimizer, back.optimizer);
    assert_eq!(state.rng.restore().unwrap(), back.rng.restore().unwrap());
    // saving the loaded state reproduces the file byte for byte
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn corrupt_files_are_rejected() {
    let (state, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = bytes.len() - 100;
    std::fs::write(&path, &bytes[..cut]).unwrap();
    match load_checkpoint(&path) {
        Err(CheckpointError::Truncated { offset, .. }) => assert!(offset <= cut && offset > 20),
        other => panic!("expected truncation error, got {other:?}"),
    }
    let msg = load_checkpoint(&path).unwrap_err().to_string();
    assert!(msg.contains("offset"), "{msg}");

    let mut bad = bytes.clone();
    bad[0] = b'Y';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::BadMagic)
    ));

    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Version { .. })
    ));

    std::fs::write(&path, &bytes[..10]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Truncated { .. })
    ));
}

#[test]
fn vocabulary_size_mismatch_is_a_shape_error() {
    let (mut state, vocab) = trained();
    let mut tokens = vocab.tokens().to_vec();
    tokens.push("extra".into());
    state.vocabulary = Vocabulary::from_tokens(tokens.into_iter().skip(2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(
        matches!(
            err,
            CheckpointError::Model(xmrr::encoders::ModelError::ShapeMismatch { .. })
        ),
        "{err}"
    );
}
