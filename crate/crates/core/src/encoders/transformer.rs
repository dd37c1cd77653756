use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::corpus::TokenSequence;
use crate::diffcore::{
    multi_head_self_attention, AttentionVars, LinearVars, ParamId, ParamStore, Scalar, Tape,
    Tensor, Var,
};

const EMBED_STD: f64 = 0.02;

pub(crate) fn normal_tensor<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols)
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub(crate) fn embedding<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    normal_tensor(rng, rows, cols, EMBED_STD)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    /// Weight `fan_in x fan_out` from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::matrix(fan_in, fan_out, data),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self { weight, bias }
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> LinearVars {
        LinearVars {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }

    /// Plain (tape-free) application on the rows of `x`.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        x.affine(store.get(self.weight), store.get(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

impl NormIds {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[1, width], T::one())),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[1, width])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    query: LinearIds,
    key: LinearIds,
    value: LinearIds,
    output: LinearIds,
    norm1: NormIds,
    ff_in: LinearIds,
    ff_out: LinearIds,
    norm2: NormIds,
}

/// Parameters of one Transformer encoder stack. Sentence-level stacks own
/// a token embedding table; list-level stacks consume sentence vectors.
#[derive(Clone, Debug)]
pub(crate) struct TransformerIds {
    token_embedding: Option<ParamId>,
    position_embedding: ParamId,
    max_len: usize,
    layers: Vec<LayerIds>,
}

impl TransformerIds {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        vocab_size: Option<usize>,
        max_len: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.width;
        let token_embedding = vocab_size
            .map(|v| store.insert(format!("{prefix}.token_embedding"), embedding(rng, v, d)));
        let position_embedding = store.insert(
            format!("{prefix}.position_embedding"),
            embedding(rng, max_len, d),
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                LayerIds {
                    query: LinearIds::new(store, rng, &format!("{p}.attention.query"), d, d),
                    key: LinearIds::new(store, rng, &format!("{p}.attention.key"), d, d),
                    value: LinearIds::new(store, rng, &format!("{p}.attention.value"), d, d),
                    output: LinearIds::new(store, rng, &format!("{p}.attention.output"), d, d),
                    norm1: NormIds::new(store, &format!("{p}.norm1"), d),
                    ff_in: LinearIds::new(
                        store,
                        rng,
                        &format!("{p}.feed_forward.in"),
                        d,
                        cfg.ff_width,
                    ),
                    ff_out: LinearIds::new(
                        store,
                        rng,
                        &format!("{p}.feed_forward.out"),
                        cfg.ff_width,
                        d,
                    ),
                    norm2: NormIds::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            max_len,
            layers,
        }
    }

    /// Encodes token sequences into one pooled vector each (`n x d`).
    /// Sequences are cut to the positional table length.
    pub fn encode_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        seqs: &[&TokenSequence],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let table = self
            .token_embedding
            .expect("sentence-level encoder has a token table");
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        if lens.contains(&0) {
            return Err(ModelError::EmptySequence);
        }
        let seq_len = lens.iter().copied().max().unwrap_or(1).min(self.max_len);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let toks: Vec<u32> = s.tokens().take(seq_len).collect();
            for p in 0..seq_len {
                ids.push(toks.get(p).copied().unwrap_or(crate::corpus::PAD) as usize);
                mask.push(p < toks.len());
            }
        }
        let table = tape.param(store, table);
        let x = tape.gather(table, &ids);
        self.run(tape, store, cfg, x, seq_len, mask, rng)
    }

    /// Encodes sequences of row vectors taken from `rows`; `groups[i]`
    /// lists the row indices forming sequence `i`.
    pub fn encode_rows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        rows: Var,
        groups: &[Vec<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if groups.iter().any(|g| g.is_empty()) {
            return Err(ModelError::EmptySequence);
        }
        let seq_len = groups
            .iter()
            .map(Vec::len)
            .max()
            .unwrap_or(1)
            .min(self.max_len);
        let mut idx = Vec::with_capacity(groups.len() * seq_len);
        let mut mask = Vec::with_capacity(groups.len() * seq_len);
        for g in groups {
            for p in 0..seq_len {
                idx.push(g.get(p).copied());
                mask.push(p < g.len());
            }
        }
        let x = tape.select_rows(rows, idx);
        self.run(tape, store, cfg, x, seq_len, mask, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        x: Var,
        seq_len: usize,
        mask: Vec<bool>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let n_rows = tape.value(x).rows();
        let positions: Vec<usize> = (0..n_rows).map(|r| r % seq_len).collect();
        let table = tape.param(store, self.position_embedding);
        let pos = tape.gather(table, &positions);
        let mut h = tape.add(x, pos);
        for layer in &self.layers {
            let weights = AttentionVars {
                query: layer.query.vars(tape, store),
                key: layer.key.vars(tape, store),
                value: layer.value.vars(tape, store),
                output: layer.output.vars(tape, store),
            };
            let a = multi_head_self_attention(tape, &weights, h, seq_len, cfg.heads, Some(&mask))?;
            let a = dropout(tape, a, cfg.dropout, rng.as_deref_mut());
            let res = tape.add(h, a);
            h = layer.norm1.apply(tape, store, res);
            let f = layer.ff_in.vars(tape, store).apply(tape, h);
            let f = tape.gelu(f);
            let f = layer.ff_out.vars(tape, store).apply(tape, f);
            let f = dropout(tape, f, cfg.dropout, rng.as_deref_mut());
            let res = tape.add(h, f);
            h = layer.norm2.apply(tape, store, res);
        }
        Ok(tape.segment_mean(h, seq_len, Some(mask)))
    }
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
        _ => x,
    }
}
