//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `XMRRCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header,
//! then raw little-endian `f32` payloads. Directory offsets are relative
//! to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdamSlot, AdamState, TextCursor, TrainConfig};
use crate::corpus::Vocabulary;
use crate::diffcore::Tensor;
use crate::encoders::{ModelError, ModelParams};

pub const MAGIC: &[u8; 8] = b"XMRRCKPT";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("file truncated at byte offset {offset}: {what} needs {needed} bytes")]
    Truncated {
        offset: usize,
        needed: usize,
        what: String,
    },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of a seeded ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a `u128` exactly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        let pos: u128 = self.word_pos.parse().map_err(|_| {
            CheckpointError::Header(format!("bad rng word position {:?}", self.word_pos))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything persisted after training.
#[derive(Clone, Debug)]
pub struct CheckpointState {
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    pub rng: RngState,
    pub text_cursor: TextCursor,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_r1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    vocabulary: Vocabulary,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerHeader,
    rng: RngState,
    text_cursor: TextCursor,
    epoch: usize,
    best_epoch: Option<usize>,
    best_val_r1: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(state: &CheckpointState) -> Vec<u8> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>, payload: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in state.params.tensors() {
        push(name.to_string(), t, &mut payload);
    }
    let store = state.params.store();
    let mut steps = BTreeMap::new();
    for (id, slot) in state.optimizer.slots() {
        let name = store.name(id);
        steps.insert(name.to_string(), slot.step);
        push(format!("{MOMENT_M}{name}"), &slot.m, &mut payload);
        push(format!("{MOMENT_V}{name}"), &slot.v, &mut payload);
    }
    let opt = &state.optimizer;
    let header = Header {
        config: state.config.clone(),
        vocabulary: state.vocabulary.clone(),
        tensors: entries,
        optimizer: OptimizerHeader {
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            steps,
        },
        rng: state.rng.clone(),
        text_cursor: state.text_cursor,
        epoch: state.epoch,
        best_epoch: state.best_epoch,
        best_val_r1: state.best_val_r1,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn take<'b>(
    bytes: &'b [u8],
    offset: usize,
    needed: usize,
    what: &str,
) -> Result<&'b [u8], CheckpointError> {
    bytes
        .get(offset..offset.saturating_add(needed))
        .ok_or_else(|| CheckpointError::Truncated {
            offset: offset.min(bytes.len()),
            needed,
            what: what.to_string(),
        })
}

/// Parses and validates a checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointState, CheckpointError> {
    if bytes.len() >= 8 && &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    take(bytes, 0, 8, "magic")?;
    let version = u32::from_le_bytes(take(bytes, 8, 4, "format version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = u64::from_le_bytes(take(bytes, 12, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len)
        .map_err(|_| CheckpointError::Header("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, 20, len, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let base = 20 + len;

    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        let raw = take(
            bytes,
            base + e.offset,
            count * 4,
            &format!("tensor {:?}", e.name),
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data));
    }

    let mut moments = BTreeMap::new();
    for name in header.optimizer.steps.keys() {
        for prefix in [MOMENT_M, MOMENT_V] {
            let key = format!("{prefix}{name}");
            let t = tensors
                .remove(&key)
                .ok_or(CheckpointError::MissingTensor(key.clone()))?;
            moments.insert(key, t);
        }
    }
    let model_cfg = header.config.model.clone();
    let params = ModelParams::from_tensors(model_cfg, header.vocabulary.len(), tensors)?;

    let mut optimizer = AdamState::new(
        header.optimizer.beta1,
        header.optimizer.beta2,
        header.optimizer.eps,
    );
    for (name, &step) in &header.optimizer.steps {
        let id = params.store().id(name).ok_or_else(|| {
            CheckpointError::Header(format!("optimizer state for unknown parameter {name:?}"))
        })?;
        let m = moments
            .remove(&format!("{MOMENT_M}{name}"))
            .expect("collected above");
        let v = moments
            .remove(&format!("{MOMENT_V}{name}"))
            .expect("collected above");
        let shape = params.store().get(id).shape();
        for t in [&m, &v] {
            if t.shape() != shape {
                return Err(ModelError::ShapeMismatch {
                    name: format!("optimizer moment of {name}"),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        optimizer.set_slot(id, AdamSlot { m, v, step });
    }

    Ok(CheckpointState {
        config: header.config,
        vocabulary: header.vocabulary,
        params,
        optimizer,
        rng: header.rng,
        text_cursor: header.text_cursor,
        epoch: header.epoch,
        best_epoch: header.best_epoch,
        best_val_r1: header.best_val_r1,
    })
}

pub fn save_checkpoint(
    state: &CheckpointState,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_checkpoint(state))
        .map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointState, CheckpointError> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}
