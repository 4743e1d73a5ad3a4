//! Self-describing binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (dtype, model config, vocabulary, named tensor table, optimizer
//! hyperparameters and step), then the raw little-endian data blob:
//! parameters, followed by the Adam moments when optimizer state is
//! saved. Save/load round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoatError, Result};
use crate::model::config::ModelConfig;
use crate::model::optim::OptimizerState;
use crate::model::params::Layout;
use crate::model::scalar::Scalar;
use crate::model::transformer::TinyLm;
use crate::prompts::{Vocabulary, SPECIALS};

const MAGIC: &[u8; 8] = b"COATCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
    optimizer: Option<OptimizerMeta>,
    data_len: usize,
}

/// Serializes model, vocabulary, and (optionally) optimizer state.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &TinyLm<S>,
    vocab: &Vocabulary,
    opt: Option<&OptimizerState<S>>,
) -> Result<()> {
    let n = model.params().len();
    let data_len = n + if opt.is_some() { 2 * n } else { 0 };
    let header = Header {
        dtype: S::DTYPE.to_string(),
        config: model.config().clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: model
            .layout()
            .entries
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset: e.offset,
                len: e.len,
            })
            .collect(),
        optimizer: opt.map(|o| OptimizerMeta {
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
        }),
        data_len,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoatError::Config(format!("unserializable header: {e}")))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + data_len * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for &p in model.params() {
        p.write_le(&mut out);
    }
    if let Some(o) = opt {
        for &m in &o.m {
            m.write_le(&mut out);
        }
        for &v in &o.v {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint saved with the same scalar type.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(TinyLm<S>, Vocabulary, Option<OptimizerState<S>>)> {
    let bytes = fs::read(path)?;
    let bad = |m: String| CoatError::Config(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".to_string()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + header_len;
    if bytes.len() < data_start {
        return Err(bad("truncated header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.dtype != S::DTYPE {
        return Err(bad(format!(
            "dtype mismatch: file holds {}, caller expects {}",
            header.dtype,
            S::DTYPE
        )));
    }
    header.config.validate()?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(bad("vocabulary size disagrees with config".to_string()));
    }
    for (i, s) in SPECIALS.iter().enumerate() {
        if header.vocab.get(i).map(String::as_str) != Some(*s) {
            return Err(bad(format!("vocabulary lacks special token {s:?}")));
        }
    }
    let expected = data_start + header.data_len * S::BYTES;
    if bytes.len() != expected {
        return Err(bad(format!(
            "data blob has {} bytes, expected {}",
            bytes.len() - data_start,
            header.data_len * S::BYTES
        )));
    }

    let layout = Layout::new(&header.config);
    let n = layout.total;
    let with_opt = header.optimizer.is_some();
    if header.data_len != n + if with_opt { 2 * n } else { 0 } {
        return Err(bad("tensor table disagrees with config".to_string()));
    }
    let read_block = |block: usize| -> Vec<S> {
        let start = data_start + block * n * S::BYTES;
        (0..n)
            .map(|i| S::read_le(&bytes[start + i * S::BYTES..start + (i + 1) * S::BYTES]))
            .collect()
    };
    let params = read_block(0);
    let mut model = TinyLm::new(header.config.clone(), 0)?;
    model.params_mut().copy_from_slice(&params);

    let opt = header.optimizer.map(|meta| {
        let mut o = OptimizerState::new(n, meta.lr);
        o.step = meta.step;
        o.beta1 = meta.beta1;
        o.beta2 = meta.beta2;
        o.epsilon = meta.epsilon;
        o.m = read_block(1);
        o.v = read_block(2);
        o
    });

    let vocab = Vocabulary::load_tokens(header.vocab)?;
    Ok((model, vocab, opt))
}
