//! Flat parameter storage with a named-segment layout.
//!
//! All parameters live in one contiguous buffer. That keeps the optimizer
//! a single loop, makes gradient checking a per-coordinate perturbation,
//! and gives checkpoints a natural named-tensor table.

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Per-layer segment offsets into the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<TensorEntry>,
    pub total: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub ln_f_gain: usize,
    pub ln_f_bias: usize,
    pub head_w: usize,
    pub head_b: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut entries = Vec::new();
        let mut cursor = 0usize;
        let mut push = |name: String, shape: Vec<usize>, cursor: &mut usize| -> usize {
            let len: usize = shape.iter().product();
            let offset = *cursor;
            entries.push(TensorEntry {
                name,
                shape,
                offset,
                len,
            });
            *cursor += len;
            offset
        };

        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d], &mut cursor);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_seq_len, d], &mut cursor);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |suffix: &str| format!("layer{i}.{suffix}");
            layers.push(LayerOffsets {
                ln1_gain: push(p("ln1.gain"), vec![d], &mut cursor),
                ln1_bias: push(p("ln1.bias"), vec![d], &mut cursor),
                wq: push(p("attn.wq"), vec![d, d], &mut cursor),
                bq: push(p("attn.bq"), vec![d], &mut cursor),
                wk: push(p("attn.wk"), vec![d, d], &mut cursor),
                bk: push(p("attn.bk"), vec![d], &mut cursor),
                wv: push(p("attn.wv"), vec![d, d], &mut cursor),
                bv: push(p("attn.bv"), vec![d], &mut cursor),
                wo: push(p("attn.wo"), vec![d, d], &mut cursor),
                bo: push(p("attn.bo"), vec![d], &mut cursor),
                ln2_gain: push(p("ln2.gain"), vec![d], &mut cursor),
                ln2_bias: push(p("ln2.bias"), vec![d], &mut cursor),
                w1: push(p("ffn.w1"), vec![cfg.d_ff, d], &mut cursor),
                b1: push(p("ffn.b1"), vec![cfg.d_ff], &mut cursor),
                w2: push(p("ffn.w2"), vec![d, cfg.d_ff], &mut cursor),
                b2: push(p("ffn.b2"), vec![d], &mut cursor),
            });
        }
        let ln_f_gain = push("ln_f.gain".into(), vec![d], &mut cursor);
        let ln_f_bias = push("ln_f.bias".into(), vec![d], &mut cursor);
        let head_w = push("head.w".into(), vec![cfg.vocab_size, d], &mut cursor);
        let head_b = push("head.b".into(), vec![cfg.vocab_size], &mut cursor);

        Layout {
            entries,
            total: cursor,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain,
            ln_f_bias,
            head_w,
            head_b,
        }
    }
}
