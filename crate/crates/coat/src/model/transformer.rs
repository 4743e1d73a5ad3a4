//! A small decoder-only autoregressive transformer with hand-written
//! forward and backward passes.
//!
//! Two forward paths exist: an incremental path over a key/value cache
//! (used for inference, scoring, and decoding) and a taped path that
//! records activations for backpropagation. Both are built from the same
//! per-position helpers, so they produce bit-identical outputs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoatError, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Layout;
use crate::model::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// The trainable model: a configuration plus one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm<S: Scalar> {
    pub(crate) config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<S>,
}

/// Per-layer key/value tensors for incremental forward passes.
#[derive(Debug, Clone)]
pub struct KvCache<S: Scalar> {
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Recorded activations for one training sequence.
pub(crate) struct Tape<S: Scalar> {
    ids: Vec<u32>,
    emb_mask: Option<Vec<S>>,
    layers: Vec<LayerTape<S>>,
    xhat_f: Vec<S>,
    inv_std_f: Vec<S>,
    pub(crate) probs: Vec<S>,
}

struct LayerTape<S: Scalar> {
    xhat1: Vec<S>,
    inv_std1: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    attn: Vec<S>,
    ctx: Vec<S>,
    attn_mask: Option<Vec<S>>,
    xhat2: Vec<S>,
    inv_std2: Vec<S>,
    ffn_pre: Vec<S>,
    ffn_act: Vec<S>,
    ffn_mask: Option<Vec<S>>,
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `out = W x + b` with `W` stored row-major `[out_dim, in_dim]`.
fn matvec<S: Scalar>(w: &[S], b: &[S], x: &[S], out: &mut [S]) {
    let in_dim = x.len();
    for ((row, bias), o) in w.chunks_exact(in_dim).zip(b).zip(out.iter_mut()) {
        *o = dot(row, x) + *bias;
    }
}

/// `out += W^T g`, the input-gradient of [`matvec`].
fn matvec_t_accum<S: Scalar>(w: &[S], g: &[S], out: &mut [S]) {
    let in_dim = out.len();
    for (row, gi) in w.chunks_exact(in_dim).zip(g) {
        if *gi == S::zero() {
            continue;
        }
        for (o, wi) in out.iter_mut().zip(row) {
            *o += *gi * *wi;
        }
    }
}

/// `dW += g ⊗ x` and `db += g` for a [`matvec`] call, accumulated into
/// the flat gradient buffer at the weight and bias offsets.
fn matvec_grads<S: Scalar>(grad: &mut [S], w_off: usize, b_off: usize, g: &[S], x: &[S]) {
    let in_dim = x.len();
    for (o, gi) in g.iter().enumerate() {
        if *gi == S::zero() {
            continue;
        }
        grad[b_off + o] += *gi;
        let drow = &mut grad[w_off + o * in_dim..w_off + (o + 1) * in_dim];
        for (dwi, xi) in drow.iter_mut().zip(x) {
            *dwi += *gi * *xi;
        }
    }
}

/// Writes the normalized vector into `xhat` and `gain ⊙ xhat + bias` into
/// `out`; returns `1 / sqrt(var + eps)`.
fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], xhat: &mut [S], out: &mut [S]) -> S {
    let n = S::from_f64(x.len() as f64);
    let mut mean = S::zero();
    for v in x {
        mean += *v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for v in x {
        let c = *v - mean;
        var += c * c;
    }
    var = var / n;
    let inv_std = (var + S::from_f64(LN_EPS)).sqrt().recip();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    inv_std
}

/// Input-gradient of [`layer_norm`]; accumulates gain/bias gradients into
/// the flat buffer at the given offsets.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    inv_std: S,
    gain: &[S],
    grad: &mut [S],
    gain_off: usize,
    bias_off: usize,
    dx: &mut [S],
) {
    let n = S::from_f64(dy.len() as f64);
    let mut mean_dxhat = S::zero();
    let mut mean_dxhat_xhat = S::zero();
    for i in 0..dy.len() {
        grad[gain_off + i] += dy[i] * xhat[i];
        grad[bias_off + i] += dy[i];
        let dxhat = dy[i] * gain[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat[i];
    }
    mean_dxhat = mean_dxhat / n;
    mean_dxhat_xhat = mean_dxhat_xhat / n;
    for i in 0..dy.len() {
        let dxhat = dy[i] * gain[i];
        dx[i] += inv_std * (dxhat - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_prime<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for v in &row[1..] {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one logit row evaluated in f64, returning the log
/// probability of `index`.
fn log_prob_f64<S: Scalar>(logits: &[S], index: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in logits {
        max = max.max(v.as_f64());
    }
    let mut sum = 0.0f64;
    for v in logits {
        sum += (v.as_f64() - max).exp();
    }
    logits[index].as_f64() - max - sum.ln()
}

impl<S: Scalar> TinyLm<S> {
    /// Initializes embeddings and projection weights from N(0, 0.02) and
    /// the output head at zero, so a fresh model predicts the uniform
    /// distribution at every position.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![S::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        for e in &layout.entries {
            let seg = &mut params[e.offset..e.offset + e.len];
            let leaf = e.name.rsplit('.').next().expect("nonempty name");
            if e.name == "head.w" || e.name == "head.b" {
                continue; // stays zero
            } else if leaf == "gain" {
                seg.fill(S::one());
            } else if leaf.starts_with('b') {
                continue; // biases stay zero
            } else {
                for p in seg.iter_mut() {
                    *p = S::from_f64(normal.sample(&mut rng));
                }
            }
        }
        Ok(TinyLm {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    /// Mutable access to the flat parameter buffer; used by the optimizer,
    /// checkpoint loading, and tests that craft specific behaviours.
    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn cache(&self) -> KvCache<S> {
        KvCache::new(self.config.n_layers)
    }

    fn check_ids(&self, ids: &[u32], extra: usize) -> Result<()> {
        if ids.len() + extra > self.config.max_seq_len {
            return Err(CoatError::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len() + extra,
                self.config.max_seq_len
            )));
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(CoatError::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Extends the cache with `new_ids` and returns one logit row per new
    /// position. Position `t` attends only to positions `<= t`.
    pub fn forward_logits_cached(
        &self,
        cache: &mut KvCache<S>,
        new_ids: &[u32],
    ) -> Result<Vec<Vec<S>>> {
        self.check_ids(new_ids, cache.len)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
        let p = &self.params;
        let lo = &self.layout;

        let mut out = Vec::with_capacity(new_ids.len());
        let mut x = vec![S::zero(); d];
        let mut a = vec![S::zero(); d];
        let mut xhat = vec![S::zero(); d];
        let mut q = vec![S::zero(); d];
        let mut ctx = vec![S::zero(); d];
        let mut branch = vec![S::zero(); d];
        let mut pre = vec![S::zero(); cfg.d_ff];
        let mut act = vec![S::zero(); cfg.d_ff];

        for &id in new_ids {
            let pos = cache.len;
            let tok = &p[lo.tok_emb + id as usize * d..lo.tok_emb + (id as usize + 1) * d];
            let pe = &p[lo.pos_emb + pos * d..lo.pos_emb + (pos + 1) * d];
            for i in 0..d {
                x[i] = tok[i] + pe[i];
            }
            for (l, off) in lo.layers.iter().enumerate() {
                layer_norm(
                    &x,
                    &p[off.ln1_gain..off.ln1_gain + d],
                    &p[off.ln1_bias..off.ln1_bias + d],
                    &mut xhat,
                    &mut a,
                );
                matvec(&p[off.wq..off.wq + d * d], &p[off.bq..off.bq + d], &a, &mut q);
                let base = cache.k[l].len();
                cache.k[l].resize(base + d, S::zero());
                cache.v[l].resize(base + d, S::zero());
                matvec(
                    &p[off.wk..off.wk + d * d],
                    &p[off.bk..off.bk + d],
                    &a,
                    &mut cache.k[l][base..base + d],
                );
                matvec(
                    &p[off.wv..off.wv + d * d],
                    &p[off.bv..off.bv + d],
                    &a,
                    &mut cache.v[l][base..base + d],
                );
                let ks = &cache.k[l];
                let vs = &cache.v[l];
                for h in 0..heads {
                    let hq = &q[h * dh..(h + 1) * dh];
                    let mut scores = Vec::with_capacity(pos + 1);
                    for j in 0..=pos {
                        let kj = &ks[j * d + h * dh..j * d + (h + 1) * dh];
                        scores.push(dot(hq, kj) * inv_sqrt);
                    }
                    softmax_in_place(&mut scores);
                    let hctx = &mut ctx[h * dh..(h + 1) * dh];
                    hctx.fill(S::zero());
                    for (j, w) in scores.iter().enumerate() {
                        let vj = &vs[j * d + h * dh..j * d + (h + 1) * dh];
                        for (c, vv) in hctx.iter_mut().zip(vj) {
                            *c += *w * *vv;
                        }
                    }
                }
                matvec(
                    &p[off.wo..off.wo + d * d],
                    &p[off.bo..off.bo + d],
                    &ctx,
                    &mut branch,
                );
                for i in 0..d {
                    x[i] += branch[i];
                }
                layer_norm(
                    &x,
                    &p[off.ln2_gain..off.ln2_gain + d],
                    &p[off.ln2_bias..off.ln2_bias + d],
                    &mut xhat,
                    &mut a,
                );
                matvec(
                    &p[off.w1..off.w1 + cfg.d_ff * d],
                    &p[off.b1..off.b1 + cfg.d_ff],
                    &a,
                    &mut pre,
                );
                for i in 0..cfg.d_ff {
                    act[i] = gelu(pre[i]);
                }
                matvec(
                    &p[off.w2..off.w2 + d * cfg.d_ff],
                    &p[off.b2..off.b2 + d],
                    &act,
                    &mut branch,
                );
                for i in 0..d {
                    x[i] += branch[i];
                }
            }
            layer_norm(
                &x,
                &p[lo.ln_f_gain..lo.ln_f_gain + d],
                &p[lo.ln_f_bias..lo.ln_f_bias + d],
                &mut xhat,
                &mut a,
            );
            let mut logits = vec![S::zero(); cfg.vocab_size];
            matvec(
                &p[lo.head_w..lo.head_w + cfg.vocab_size * d],
                &p[lo.head_b..lo.head_b + cfg.vocab_size],
                &a,
                &mut logits,
            );
            out.push(logits);
            cache.len += 1;
        }
        Ok(out)
    }

    /// Logit rows for a full sequence.
    pub fn forward_logits(&self, ids: &[u32]) -> Result<Vec<Vec<S>>> {
        let mut cache = self.cache();
        self.forward_logits_cached(&mut cache, ids)
    }

    /// Per-position next-token probability distributions.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<Vec<S>>> {
        let mut rows = self.forward_logits(ids)?;
        for row in &mut rows {
            softmax_in_place(row);
        }
        Ok(rows)
    }

    /// Sum of negative log-likelihoods and the count of scored positions.
    /// The label at position `t` is `ids[t + 1]`.
    pub fn nll_sums(&self, ids: &[u32], target_mask: &[bool]) -> Result<(f64, usize)> {
        if target_mask.len() != ids.len() {
            return Err(CoatError::InvalidArgument(format!(
                "mask length {} does not match sequence length {}",
                target_mask.len(),
                ids.len()
            )));
        }
        if target_mask.last() == Some(&true) {
            return Err(CoatError::InvalidArgument(
                "last position has no next-token label and cannot be masked in".to_string(),
            ));
        }
        let logits = self.forward_logits(ids)?;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (t, &scored) in target_mask.iter().enumerate() {
            if scored {
                sum -= log_prob_f64(&logits[t], ids[t + 1] as usize);
                count += 1;
            }
        }
        Ok((sum, count))
    }

    /// Mean negative log-likelihood over masked-in positions.
    pub fn nll_loss(&self, ids: &[u32], target_mask: &[bool]) -> Result<f64> {
        let (sum, count) = self.nll_sums(ids, target_mask)?;
        if count == 0 {
            return Err(CoatError::InvalidArgument(
                "mask selects no positions".to_string(),
            ));
        }
        Ok(sum / count as f64)
    }

    /// Mean negative log-likelihood over all masked positions of a batch
    /// (a global token mean, matching the training loss).
    pub fn batch_nll(&self, batch: &[(Vec<u32>, Vec<bool>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(CoatError::InvalidArgument("empty batch".to_string()));
        }
        let mut sum = 0.0;
        let mut count = 0;
        for (ids, mask) in batch {
            let (s, c) = self.nll_sums(ids, mask)?;
            sum += s;
            count += c;
        }
        if count == 0 {
            return Err(CoatError::InvalidArgument(
                "batch masks select no positions".to_string(),
            ));
        }
        Ok(sum / count as f64)
    }

    fn dropout_masks(
        &self,
        len: usize,
        seed: u64,
    ) -> (Option<Vec<S>>, Vec<(Option<Vec<S>>, Option<Vec<S>>)>) {
        let p = self.config.dropout;
        if p == 0.0 {
            return (None, vec![(None, None); self.config.n_layers]);
        }
        let keep = 1.0 - p;
        let scale = S::from_f64(1.0 / keep);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<S> {
            (0..n)
                .map(|_| {
                    if rand::Rng::random_bool(&mut rng, keep) {
                        scale
                    } else {
                        S::zero()
                    }
                })
                .collect()
        };
        let d = self.config.d_model;
        let emb = Some(draw(len * d));
        let layers = (0..self.config.n_layers)
            .map(|_| (Some(draw(len * d)), Some(draw(len * d))))
            .collect();
        (emb, layers)
    }

    /// Taped forward over a whole sequence, recording every activation
    /// needed by the backward pass. `dropout_seed` only matters when the
    /// configured dropout is nonzero.
    pub(crate) fn forward_tape(&self, ids: &[u32], dropout_seed: u64) -> Result<Tape<S>> {
        self.check_ids(ids, 0)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let dff = cfg.d_ff;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let t_len = ids.len();
        let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
        let p = &self.params;
        let lo = &self.layout;

        let (emb_mask, layer_masks) = self.dropout_masks(t_len, dropout_seed);

        let mut x = vec![S::zero(); t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let tok = &p[lo.tok_emb + id as usize * d..lo.tok_emb + (id as usize + 1) * d];
            let pe = &p[lo.pos_emb + t * d..lo.pos_emb + (t + 1) * d];
            for i in 0..d {
                x[t * d + i] = tok[i] + pe[i];
            }
        }
        if let Some(mask) = &emb_mask {
            for (xi, mi) in x.iter_mut().zip(mask) {
                *xi = *xi * *mi;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut a_buf = vec![S::zero(); d];
        for (l, off) in lo.layers.iter().enumerate() {
            let mut xhat1 = vec![S::zero(); t_len * d];
            let mut inv_std1 = vec![S::zero(); t_len];
            let mut q = vec![S::zero(); t_len * d];
            let mut k = vec![S::zero(); t_len * d];
            let mut v = vec![S::zero(); t_len * d];
            for t in 0..t_len {
                inv_std1[t] = layer_norm(
                    &x[t * d..(t + 1) * d],
                    &p[off.ln1_gain..off.ln1_gain + d],
                    &p[off.ln1_bias..off.ln1_bias + d],
                    &mut xhat1[t * d..(t + 1) * d],
                    &mut a_buf,
                );
                matvec(
                    &p[off.wq..off.wq + d * d],
                    &p[off.bq..off.bq + d],
                    &a_buf,
                    &mut q[t * d..(t + 1) * d],
                );
                matvec(
                    &p[off.wk..off.wk + d * d],
                    &p[off.bk..off.bk + d],
                    &a_buf,
                    &mut k[t * d..(t + 1) * d],
                );
                matvec(
                    &p[off.wv..off.wv + d * d],
                    &p[off.bv..off.bv + d],
                    &a_buf,
                    &mut v[t * d..(t + 1) * d],
                );
            }
            let mut attn = vec![S::zero(); heads * t_len * t_len];
            let mut ctx = vec![S::zero(); t_len * d];
            for t in 0..t_len {
                for h in 0..heads {
                    let hq = &q[t * d + h * dh..t * d + (h + 1) * dh];
                    let mut scores = Vec::with_capacity(t + 1);
                    for j in 0..=t {
                        let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                        scores.push(dot(hq, kj) * inv_sqrt);
                    }
                    softmax_in_place(&mut scores);
                    let hctx = &mut ctx[t * d + h * dh..t * d + (h + 1) * dh];
                    for (j, w) in scores.iter().enumerate() {
                        let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                        for (c, vv) in hctx.iter_mut().zip(vj) {
                            *c += *w * *vv;
                        }
                    }
                    let row = &mut attn[h * t_len * t_len + t * t_len..][..t + 1];
                    row.copy_from_slice(&scores);
                }
            }
            let attn_mask = layer_masks[l].0.clone();
            for t in 0..t_len {
                matvec(
                    &p[off.wo..off.wo + d * d],
                    &p[off.bo..off.bo + d],
                    &ctx[t * d..(t + 1) * d],
                    &mut a_buf,
                );
                for i in 0..d {
                    let mut add = a_buf[i];
                    if let Some(m) = &attn_mask {
                        add = add * m[t * d + i];
                    }
                    x[t * d + i] += add;
                }
            }
            let mut xhat2 = vec![S::zero(); t_len * d];
            let mut inv_std2 = vec![S::zero(); t_len];
            let mut ffn_pre = vec![S::zero(); t_len * dff];
            let mut ffn_act = vec![S::zero(); t_len * dff];
            let ffn_mask = layer_masks[l].1.clone();
            for t in 0..t_len {
                inv_std2[t] = layer_norm(
                    &x[t * d..(t + 1) * d],
                    &p[off.ln2_gain..off.ln2_gain + d],
                    &p[off.ln2_bias..off.ln2_bias + d],
                    &mut xhat2[t * d..(t + 1) * d],
                    &mut a_buf,
                );
                matvec(
                    &p[off.w1..off.w1 + dff * d],
                    &p[off.b1..off.b1 + dff],
                    &a_buf,
                    &mut ffn_pre[t * dff..(t + 1) * dff],
                );
                for i in 0..dff {
                    ffn_act[t * dff + i] = gelu(ffn_pre[t * dff + i]);
                }
                let mut out = vec![S::zero(); d];
                matvec(
                    &p[off.w2..off.w2 + d * dff],
                    &p[off.b2..off.b2 + d],
                    &ffn_act[t * dff..(t + 1) * dff],
                    &mut out,
                );
                for i in 0..d {
                    let mut add = out[i];
                    if let Some(m) = &ffn_mask {
                        add = add * m[t * d + i];
                    }
                    x[t * d + i] += add;
                }
            }
            layers.push(LayerTape {
                xhat1,
                inv_std1,
                q,
                k,
                v,
                attn,
                ctx,
                attn_mask,
                xhat2,
                inv_std2,
                ffn_pre,
                ffn_act,
                ffn_mask,
            });
        }

        let mut xhat_f = vec![S::zero(); t_len * d];
        let mut inv_std_f = vec![S::zero(); t_len];
        let mut probs = vec![S::zero(); t_len * cfg.vocab_size];
        for t in 0..t_len {
            inv_std_f[t] = layer_norm(
                &x[t * d..(t + 1) * d],
                &p[lo.ln_f_gain..lo.ln_f_gain + d],
                &p[lo.ln_f_bias..lo.ln_f_bias + d],
                &mut xhat_f[t * d..(t + 1) * d],
                &mut a_buf,
            );
            let row = &mut probs[t * cfg.vocab_size..(t + 1) * cfg.vocab_size];
            matvec(
                &p[lo.head_w..lo.head_w + cfg.vocab_size * d],
                &p[lo.head_b..lo.head_b + cfg.vocab_size],
                &a_buf,
                row,
            );
            softmax_in_place(row);
        }

        Ok(Tape {
            ids: ids.to_vec(),
            emb_mask,
            layers,
            xhat_f,
            inv_std_f,
            probs,
        })
    }

    /// Backpropagates the masked cross-entropy of one tape into `grad`.
    /// `inv_total` is one over the total masked-position count of the
    /// batch, so gradients of a whole batch sum to the global token mean.
    pub(crate) fn backward_into(
        &self,
        tape: &Tape<S>,
        target_mask: &[bool],
        inv_total: f64,
        grad: &mut [S],
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dff = cfg.d_ff;
        let vs = cfg.vocab_size;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let t_len = tape.ids.len();
        let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
        let scale = S::from_f64(inv_total);
        let p = &self.params;
        let lo = &self.layout;

        // d logits: scale * (p - y) at masked positions, zero elsewhere.
        let mut dlogits = vec![S::zero(); t_len * vs];
        for t in 0..t_len {
            if !target_mask[t] {
                continue;
            }
            let label = tape.ids[t + 1] as usize;
            let row = &tape.probs[t * vs..(t + 1) * vs];
            let drow = &mut dlogits[t * vs..(t + 1) * vs];
            for i in 0..vs {
                drow[i] = scale * row[i];
            }
            drow[label] = drow[label] - scale;
        }

        let mut dx = vec![S::zero(); t_len * d];
        let mut y_buf = vec![S::zero(); d];
        for t in 0..t_len {
            if !target_mask[t] {
                continue;
            }
            let drow = &dlogits[t * vs..(t + 1) * vs];
            let xhat = &tape.xhat_f[t * d..(t + 1) * d];
            // Recompute ln_f output for the weight gradient.
            for i in 0..d {
                y_buf[i] = p[lo.ln_f_gain + i] * xhat[i] + p[lo.ln_f_bias + i];
            }
            matvec_grads(grad, lo.head_w, lo.head_b, drow, &y_buf);
            let mut dy = vec![S::zero(); d];
            matvec_t_accum(&p[lo.head_w..lo.head_w + vs * d], drow, &mut dy);
            layer_norm_backward(
                &dy,
                xhat,
                tape.inv_std_f[t],
                &p[lo.ln_f_gain..lo.ln_f_gain + d],
                grad,
                lo.ln_f_gain,
                lo.ln_f_bias,
                &mut dx[t * d..(t + 1) * d],
            );
        }

        for (l, off) in lo.layers.iter().enumerate().rev() {
            let tape_l = &tape.layers[l];
            // Feed-forward branch.
            let mut dx_mid = vec![S::zero(); t_len * d];
            for t in 0..t_len {
                let mut dffn_out = dx[t * d..(t + 1) * d].to_vec();
                if let Some(m) = &tape_l.ffn_mask {
                    for i in 0..d {
                        dffn_out[i] = dffn_out[i] * m[t * d + i];
                    }
                }
                let act = &tape_l.ffn_act[t * dff..(t + 1) * dff];
                matvec_grads(grad, off.w2, off.b2, &dffn_out, act);
                let mut dact = vec![S::zero(); dff];
                matvec_t_accum(&p[off.w2..off.w2 + d * dff], &dffn_out, &mut dact);
                let pre = &tape_l.ffn_pre[t * dff..(t + 1) * dff];
                for i in 0..dff {
                    dact[i] = dact[i] * gelu_prime(pre[i]);
                }
                let xhat2 = &tape_l.xhat2[t * d..(t + 1) * d];
                let mut b_out = vec![S::zero(); d];
                for i in 0..d {
                    b_out[i] = p[off.ln2_gain + i] * xhat2[i] + p[off.ln2_bias + i];
                }
                matvec_grads(grad, off.w1, off.b1, &dact, &b_out);
                let mut db = vec![S::zero(); d];
                matvec_t_accum(&p[off.w1..off.w1 + dff * d], &dact, &mut db);
                layer_norm_backward(
                    &db,
                    xhat2,
                    tape_l.inv_std2[t],
                    &p[off.ln2_gain..off.ln2_gain + d],
                    grad,
                    off.ln2_gain,
                    off.ln2_bias,
                    &mut dx_mid[t * d..(t + 1) * d],
                );
            }
            // Residual: gradient w.r.t. x_mid is the branch input gradient
            // plus the pass-through.
            for i in 0..t_len * d {
                dx_mid[i] += dx[i];
            }

            // Attention branch.
            let mut dq = vec![S::zero(); t_len * d];
            let mut dk = vec![S::zero(); t_len * d];
            let mut dv = vec![S::zero(); t_len * d];
            let mut dctx = vec![S::zero(); t_len * d];
            for t in 0..t_len {
                let mut dattn_out = dx_mid[t * d..(t + 1) * d].to_vec();
                if let Some(m) = &tape_l.attn_mask {
                    for i in 0..d {
                        dattn_out[i] = dattn_out[i] * m[t * d + i];
                    }
                }
                matvec_grads(grad, off.wo, off.bo, &dattn_out, &tape_l.ctx[t * d..(t + 1) * d]);
                matvec_t_accum(
                    &p[off.wo..off.wo + d * d],
                    &dattn_out,
                    &mut dctx[t * d..(t + 1) * d],
                );
            }
            for t in 0..t_len {
                for h in 0..heads {
                    let arow = &tape_l.attn[h * t_len * t_len + t * t_len..][..t + 1];
                    let dctx_h = &dctx[t * d + h * dh..t * d + (h + 1) * dh];
                    let mut da = vec![S::zero(); t + 1];
                    let mut weighted = S::zero();
                    for j in 0..=t {
                        let vj = &tape_l.v[j * d + h * dh..j * d + (h + 1) * dh];
                        da[j] = dot(dctx_h, vj);
                        weighted += arow[j] * da[j];
                        let dvj = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                        for (o, c) in dvj.iter_mut().zip(dctx_h) {
                            *o += arow[j] * *c;
                        }
                    }
                    let hq = &tape_l.q[t * d + h * dh..t * d + (h + 1) * dh];
                    for j in 0..=t {
                        let ds = arow[j] * (da[j] - weighted) * inv_sqrt;
                        let kj = &tape_l.k[j * d + h * dh..j * d + (h + 1) * dh];
                        let dq_h = &mut dq[t * d + h * dh..t * d + (h + 1) * dh];
                        for (o, kv) in dq_h.iter_mut().zip(kj) {
                            *o += ds * *kv;
                        }
                        let dk_h = &mut dk[j * d + h * dh..j * d + (h + 1) * dh];
                        for (o, qv) in dk_h.iter_mut().zip(hq) {
                            *o += ds * *qv;
                        }
                    }
                }
            }
            // Through the q/k/v projections and the first layer norm.
            let mut dx_in = vec![S::zero(); t_len * d];
            let mut a_buf = vec![S::zero(); d];
            for t in 0..t_len {
                let xhat1 = &tape_l.xhat1[t * d..(t + 1) * d];
                for i in 0..d {
                    a_buf[i] = p[off.ln1_gain + i] * xhat1[i] + p[off.ln1_bias + i];
                }
                let mut da = vec![S::zero(); d];
                for (w_off, b_off, g) in [
                    (off.wq, off.bq, &dq),
                    (off.wk, off.bk, &dk),
                    (off.wv, off.bv, &dv),
                ] {
                    let grow = &g[t * d..(t + 1) * d];
                    matvec_grads(grad, w_off, b_off, grow, &a_buf);
                    matvec_t_accum(&p[w_off..w_off + d * d], grow, &mut da);
                }
                layer_norm_backward(
                    &da,
                    xhat1,
                    tape_l.inv_std1[t],
                    &p[off.ln1_gain..off.ln1_gain + d],
                    grad,
                    off.ln1_gain,
                    off.ln1_bias,
                    &mut dx_in[t * d..(t + 1) * d],
                );
            }
            for i in 0..t_len * d {
                dx_in[i] += dx_mid[i];
            }
            dx = dx_in;
        }

        if let Some(mask) = &tape.emb_mask {
            for (g, m) in dx.iter_mut().zip(mask) {
                *g = *g * *m;
            }
        }
        for (t, &id) in tape.ids.iter().enumerate() {
            let dtok = &mut grad[lo.tok_emb + id as usize * d..lo.tok_emb + (id as usize + 1) * d];
            for i in 0..d {
                dtok[i] += dx[t * d + i];
            }
            let dpos = &mut grad[lo.pos_emb + t * d..lo.pos_emb + (t + 1) * d];
            for i in 0..d {
                dpos[i] += dx[t * d + i];
            }
        }
    }

    /// Loss and analytic gradient of the global masked mean over a batch.
    pub fn batch_grad(
        &self,
        batch: &[(Vec<u32>, Vec<bool>)],
        dropout_seed: u64,
    ) -> Result<(f64, Vec<S>)> {
        if batch.is_empty() {
            return Err(CoatError::InvalidArgument("empty batch".to_string()));
        }
        let mut tapes = Vec::with_capacity(batch.len());
        let mut total: usize = 0;
        for (i, (ids, mask)) in batch.iter().enumerate() {
            if mask.len() != ids.len() {
                return Err(CoatError::InvalidArgument(format!(
                    "batch item {i}: mask length mismatch"
                )));
            }
            let n = mask.iter().filter(|&&b| b).count();
            if n == 0 {
                return Err(CoatError::InvalidArgument(format!(
                    "batch item {i}: mask selects no positions"
                )));
            }
            if mask.last() == Some(&true) {
                return Err(CoatError::InvalidArgument(format!(
                    "batch item {i}: last position cannot be masked in"
                )));
            }
            total += n;
            tapes.push(self.forward_tape(ids, crate::seeds::derive_seed(dropout_seed, "drop", i as u64))?);
        }
        let inv_total = 1.0 / total as f64;
        let vs = self.config.vocab_size;
        let mut loss = 0.0f64;
        for (tape, (ids, mask)) in tapes.iter().zip(batch) {
            for (t, &scored) in mask.iter().enumerate() {
                if scored {
                    let p = tape.probs[t * vs + ids[t + 1] as usize].as_f64();
                    loss -= p.max(f64::MIN_POSITIVE).ln();
                }
            }
        }
        loss *= inv_total;
        let mut grad = vec![S::zero(); self.layout.total];
        for (tape, (_, mask)) in tapes.iter().zip(batch) {
            self.backward_into(tape, mask, inv_total, &mut grad);
        }
        Ok((loss, grad))
    }
}
