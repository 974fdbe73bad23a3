//! Word-level tokenizer plus a small pre-LN transformer text encoder.
//!
//! The encoder is the desk-scale stand-in for a production text encoder: a
//! learned token embedding and learned positional embedding feed a stack of
//! pre-layer-norm transformer blocks (multi-head attention with pad masking,
//! quick-GELU feed-forward) and a final layer norm. Weights are `f64` and
//! seeded, so encoding is a pure function of (state, prompt).
//!
//! Two states matter everywhere downstream: the frozen original encoder and
//! a trainable copy initialized from it. Both share this module; freezing
//! just clears `requires_grad` on every parameter.

pub mod checkpoint;
pub mod vocab;

pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

// ───────────────────────────── configuration ───────────────────────────

/// Which vector the distance metrics see for one prompt: the full row-major
/// `L·D` flattening of the token matrix, or the mean over valid token rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Flatten,
    Mean,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Flatten => "flatten",
            Pooling::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token positions per prompt, BOS/EOS included.
    pub max_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            max_len: 16,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            pooling: Pooling::Flatten,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len {} leaves no room for BOS/EOS",
                self.max_len
            )));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Dimensionality of the pooled vector distances operate on.
    pub fn distance_dim(&self) -> usize {
        match self.pooling {
            Pooling::Flatten => self.max_len * self.d_model,
            Pooling::Mean => self.d_model,
        }
    }
}

// ─────────────────────────────── state ─────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// All parameters of one encoder plus its architecture and tokenizer.
/// `frozen` controls whether graph leaves built from this state track
/// gradients; a frozen state is never mutated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub frozen: bool,
}

impl EncoderState {
    /// Zero-valued parameters with the right shapes (checkpoint loading
    /// fills them in).
    pub fn zeros(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::zeros(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::zeros(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::zeros(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::zeros(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::zeros(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::zeros(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w_ff1: Tensor::zeros(&[d, f]),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: Tensor::zeros(&[f, d]),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let mut s = EncoderState {
            tok_emb: Tensor::zeros(&[vocab.len(), d]),
            pos_emb: Tensor::zeros(&[config.max_len, d]),
            layers,
            ln_f_gain: Tensor::zeros(&[d]),
            ln_f_bias: Tensor::zeros(&[d]),
            config,
            vocab,
            frozen: true,
        };
        s.refresh_requires_grad();
        Ok(s)
    }

    /// Fresh encoder: embedding and projection weights ~ Normal(0, 0.02)
    /// from the config seed; layer-norm gains start at 1, all biases at 0.
    pub fn init(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        let mut s = EncoderState::zeros(config, vocab)?;
        let mut rng = rng_for(s.config.seed, "encoder/init");
        let std = 0.02;
        for (name, t) in s.param_list_mut() {
            if name.contains("gain") {
                t.data.fill(1.0);
            } else if name.contains("bias") || name.starts_with('b') || name.contains(".b") {
                // biases stay zero
            } else {
                *t = Tensor::randn(&t.shape, std, &mut rng);
            }
        }
        s.refresh_requires_grad();
        Ok(s)
    }

    fn refresh_requires_grad(&mut self) {
        let rg = !self.frozen;
        for (_, t) in self.param_list_mut() {
            t.requires_grad = rg;
            t.grad = None;
        }
    }

    /// Trainable deep copy (the "initialize the copy from the original"
    /// step): identical parameter values, gradients enabled.
    pub fn trainable_copy(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c.refresh_requires_grad();
        c
    }

    pub fn frozen_copy(&self) -> Self {
        let mut c = self.clone();
        c.frozen = true;
        c.refresh_requires_grad();
        c
    }

    /// Canonical (name, tensor) order — the single source of truth used by
    /// checkpoints, the optimizer, and gradient checks.
    pub fn param_list(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w_ff1", &l.w_ff1),
                ("b_ff1", &l.b_ff1),
                ("w_ff2", &l.w_ff2),
                ("b_ff2", &l.b_ff2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f_gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out
    }

    pub fn param_list_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_gain", &mut l.ln1_gain),
                ("ln1_bias", &mut l.ln1_bias),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_gain", &mut l.ln2_gain),
                ("ln2_bias", &mut l.ln2_bias),
                ("w_ff1", &mut l.w_ff1),
                ("b_ff1", &mut l.b_ff1),
                ("w_ff2", &mut l.w_ff2),
                ("b_ff2", &mut l.b_ff2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f_gain".to_string(), &mut self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &mut self.ln_f_bias));
        out
    }

    /// All parameter values flattened in canonical order (finite-difference
    /// checks perturb this vector).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.param_list() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite parameters from a flat vector in canonical order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.param_list().iter().map(|(_, t)| t.numel()).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "flat parameter vector: got {}, state holds {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in self.param_list_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical parameter byte stream; cheap identity
    /// check for "was this state mutated".
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.param_list() {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ─────────────────────────── embedding output ──────────────────────────

/// Encoder output for one prompt: `rows × cols` token matrix (`rows ==
/// max_len`, pad rows included) plus the count of non-pad positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub valid_len: usize,
}

impl EmbeddingSeq {
    /// Row-major flat view of the full matrix (length `rows · cols`).
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The vector distances operate on, per pooling mode.
    pub fn pooled(&self, pooling: Pooling) -> Vec<f64> {
        match pooling {
            Pooling::Flatten => self.data.clone(),
            Pooling::Mean => {
                let mut out = vec![0.0; self.cols];
                for r in 0..self.valid_len {
                    for (o, &x) in out.iter_mut().zip(self.row(r)) {
                        *o += x;
                    }
                }
                let inv = 1.0 / self.valid_len as f64;
                for o in out.iter_mut() {
                    *o *= inv;
                }
                out
            }
        }
    }
}

// ─────────────────────────── forward (graph) ───────────────────────────

pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

/// Graph handles for every encoder parameter, in canonical order.
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f_gain: Var,
    pub ln_f_bias: Var,
}

impl ParamVars {
    /// Handles in the same order as [`EncoderState::param_list`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gain, l.ln2_bias, l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2,
            ]);
        }
        out.extend([self.ln_f_gain, self.ln_f_bias]);
        out
    }
}

/// Insert every parameter of `state` as a graph leaf (gradient-tracking
/// follows `state.frozen`).
pub fn leaves(g: &mut Graph, state: &EncoderState) -> Result<ParamVars> {
    let mut layers = Vec::with_capacity(state.layers.len());
    let tok_emb = g.leaf(&state.tok_emb)?;
    let pos_emb = g.leaf(&state.pos_emb)?;
    for l in &state.layers {
        layers.push(LayerVars {
            ln1_gain: g.leaf(&l.ln1_gain)?,
            ln1_bias: g.leaf(&l.ln1_bias)?,
            wq: g.leaf(&l.wq)?,
            bq: g.leaf(&l.bq)?,
            wk: g.leaf(&l.wk)?,
            bk: g.leaf(&l.bk)?,
            wv: g.leaf(&l.wv)?,
            bv: g.leaf(&l.bv)?,
            wo: g.leaf(&l.wo)?,
            bo: g.leaf(&l.bo)?,
            ln2_gain: g.leaf(&l.ln2_gain)?,
            ln2_bias: g.leaf(&l.ln2_bias)?,
            w_ff1: g.leaf(&l.w_ff1)?,
            b_ff1: g.leaf(&l.b_ff1)?,
            w_ff2: g.leaf(&l.w_ff2)?,
            b_ff2: g.leaf(&l.b_ff2)?,
        });
    }
    let ln_f_gain = g.leaf(&state.ln_f_gain)?;
    let ln_f_bias = g.leaf(&state.ln_f_bias)?;
    Ok(ParamVars {
        tok_emb,
        pos_emb,
        layers,
        ln_f_gain,
        ln_f_bias,
    })
}

/// Forward pass over a batch of `valid.len()` sequences, each `max_len` ids.
/// Ids at positions ≥ valid\[b\] are forced to PAD before embedding, and
/// attention masks those positions out, so outputs never depend on what a
/// caller left in the pad region. Returns the `[B·L × D]` token matrix.
pub fn encode_batch_graph(
    g: &mut Graph,
    pv: &ParamVars,
    config: &EncoderConfig,
    ids: &[u32],
    valid: &[usize],
) -> Result<Var> {
    let l = config.max_len;
    let b = valid.len();
    if ids.len() != b * l {
        return Err(Error::Shape(format!(
            "encode: {} ids for {b} sequences of {l}",
            ids.len()
        )));
    }
    if let Some(&bad) = valid.iter().find(|&&v| v == 0 || v > l) {
        return Err(Error::Input(format!(
            "encode: valid_len {bad} outside 1..={l}"
        )));
    }
    let mut clamped = ids.to_vec();
    for (bi, &m) in valid.iter().enumerate() {
        for p in m..l {
            clamped[bi * l + p] = PAD;
        }
    }
    let tok = g.gather_rows(pv.tok_emb, &clamped)?;
    let pos = g.tile_rows(pv.pos_emb, b);
    let mut x = g.add(tok, pos)?;
    for lv in &pv.layers {
        let h = g.layer_norm(x, lv.ln1_gain, lv.ln1_bias)?;
        let q0 = g.matmul(h, lv.wq)?;
        let q = g.add_row(q0, lv.bq)?;
        let k0 = g.matmul(h, lv.wk)?;
        let k = g.add_row(k0, lv.bk)?;
        let v0 = g.matmul(h, lv.wv)?;
        let v = g.add_row(v0, lv.bv)?;
        let att = g.attention(q, k, v, config.heads, l, valid)?;
        let o0 = g.matmul(att, lv.wo)?;
        let o = g.add_row(o0, lv.bo)?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, lv.ln2_gain, lv.ln2_bias)?;
        let f0 = g.matmul(h2, lv.w_ff1)?;
        let f1 = g.add_row(f0, lv.b_ff1)?;
        let f2 = g.quick_gelu(f1);
        let f3 = g.matmul(f2, lv.w_ff2)?;
        let f = g.add_row(f3, lv.b_ff2)?;
        x = g.add(x, f)?;
    }
    g.layer_norm(x, pv.ln_f_gain, pv.ln_f_bias)
}

/// Pooled distance-space vector for sequence `seq_idx` of a batch output.
/// Flatten mode slices the full `L×D` block (treated as one flat vector by
/// the loss); mean mode averages the valid rows.
pub fn pooled_var(
    g: &mut Graph,
    batch_out: Var,
    config: &EncoderConfig,
    seq_idx: usize,
    valid_len: usize,
) -> Result<Var> {
    let l = config.max_len;
    match config.pooling {
        Pooling::Flatten => g.slice_rows(batch_out, seq_idx * l, l),
        Pooling::Mean => {
            let rows = g.slice_rows(batch_out, seq_idx * l, valid_len)?;
            Ok(g.mean_rows(rows))
        }
    }
}

// ───────────────────────── forward (convenience) ───────────────────────

/// Encode pre-tokenized ids (`ids.len() == max_len`).
pub fn encode_ids(state: &EncoderState, ids: &[u32], valid_len: usize) -> Result<EmbeddingSeq> {
    let mut g = Graph::new();
    let pv = leaves(&mut g, state)?;
    let out = encode_batch_graph(&mut g, &pv, &state.config, ids, &[valid_len])?;
    g.check_finite(out, "encoder output")?;
    Ok(EmbeddingSeq {
        rows: state.config.max_len,
        cols: state.config.d_model,
        data: g.value(out).to_vec(),
        valid_len,
    })
}

/// Encode one prompt string (tokenize + forward).
pub fn encode(state: &EncoderState, prompt: &str) -> Result<EmbeddingSeq> {
    let (ids, valid) = state.vocab.encode_prompt(prompt, state.config.max_len);
    encode_ids(state, &ids, valid)
}

/// Pooled vectors for many prompts, batched through shared graphs. Results
/// are in input order and identical to calling [`encode`] one by one.
pub fn encode_pooled_batch<S: AsRef<str>>(
    state: &EncoderState,
    prompts: &[S],
) -> Result<Vec<Vec<f64>>> {
    let l = state.config.max_len;
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(64) {
        let mut ids = Vec::with_capacity(chunk.len() * l);
        let mut valid = Vec::with_capacity(chunk.len());
        for p in chunk {
            let (pi, pv) = state.vocab.encode_prompt(p.as_ref(), l);
            ids.extend_from_slice(&pi);
            valid.push(pv);
        }
        let mut g = Graph::new();
        let pv = leaves(&mut g, state)?;
        let batch = encode_batch_graph(&mut g, &pv, &state.config, &ids, &valid)?;
        g.check_finite(batch, "encoder output")?;
        for (i, &v) in valid.iter().enumerate() {
            let pooled = pooled_var(&mut g, batch, &state.config, i, v)?;
            out.push(g.value(pooled).to_vec());
        }
    }
    Ok(out)
}

// ──────────────────────────────── tests ────────────────────────────────
