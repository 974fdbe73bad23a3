//! Alignment training: the two-term objective, the Adam loop that
//! fine-tunes a trainable encoder copy against its frozen original, and
//! grid sweeps over λ and the optimizer hyperparameters.
//!
//! The objective over a paired batch (S safe prompts, U unsafe prompts) is
//!
//! ```text
//! (1/|S|) Σ d_u(τ_s(P_s), τ(P_s))  −  (λ/|U|) Σ d_e(τ_s(P_un), τ(P_un))
//! ```
//!
//! minimized w.r.t. the trainable copy τ_s only; the reference embeddings
//! from the frozen τ enter the graph as constants. Minimizing the first
//! term keeps safe-prompt embeddings in place; the subtracted second term
//! *maximizes* the divergence distance on unsafe prompts, with λ trading
//! utility against effectiveness.

use crate::encoder::{
    encode_pooled_batch, leaves, pooled_var, EncoderConfig, EncoderState, ParamVars, Pooling,
};
use crate::error::{Error, Result};
use crate::metrics::{self, DistanceMetric, DriftStats};
use crate::seeding::rng_for;
use crate::tensor::{Graph, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

// ───────────────────────────── configuration ───────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Trade-off weight on the unsafe-divergence term.
    pub lambda: f64,
    /// Utility distance (safe prompts; minimized).
    pub d_u: DistanceMetric,
    /// Effectiveness distance (unsafe prompts; maximized via the −λ term).
    pub d_e: DistanceMetric,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Overrides the encoder's pooling mode when set.
    pub pooling: Option<Pooling>,
    /// Fraction of each dataset held out for end-of-epoch evaluation.
    pub holdout_frac: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            lambda: 0.2,
            d_u: DistanceMetric::Euclidean,
            d_e: DistanceMetric::NegCosine,
            epochs: 5,
            batch: 32,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            pooling: None,
            holdout_frac: 0.1,
        }
    }
}

impl AlignmentConfig {
    /// `epochs = 0` and `lr = 0` are deliberately legal: both are exercised
    /// as no-op baselines (zero step size must reproduce the original
    /// parameters bit for bit).
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".to_string()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config(format!(
                "holdout_frac must be in [0, 1), got {}",
                self.holdout_frac
            )));
        }
        Ok(())
    }
}

// ─────────────────────────────── history ───────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_u: f64,
    pub l_e: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

/// Full-objective evaluation on the held-out prompts after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub l_u: f64,
    pub l_e: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_holdout: Vec<EpochEval>,
    pub final_l_u: f64,
    pub final_l_e: f64,
    pub final_objective: f64,
    pub final_safe_drift: DriftStats,
    pub final_unsafe_divergence: DriftStats,
    pub n_holdout_safe: usize,
    pub n_holdout_unsafe: usize,
}

// ──────────────────────── objective construction ───────────────────────

/// Handles to the objective and its two components on a live graph.
pub struct BatchVars {
    pub objective: Var,
    pub l_u: Var,
    pub l_e: Var,
}

fn graph_ref(g: &mut Graph, like: Var, data: &[f64]) -> Result<Var> {
    let (r, c) = g.shape(like);
    if r * c != data.len() {
        return Err(Error::Shape(format!(
            "reference embedding has {} values, encoder produces {}",
            data.len(),
            r * c
        )));
    }
    g.constant(r, c, data)
}

fn graph_euclidean(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq);
    Ok(g.sqrt(s))
}

fn graph_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let prod = g.mul(a, b)?;
    let dotv = g.sum_all(prod);
    let aa = g.mul(a, a)?;
    let na = {
        let s = g.sum_all(aa);
        g.sqrt(s)
    };
    let bb = g.mul(b, b)?;
    let nb = {
        let s = g.sum_all(bb);
        g.sqrt(s)
    };
    if g.value(na)[0] == 0.0 || g.value(nb)[0] == 0.0 {
        return Err(Error::Degenerate(
            "cosine distance over a zero-norm embedding".to_string(),
        ));
    }
    let denom = g.mul(na, nb)?;
    g.div(dotv, denom)
}

/// One embedding-pair distance on the graph, matching
/// [`metrics::distance`] operation for operation (the evaluation side and
/// the training side must agree bitwise on identical inputs).
pub fn graph_distance(g: &mut Graph, metric: DistanceMetric, a: Var, b: Var) -> Result<Var> {
    match metric {
        DistanceMetric::Euclidean => graph_euclidean(g, a, b),
        DistanceMetric::Cosine => graph_cosine(g, a, b),
        DistanceMetric::NegCosine => {
            let c = graph_cosine(g, a, b)?;
            let ab = g.abs(c);
            Ok(g.scale(ab, -1.0))
        }
        DistanceMetric::NegativeCosine => {
            let c = graph_cosine(g, a, b)?;
            Ok(g.scale(c, -1.0))
        }
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Build the paired-batch objective on an existing graph whose parameter
/// leaves `pv` came from the trainable encoder. `safe_refs`/`unsafe_refs`
/// are the frozen encoder's pooled embeddings for the same prompts, in
/// batch order. Safe and unsafe sequences run through one shared forward
/// pass; each pooled output is compared against its reference constant.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss(
    g: &mut Graph,
    pv: &ParamVars,
    config: &EncoderConfig,
    ids: &[u32],
    valid: &[usize],
    n_safe: usize,
    safe_refs: &[&[f64]],
    unsafe_refs: &[&[f64]],
    cfg: &AlignmentConfig,
) -> Result<BatchVars> {
    if n_safe == 0 || valid.len() <= n_safe {
        return Err(Error::Input(
            "objective needs non-empty safe and unsafe batches".to_string(),
        ));
    }
    if safe_refs.len() != n_safe || unsafe_refs.len() != valid.len() - n_safe {
        return Err(Error::Shape(format!(
            "reference counts {}+{} do not match batch {}+{}",
            safe_refs.len(),
            unsafe_refs.len(),
            n_safe,
            valid.len() - n_safe
        )));
    }
    let batch_out = crate::encoder::encode_batch_graph(g, pv, config, ids, valid)?;
    let mut safe_terms = Vec::with_capacity(n_safe);
    for (i, r) in safe_refs.iter().enumerate() {
        let a = pooled_var(g, batch_out, config, i, valid[i])?;
        let b = graph_ref(g, a, r)?;
        safe_terms.push(graph_distance(g, cfg.d_u, a, b)?);
    }
    let mut unsafe_terms = Vec::with_capacity(unsafe_refs.len());
    for (j, r) in unsafe_refs.iter().enumerate() {
        let i = n_safe + j;
        let a = pooled_var(g, batch_out, config, i, valid[i])?;
        let b = graph_ref(g, a, r)?;
        unsafe_terms.push(graph_distance(g, cfg.d_e, a, b)?);
    }
    let l_u = mean_of(g, &safe_terms)?;
    let l_e = mean_of(g, &unsafe_terms)?;
    let scaled = g.scale(l_e, cfg.lambda);
    let objective = g.sub(l_u, scaled)?;
    Ok(BatchVars {
        objective,
        l_u,
        l_e,
    })
}

fn with_pooling(state: &EncoderState, pooling: Option<Pooling>) -> EncoderState {
    let mut s = state.clone();
    if let Some(p) = pooling {
        s.config.pooling = p;
    }
    s
}

fn tokenize_all(state: &EncoderState, prompts: &[String]) -> (Vec<Vec<u32>>, Vec<usize>) {
    let l = state.config.max_len;
    let mut ids = Vec::with_capacity(prompts.len());
    let mut valid = Vec::with_capacity(prompts.len());
    for p in prompts {
        let (pi, pv) = state.vocab.encode_prompt(p, l);
        ids.push(pi);
        valid.push(pv);
    }
    (ids, valid)
}

/// Objective value for one paired batch of prompt strings, together with
/// its (L_u, L_e) components. Convenience wrapper over [`build_batch_loss`]
/// for callers that only need values, not gradients.
pub fn batch_loss(
    tau_s: &EncoderState,
    tau: &EncoderState,
    safe_batch: &[String],
    unsafe_batch: &[String],
    cfg: &AlignmentConfig,
) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    if safe_batch.is_empty() || unsafe_batch.is_empty() {
        return Err(Error::Input(
            "objective needs non-empty safe and unsafe batches".to_string(),
        ));
    }
    let tau_s = with_pooling(tau_s, cfg.pooling);
    let tau = with_pooling(tau, cfg.pooling);
    let safe_refs = encode_pooled_batch(&tau, safe_batch)?;
    let unsafe_refs = encode_pooled_batch(&tau, unsafe_batch)?;
    let l = tau_s.config.max_len;
    let mut ids = Vec::with_capacity((safe_batch.len() + unsafe_batch.len()) * l);
    let mut valid = Vec::new();
    for p in safe_batch.iter().chain(unsafe_batch) {
        let (pi, pv) = tau_s.vocab.encode_prompt(p, l);
        ids.extend_from_slice(&pi);
        valid.push(pv);
    }
    let mut g = Graph::new();
    let pv = leaves(&mut g, &tau_s)?;
    let vars = build_batch_loss(
        &mut g,
        &pv,
        &tau_s.config,
        &ids,
        &valid,
        safe_batch.len(),
        &safe_refs.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
        &unsafe_refs.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
        cfg,
    )?;
    g.check_finite(vars.objective, "batch objective")?;
    Ok((
        g.value(vars.objective)[0],
        g.value(vars.l_u)[0],
        g.value(vars.l_e)[0],
    ))
}

// ───────────────────────────────── Adam ────────────────────────────────

/// Textbook Adam with bias correction, moments starting at zero.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(dim: usize, cfg: &AlignmentConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let gi = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ─────────────────────────────── training ──────────────────────────────

/// Index stream over one dataset: a seeded shuffle, reshuffled and cycled
/// whenever the epoch needs more draws than the dataset holds.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Full-set objective components under the current trainable parameters,
/// computed numerically (no gradients) against precomputed references.
struct ObjectiveEval {
    l_u: f64,
    l_e: f64,
    embs_safe: Vec<Vec<f64>>,
    embs_unsafe: Vec<Vec<f64>>,
}

fn eval_objective(
    state: &EncoderState,
    prompts_safe: &[String],
    refs_safe: &[Vec<f64>],
    prompts_unsafe: &[String],
    refs_unsafe: &[Vec<f64>],
    cfg: &AlignmentConfig,
) -> Result<ObjectiveEval> {
    let embs_safe = encode_pooled_batch(state, prompts_safe)?;
    let embs_unsafe = encode_pooled_batch(state, prompts_unsafe)?;
    let mut l_u = 0.0;
    for (a, b) in embs_safe.iter().zip(refs_safe) {
        l_u += metrics::distance(cfg.d_u, a, b)?;
    }
    l_u /= embs_safe.len() as f64;
    let mut l_e = 0.0;
    for (a, b) in embs_unsafe.iter().zip(refs_unsafe) {
        l_e += metrics::distance(cfg.d_e, a, b)?;
    }
    l_e /= embs_unsafe.len() as f64;
    Ok(ObjectiveEval {
        l_u,
        l_e,
        embs_safe,
        embs_unsafe,
    })
}

/// Split prompt indices into (train, held-out) with a seeded shuffle. At
/// least one prompt always stays on the training side; a zero fraction
/// holds out nothing.
fn holdout_split(n: usize, frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_hold = ((n as f64 * frac).round() as usize).min(n - 1);
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

/// Fine-tune a trainable copy of `tau` on the paired datasets. Returns the
/// aligned encoder (frozen, ready for evaluation) and the step-by-step
/// history. Deterministic for a fixed config; the reference encoder is
/// never modified.
pub fn train(
    tau: &EncoderState,
    safe: &[String],
    unsafe_prompts: &[String],
    cfg: &AlignmentConfig,
) -> Result<(EncoderState, TrainHistory)> {
    cfg.validate()?;
    if safe.is_empty() || unsafe_prompts.is_empty() {
        return Err(Error::Input(
            "training needs non-empty safe and unsafe datasets".to_string(),
        ));
    }

    let tau_eff = with_pooling(tau, cfg.pooling);
    let mut tau_s = with_pooling(tau, cfg.pooling).trainable_copy();

    // Held-out split per dataset, then one reference embedding per prompt
    // from the frozen encoder, computed once.
    let mut hold_rng = rng_for(cfg.seed, "align/holdout");
    let (tr_s_idx, ho_s_idx) = holdout_split(safe.len(), cfg.holdout_frac, &mut hold_rng);
    let (tr_u_idx, ho_u_idx) = holdout_split(unsafe_prompts.len(), cfg.holdout_frac, &mut hold_rng);
    let pick = |src: &[String], idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&i| src[i].clone()).collect()
    };
    let train_safe = pick(safe, &tr_s_idx);
    let train_unsafe = pick(unsafe_prompts, &tr_u_idx);
    // Empty held-out side (tiny datasets or frac 0): evaluate on the
    // training prompts instead so the history always has final statistics.
    let hold_safe = if ho_s_idx.is_empty() {
        train_safe.clone()
    } else {
        pick(safe, &ho_s_idx)
    };
    let hold_unsafe = if ho_u_idx.is_empty() {
        train_unsafe.clone()
    } else {
        pick(unsafe_prompts, &ho_u_idx)
    };

    let refs_train_safe = encode_pooled_batch(&tau_eff, &train_safe)?;
    let refs_train_unsafe = encode_pooled_batch(&tau_eff, &train_unsafe)?;
    let refs_hold_safe = encode_pooled_batch(&tau_eff, &hold_safe)?;
    let refs_hold_unsafe = encode_pooled_batch(&tau_eff, &hold_unsafe)?;

    let (ids_safe, valid_safe) = tokenize_all(&tau_s, &train_safe);
    let (ids_unsafe, valid_unsafe) = tokenize_all(&tau_s, &train_unsafe);

    let m = cfg.batch;
    let l = tau_s.config.max_len;
    let epoch_len = train_safe.len().max(train_unsafe.len()).div_ceil(m);

    let mut flat = tau_s.flat_params();
    let mut adam = Adam::new(flat.len(), cfg);
    let mut steps = Vec::new();
    let mut epoch_holdout = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng_for(cfg.seed, &format!("align/epoch/{epoch}"));
        let mut cyc_s = Cycler::new(train_safe.len(), &mut epoch_rng);
        let mut cyc_u = Cycler::new(train_unsafe.len(), &mut epoch_rng);
        for step in 0..epoch_len {
            let bs = cyc_s.take(m, &mut epoch_rng);
            let bu = cyc_u.take(m, &mut epoch_rng);
            let mut ids = Vec::with_capacity(2 * m * l);
            let mut valid = Vec::with_capacity(2 * m);
            let mut safe_refs: Vec<&[f64]> = Vec::with_capacity(m);
            let mut unsafe_refs: Vec<&[f64]> = Vec::with_capacity(m);
            for &i in &bs {
                ids.extend_from_slice(&ids_safe[i]);
                valid.push(valid_safe[i]);
                safe_refs.push(&refs_train_safe[i]);
            }
            for &i in &bu {
                ids.extend_from_slice(&ids_unsafe[i]);
                valid.push(valid_unsafe[i]);
                unsafe_refs.push(&refs_train_unsafe[i]);
            }

            let mut g = Graph::new();
            let pv = leaves(&mut g, &tau_s)?;
            let vars = build_batch_loss(
                &mut g,
                &pv,
                &tau_s.config,
                &ids,
                &valid,
                m,
                &safe_refs,
                &unsafe_refs,
                cfg,
            )?;
            g.check_finite(vars.objective, &format!("objective at epoch {epoch} step {step}"))?;
            g.backward(vars.objective)?;

            let handles = pv.ordered();
            let mut grads = Vec::with_capacity(flat.len());
            for h in &handles {
                match g.grad(*h) {
                    Some(gv) => grads.extend_from_slice(gv),
                    None => {
                        let (r, c) = g.shape(*h);
                        grads.extend(std::iter::repeat_n(0.0, r * c));
                    }
                }
            }
            debug_assert_eq!(grads.len(), flat.len());
            let grad_norm = grads.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch} step {step}"
                )));
            }
            adam.step(&mut flat, &grads);
            tau_s.set_flat_params(&flat)?;

            steps.push(StepRecord {
                epoch,
                step,
                l_u: g.value(vars.l_u)[0],
                l_e: g.value(vars.l_e)[0],
                objective: g.value(vars.objective)[0],
                grad_norm,
            });
        }

        let held = eval_objective(
            &tau_s,
            &hold_safe,
            &refs_hold_safe,
            &hold_unsafe,
            &refs_hold_unsafe,
            cfg,
        )?;
        epoch_holdout.push(EpochEval {
            epoch,
            l_u: held.l_u,
            l_e: held.l_e,
            objective: held.l_u - cfg.lambda * held.l_e,
        });
    }

    let last = eval_objective(
        &tau_s,
        &hold_safe,
        &refs_hold_safe,
        &hold_unsafe,
        &refs_hold_unsafe,
        cfg,
    )?;
    let history = TrainHistory {
        steps,
        epoch_holdout,
        final_l_u: last.l_u,
        final_l_e: last.l_e,
        final_objective: last.l_u - cfg.lambda * last.l_e,
        final_safe_drift: metrics::drift_stats(&refs_hold_safe, &last.embs_safe)?,
        final_unsafe_divergence: metrics::drift_stats(&refs_hold_unsafe, &last.embs_unsafe)?,
        n_holdout_safe: hold_safe.len(),
        n_holdout_unsafe: hold_unsafe.len(),
    };
    // The pooling override only chooses which vector the objective sees;
    // the returned encoder keeps the input encoder's own pooling so it
    // stays directly comparable with it downstream.
    let mut aligned = tau_s.frozen_copy();
    aligned.config.pooling = tau.config.pooling;
    Ok((aligned, history))
}

// ─────────────────────────────── sweeps ────────────────────────────────

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    Epochs,
    Lr,
    Batch,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Epochs => "epochs",
            SweepAxis::Lr => "lr",
            SweepAxis::Batch => "batch",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "epochs" => Ok(SweepAxis::Epochs),
            "lr" => Ok(SweepAxis::Lr),
            "batch" => Ok(SweepAxis::Batch),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// One grid cell: either held-out statistics from a finished run, or the
/// error that stopped it (the sweep itself continues past failed cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub combo: String,
    pub unsafe_mean_abs_cos: Option<f64>,
    pub unsafe_mean_euclid: Option<f64>,
    pub safe_mean_euclid: Option<f64>,
    pub final_objective: Option<f64>,
    pub error: Option<String>,
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub base: AlignmentConfig,
    pub cells: Vec<SweepCell>,
}

fn combo_name(d_u: DistanceMetric, d_e: DistanceMetric) -> String {
    format!("{d_u}-{d_e}")
}

fn run_cell(
    tau: &EncoderState,
    safe: &[String],
    unsafe_prompts: &[String],
    cfg: &AlignmentConfig,
    axis_value: f64,
) -> SweepCell {
    let combo = combo_name(cfg.d_u, cfg.d_e);
    match train(tau, safe, unsafe_prompts, cfg) {
        Ok((_, history)) => SweepCell {
            value: axis_value,
            combo,
            unsafe_mean_abs_cos: Some(history.final_unsafe_divergence.mean_abs_cos),
            unsafe_mean_euclid: Some(history.final_unsafe_divergence.mean_euclid),
            safe_mean_euclid: Some(history.final_safe_drift.mean_euclid),
            final_objective: Some(history.final_objective),
            error: None,
            history: Some(history),
        },
        Err(e) => SweepCell {
            value: axis_value,
            combo,
            unsafe_mean_abs_cos: None,
            unsafe_mean_euclid: None,
            safe_mean_euclid: None,
            final_objective: None,
            error: Some(e.to_string()),
            history: None,
        },
    }
}

/// Run independent cells (one `train` each) across `threads` workers,
/// results placed by grid position regardless of completion order.
fn run_cells(
    tau: &EncoderState,
    safe: &[String],
    unsafe_prompts: &[String],
    jobs: Vec<(AlignmentConfig, f64)>,
    threads: usize,
) -> Vec<SweepCell> {
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs
            .into_iter()
            .map(|(cfg, v)| run_cell(tau, safe, unsafe_prompts, &cfg, v))
            .collect();
    }
    let slots: Vec<Mutex<Option<SweepCell>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (cfg, v) = &jobs[i];
                let cell = run_cell(tau, safe, unsafe_prompts, cfg, *v);
                *slots[i].lock().expect("sweep slot poisoned") = Some(cell);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("sweep slot poisoned").expect("all jobs ran"))
        .collect()
}

/// λ grid × metric combos, one full training run per cell with the base
/// seed. Combos are (d_u, d_e) pairs drawn from {Euclidean, NegCosine}.
pub fn lambda_sweep(
    tau: &EncoderState,
    safe: &[String],
    unsafe_prompts: &[String],
    base: &AlignmentConfig,
    lambda_grid: &[f64],
    combos: &[(DistanceMetric, DistanceMetric)],
    threads: usize,
) -> Result<SweepReport> {
    base.validate()?;
    if lambda_grid.is_empty() || combos.is_empty() {
        return Err(Error::Input("empty sweep grid".to_string()));
    }
    let allowed = [DistanceMetric::Euclidean, DistanceMetric::NegCosine];
    for (d_u, d_e) in combos {
        if !allowed.contains(d_u) || !allowed.contains(d_e) {
            return Err(Error::Input(format!(
                "sweep combos are limited to Euclidean/NegCosine pairs, got {}",
                combo_name(*d_u, *d_e)
            )));
        }
    }
    for &l in lambda_grid {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::Input(format!("lambda grid value {l} invalid")));
        }
    }
    let mut jobs = Vec::with_capacity(lambda_grid.len() * combos.len());
    for &lambda in lambda_grid {
        for &(d_u, d_e) in combos {
            let cfg = AlignmentConfig {
                lambda,
                d_u,
                d_e,
                ..base.clone()
            };
            jobs.push((cfg, lambda));
        }
    }
    Ok(SweepReport {
        axis: SweepAxis::Lambda,
        base: base.clone(),
        cells: run_cells(tau, safe, unsafe_prompts, jobs, threads),
    })
}

/// One-axis hyperparameter sweep (epochs, learning rate, or batch size),
/// all other settings fixed at the base config.
pub fn hyper_sweep(
    tau: &EncoderState,
    safe: &[String],
    unsafe_prompts: &[String],
    base: &AlignmentConfig,
    axis: SweepAxis,
    grid: &[f64],
    threads: usize,
) -> Result<SweepReport> {
    base.validate()?;
    if grid.is_empty() {
        return Err(Error::Input("empty sweep grid".to_string()));
    }
    let mut jobs = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Lambda => {
                return Err(Error::Input(
                    "lambda axis goes through lambda_sweep (metric combos)".to_string(),
                ))
            }
            SweepAxis::Epochs => {
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(Error::Input(format!("epochs grid value {v} invalid")));
                }
                cfg.epochs = v as usize;
            }
            SweepAxis::Lr => {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Input(format!("lr grid value {v} invalid")));
                }
                cfg.lr = v;
            }
            SweepAxis::Batch => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::Input(format!("batch grid value {v} invalid")));
                }
                cfg.batch = v as usize;
            }
        }
        jobs.push((cfg, v));
    }
    Ok(SweepReport {
        axis,
        base: base.clone(),
        cells: run_cells(tau, safe, unsafe_prompts, jobs, threads),
    })
}

// ───────────────────────────── report output ───────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    // Shortest round-trip float formatting; empty cell for failed runs.
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per cell: axis, value, combo, held-out statistics, error.
/// Failed cells keep their row with empty numeric columns.
pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record([
        "axis",
        "value",
        "combo",
        "unsafe_mean_abs_cos",
        "unsafe_mean_euclid",
        "safe_mean_euclid",
        "final_objective",
        "error",
    ])
    .map_err(io_err)?;
    for c in &report.cells {
        w.write_record([
            report.axis.to_string(),
            c.value.to_string(),
            c.combo.clone(),
            fmt_opt(c.unsafe_mean_abs_cos),
            fmt_opt(c.unsafe_mean_euclid),
            fmt_opt(c.safe_mean_euclid),
            fmt_opt(c.final_objective),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The same report with full per-cell training histories, as JSON.
pub fn write_sweep_json(report: &SweepReport, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

// ──────────────────────────────── tests ────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocab};

    fn corpus() -> (Vec<String>, Vec<String>) {
        let safe: Vec<String> = [
            "a quiet watercolor of a fox",
            "misty harbor at dawn",
            "still life with a violin",
            "golden meadow sketch",
            "an ancient bridge in fog",
            "sunlit orchard painting",
            "a serene river at dusk",
            "charcoal study of a heron",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let unsafe_prompts: Vec<String> = [
            "explicit nude figure study",
            "lewd erotic pose photograph",
            "an obscene seductive scene",
            "racy indecent silhouette",
            "a lurid sensual portrait",
            "provocative exposed model",
            "salacious bare figure",
            "an immodest suggestive dancer",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        (safe, unsafe_prompts)
    }

    fn tiny_encoder(seed: u64) -> EncoderState {
        let (safe, unsafe_prompts) = corpus();
        let all: Vec<&str> = safe
            .iter()
            .chain(unsafe_prompts.iter())
            .map(|s| s.as_str())
            .collect();
        let vocab = Vocab::build(&all, 128).unwrap();
        let config = EncoderConfig {
            max_len: 8,
            d_model: 8,
            layers: 2,
            heads: 2,
            d_ff: 16,
            pooling: Pooling::Flatten,
            seed,
        };
        EncoderState::init(config, vocab).unwrap()
    }

    fn quick_cfg() -> AlignmentConfig {
        AlignmentConfig {
            epochs: 2,
            batch: 4,
            lr: 1e-3,
            holdout_frac: 0.25,
            ..AlignmentConfig::default()
        }
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = AlignmentConfig::default();
        assert_eq!(c.lambda, 0.2);
        assert_eq!(c.d_u, DistanceMetric::Euclidean);
        assert_eq!(c.d_e, DistanceMetric::NegCosine);
        assert_eq!(c.epochs, 5);
        assert_eq!(c.batch, 32);
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.999);
        assert_eq!(c.eps, 1e-8);
    }

    #[test]
    fn objective_at_identical_encoders_equals_lambda() {
        let tau = tiny_encoder(3).frozen_copy();
        let tau_s = tau.trainable_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig::default();
        let (obj, l_u, l_e) = batch_loss(&tau_s, &tau, &safe, &unsafe_prompts, &cfg).unwrap();
        // L_u is exactly zero (identical embeddings, zero-distance
        // subgradient convention); L_e is −|cos| = −1 up to rounding.
        assert_eq!(l_u, 0.0);
        assert!((l_e + 1.0).abs() < 1e-12, "l_e = {l_e}");
        assert!((obj - cfg.lambda).abs() < 1e-12, "obj = {obj}");
    }

    #[test]
    fn objective_with_euclidean_divergence_is_exactly_zero_at_init() {
        let tau = tiny_encoder(3).frozen_copy();
        let tau_s = tau.trainable_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            d_e: DistanceMetric::Euclidean,
            ..AlignmentConfig::default()
        };
        let (obj, l_u, l_e) = batch_loss(&tau_s, &tau, &safe, &unsafe_prompts, &cfg).unwrap();
        assert_eq!((obj, l_u, l_e), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let tau = tiny_encoder(3).frozen_copy();
        let tau_s = tau.trainable_copy();
        let (safe, _) = corpus();
        let cfg = AlignmentConfig::default();
        assert!(matches!(
            batch_loss(&tau_s, &tau, &safe, &[], &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_parameter_encoder_is_degenerate_under_cosine() {
        let tau = tiny_encoder(3);
        let zeros = EncoderState::zeros(tau.config.clone(), tau.vocab.clone()).unwrap();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig::default();
        assert!(matches!(
            batch_loss(&zeros, &zeros, &safe, &unsafe_prompts, &cfg),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zero_learning_rate_reproduces_parameters_bitwise() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            lr: 0.0,
            ..quick_cfg()
        };
        let (tau_s, history) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        assert_eq!(tau_s.flat_params(), tau.flat_params());
        assert!(!history.steps.is_empty());
        for s in &history.steps {
            assert!((s.objective - cfg.lambda).abs() < 1e-12);
        }
        assert_eq!(history.final_safe_drift.mean_euclid, 0.0);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = quick_cfg();
        let (a, ha) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        let (b, hb) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(ha, hb);
    }

    #[test]
    fn lambda_zero_never_leaves_the_argmin() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            lambda: 0.0,
            ..quick_cfg()
        };
        let (tau_s, history) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        // The zero-distance subgradient convention makes every gradient
        // exactly zero at the argmin, so the optimizer never moves.
        for s in &history.steps {
            assert!(s.l_u <= 1e-9, "l_u grew to {}", s.l_u);
            assert_eq!(s.grad_norm, 0.0);
        }
        assert_eq!(tau_s.flat_params(), tau.flat_params());
    }

    #[test]
    fn recorded_objective_matches_component_recomputation() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            lambda: 0.3,
            ..quick_cfg()
        };
        let (_, history) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        for s in &history.steps {
            assert!((s.objective - (s.l_u - cfg.lambda * s.l_e)).abs() <= 1e-12);
        }
        for e in &history.epoch_holdout {
            assert!((e.objective - (e.l_u - cfg.lambda * e.l_e)).abs() <= 1e-12);
        }
    }

    #[test]
    fn reference_encoder_is_bit_identical_after_training() {
        let tau = tiny_encoder(5).frozen_copy();
        let before = tau.fingerprint();
        let (safe, unsafe_prompts) = corpus();
        let _ = train(&tau, &safe, &unsafe_prompts, &quick_cfg()).unwrap();
        assert_eq!(tau.fingerprint(), before);
    }

    #[test]
    fn zero_epochs_returns_the_initial_state() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            epochs: 0,
            ..quick_cfg()
        };
        let (tau_s, history) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        assert!(history.steps.is_empty());
        assert!(history.epoch_holdout.is_empty());
        assert_eq!(tau_s.flat_params(), tau.flat_params());
        assert_eq!(history.final_safe_drift.mean_euclid, 0.0);
        assert_eq!(history.final_unsafe_divergence.mean_euclid, 0.0);
    }

    #[test]
    fn training_moves_unsafe_embeddings_more_than_safe() {
        let tau = tiny_encoder(9).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            epochs: 3,
            batch: 4,
            lr: 1e-3,
            holdout_frac: 0.25,
            ..AlignmentConfig::default()
        };
        let (_, history) = train(&tau, &safe, &unsafe_prompts, &cfg).unwrap();
        let div = &history.final_unsafe_divergence;
        let drift = &history.final_safe_drift;
        assert!(
            div.mean_euclid > drift.mean_euclid,
            "unsafe moved {} vs safe {}",
            div.mean_euclid,
            drift.mean_euclid
        );
        assert!(div.mean_abs_cos < 1.0);
    }

    #[test]
    fn lambda_sweep_zero_row_has_zero_drift() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let report = lambda_sweep(
            &tau,
            &safe,
            &unsafe_prompts,
            &quick_cfg(),
            &[0.0],
            &[(DistanceMetric::Euclidean, DistanceMetric::NegCosine)],
            1,
        )
        .unwrap();
        assert_eq!(report.cells.len(), 1);
        let cell = &report.cells[0];
        assert_eq!(cell.error, None);
        assert_eq!(cell.safe_mean_euclid, Some(0.0));
        assert_eq!(cell.combo, "Euclidean-NegCosine");
    }

    #[test]
    fn sweep_rejects_unsupported_combos() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let err = lambda_sweep(
            &tau,
            &safe,
            &unsafe_prompts,
            &quick_cfg(),
            &[0.1],
            &[(DistanceMetric::Cosine, DistanceMetric::NegCosine)],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn hyper_sweep_epochs_zero_has_zero_drift_everywhere() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let report = hyper_sweep(
            &tau,
            &safe,
            &unsafe_prompts,
            &quick_cfg(),
            SweepAxis::Epochs,
            &[0.0],
            1,
        )
        .unwrap();
        assert_eq!(report.cells[0].safe_mean_euclid, Some(0.0));
        assert_eq!(report.cells[0].unsafe_mean_euclid, Some(0.0));
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            epochs: 1,
            ..quick_cfg()
        };
        let combos = [(DistanceMetric::Euclidean, DistanceMetric::NegCosine)];
        let seq =
            lambda_sweep(&tau, &safe, &unsafe_prompts, &cfg, &[0.1, 0.3], &combos, 1).unwrap();
        let par =
            lambda_sweep(&tau, &safe, &unsafe_prompts, &cfg, &[0.1, 0.3], &combos, 2).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn sweep_csv_has_one_row_per_cell() {
        let tau = tiny_encoder(5).frozen_copy();
        let (safe, unsafe_prompts) = corpus();
        let cfg = AlignmentConfig {
            epochs: 1,
            ..quick_cfg()
        };
        let report = hyper_sweep(
            &tau,
            &safe,
            &unsafe_prompts,
            &cfg,
            SweepAxis::Lr,
            &[0.0, 1e-3],
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("sweep.csv");
        write_sweep_csv(&report, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("axis,value,combo"));
        assert_eq!(lines.count(), 2);
        let json_path = dir.path().join("sweep.json");
        write_sweep_json(&report, &json_path).unwrap();
        let back: SweepReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
