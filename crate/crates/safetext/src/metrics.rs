//! Distance metrics, the harm-count removal-rate formula, and aggregate
//! drift statistics.
//!
//! All functions here are pure and allocation-light; they are shared by the
//! training objective (on tape values), the evaluation reports, and the
//! test-side oracles.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

// ───────────────────────────── distances ───────────────────────────────

/// Distance between two embedding vectors.
///
/// `NegCosine` is the negative *absolute* cosine, range [−1, 0]: maximizing
/// it pushes vectors toward orthogonality. `NegativeCosine` is the plain
/// negative cosine, range [−1, 1]: maximizing it pushes toward the antipode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
    NegCosine,
    NegativeCosine,
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DistanceMetric::Euclidean => "Euclidean",
            DistanceMetric::Cosine => "Cosine",
            DistanceMetric::NegCosine => "NegCosine",
            DistanceMetric::NegativeCosine => "NegativeCosine",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Euclidean" => Ok(DistanceMetric::Euclidean),
            "Cosine" => Ok(DistanceMetric::Cosine),
            "NegCosine" => Ok(DistanceMetric::NegCosine),
            "NegativeCosine" => Ok(DistanceMetric::NegativeCosine),
            other => Err(Error::Config(format!("unknown distance metric {other:?}"))),
        }
    }
}

fn check_pair(u: &[f64], v: &[f64]) -> Result<()> {
    if u.is_empty() || u.len() != v.len() {
        return Err(Error::Input(format!(
            "distance: vector lengths {} and {} (need equal, >= 1)",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    check_pair(u, v)?;
    let mut s = 0.0;
    for (x, y) in u.iter().zip(v) {
        let d = x - y;
        s += d * d;
    }
    Ok(s.sqrt())
}

pub fn norm(u: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in u {
        s += x * x;
    }
    s.sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in u.iter().zip(v) {
        s += x * y;
    }
    s
}

/// Exact `dot/(‖u‖‖v‖)`; zero-norm inputs are a degenerate-input error.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_pair(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate(
            "cosine of a zero-norm vector".to_string(),
        ));
    }
    Ok(dot(u, v) / (nu * nv))
}

pub fn distance(metric: DistanceMetric, u: &[f64], v: &[f64]) -> Result<f64> {
    match metric {
        DistanceMetric::Euclidean => euclidean(u, v),
        DistanceMetric::Cosine => cosine(u, v),
        DistanceMetric::NegCosine => Ok(-cosine(u, v)?.abs()),
        DistanceMetric::NegativeCosine => Ok(-cosine(u, v)?),
    }
}

// ─────────────────────────── removal rate ──────────────────────────────

/// Per-prompt harm counts before and after alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarmCounts {
    pub count_before: Vec<u32>,
    pub count_after: Vec<u32>,
}

impl HarmCounts {
    pub fn new(count_before: Vec<u32>, count_after: Vec<u32>) -> Result<Self> {
        if count_before.len() != count_after.len() {
            return Err(Error::Input(format!(
                "harm counts: {} before vs {} after",
                count_before.len(),
                count_after.len()
            )));
        }
        Ok(HarmCounts {
            count_before,
            count_after,
        })
    }
}

/// Removal rate: `1 − mean(count_after / count_before)` over prompts with a
/// nonzero before-count. Prompts with `count_before == 0` are excluded (the
/// ratio is undefined there); if every prompt is excluded the metric itself
/// is undefined and an error is returned. Values can exceed [0, 1] downward
/// when harm increases — that is the formula's behavior, not a bug.
pub fn nrr(h: &HarmCounts) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&b, &a) in h.count_before.iter().zip(&h.count_after) {
        if b == 0 {
            continue;
        }
        sum += f64::from(a) / f64::from(b);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input(
            "nrr undefined: all before-counts are zero".to_string(),
        ));
    }
    Ok(1.0 - sum / n as f64)
}

// ─────────────────────────── drift statistics ──────────────────────────

/// Sample statistics over (before, after) embedding pairs. Percentiles use
/// the nearest-rank definition so results are identical on every platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub n: usize,
    pub mean_euclid: f64,
    pub p50_euclid: f64,
    pub p90_euclid: f64,
    pub mean_abs_cos: f64,
    pub mean_cos: f64,
}

/// Nearest-rank percentile: smallest value whose rank covers `p` percent.
/// `values` need not be sorted; `p` in (0, 100].
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("percentile of empty sample".to_string()));
    }
    if !(0.0 < p && p <= 100.0) {
        return Err(Error::Input(format!("percentile rank {p} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Drift statistics between parallel lists of before/after vectors.
pub fn drift_stats(before: &[Vec<f64>], after: &[Vec<f64>]) -> Result<DriftStats> {
    if before.is_empty() || before.len() != after.len() {
        return Err(Error::Input(format!(
            "drift_stats: {} before vs {} after (need equal, >= 1)",
            before.len(),
            after.len()
        )));
    }
    let n = before.len();
    let mut euclids = Vec::with_capacity(n);
    let mut sum_e = 0.0;
    let mut sum_abs = 0.0;
    let mut sum_cos = 0.0;
    for (b, a) in before.iter().zip(after) {
        let e = euclidean(b, a)?;
        let c = cosine(b, a)?;
        euclids.push(e);
        sum_e += e;
        sum_abs += c.abs();
        sum_cos += c;
    }
    Ok(DriftStats {
        n,
        mean_euclid: sum_e / n as f64,
        p50_euclid: percentile_nearest_rank(&euclids, 50.0)?,
        p90_euclid: percentile_nearest_rank(&euclids, 90.0)?,
        mean_abs_cos: sum_abs / n as f64,
        mean_cos: sum_cos / n as f64,
    })
}

// ─────────────────────────── rank correlation ──────────────────────────

/// Spearman rank correlation with average ranks for ties. Used by sweep
/// analyses to check monotone trends without assuming linearity.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input(format!(
            "spearman: lengths {} and {} (need equal, >= 2)",
            xs.len(),
            ys.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Input(
            "spearman undefined: a variable is constant".to_string(),
        ));
    }
    Ok(num / (dx * dy).sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

// ──────────────────────────────── tests ────────────────────────────────
