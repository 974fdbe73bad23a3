//! Controlled embedding perturbations: rotate direction at fixed
//! magnitude, or scale magnitude at fixed direction, under an exact ℓ2
//! budget on the change, plus the sensitivity experiment that compares the
//! two modes through the safety probe.
//!
//! Both modes spend exactly the same budget `c = ‖e′ − e‖`, so any
//! difference in downstream effect is attributable to *what* changed
//! (direction vs magnitude), not *how much*.

use crate::encoder::{encode_pooled_batch, EncoderState};
use crate::error::{Error, Result};
use crate::metrics;
use crate::probe::Probe;
use crate::seeding::{rng_for, seed_for};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ─────────────────────────────── modes ─────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    DirectionOnly,
    MagnitudeOnly,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PerturbMode::DirectionOnly => "direction_only",
            PerturbMode::MagnitudeOnly => "magnitude_only",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction_only" => Ok(PerturbMode::DirectionOnly),
            "magnitude_only" => Ok(PerturbMode::MagnitudeOnly),
            other => Err(Error::Config(format!("unknown perturbation mode {other:?}"))),
        }
    }
}

/// One perturbation request: which mode, how large a change, and the seed
/// that fixes the rotation plane (unused by magnitude scaling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    pub budget: f64,
    pub seed: u64,
}

// ────────────────────────── vector operations ──────────────────────────

/// Rotate `e` within the plane spanned by `e` and a seeded random
/// direction (orthogonalized against `e`), by the angle that makes the
/// chord length exactly `c`: θ = 2·arcsin(c / (2‖e‖)). The norm is
/// preserved; the change has ℓ2 norm `c`.
pub fn rotate_direction(e: &[f64], c: f64, seed: u64) -> Result<Vec<f64>> {
    let n = metrics::norm(e);
    if n == 0.0 || e.is_empty() {
        return Err(Error::Degenerate(
            "cannot rotate a zero-norm embedding".to_string(),
        ));
    }
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Input(format!("budget must be finite and >= 0, got {c}")));
    }
    if c > 2.0 * n {
        return Err(Error::InfeasibleBudget(format!(
            "direction-only change of {c} exceeds the diameter 2‖e‖ = {}",
            2.0 * n
        )));
    }
    if c == 0.0 {
        return Ok(e.to_vec());
    }
    let ratio = c / (2.0 * n);
    if ratio == 1.0 {
        // Full budget: the antipode, exactly.
        return Ok(e.iter().map(|x| -x).collect());
    }

    // Seeded direction, orthogonalized against e and normalized. A
    // degenerate draw (parallel to e, or all zeros) is re-drawn; with a
    // continuous distribution this effectively never happens.
    let mut rng = rng_for(seed, "perturb/direction");
    let unit: Vec<f64> = e.iter().map(|x| x / n).collect();
    let u = loop {
        let d: Vec<f64> = (0..e.len()).map(|_| rng.sample(StandardNormal)).collect();
        let proj = metrics::dot(&d, &unit);
        let mut u: Vec<f64> = d
            .iter()
            .zip(&unit)
            .map(|(di, ui)| di - proj * ui)
            .collect();
        let un = metrics::norm(&u);
        if un > 1e-12 {
            for x in u.iter_mut() {
                *x /= un;
            }
            break u;
        }
    };

    let theta = 2.0 * ratio.asin();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    Ok(e.iter()
        .zip(&u)
        .map(|(ei, ui)| cos_t * ei + sin_t * n * ui)
        .collect())
}

/// Stretch `e` along its own direction so that the change has ℓ2 norm `c`:
/// e′ = e · (1 + c/‖e‖). Direction is untouched (cosine 1).
pub fn scale_magnitude(e: &[f64], c: f64) -> Result<Vec<f64>> {
    let n = metrics::norm(e);
    if n == 0.0 || e.is_empty() {
        return Err(Error::Degenerate(
            "cannot scale a zero-norm embedding".to_string(),
        ));
    }
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Input(format!("budget must be finite and >= 0, got {c}")));
    }
    if c == 0.0 {
        return Ok(e.to_vec());
    }
    let factor = 1.0 + c / n;
    Ok(e.iter().map(|x| x * factor).collect())
}

/// Apply one spec to one embedding.
pub fn perturb(e: &[f64], spec: &PerturbSpec) -> Result<Vec<f64>> {
    match spec.mode {
        PerturbMode::DirectionOnly => rotate_direction(e, spec.budget, spec.seed),
        PerturbMode::MagnitudeOnly => scale_magnitude(e, spec.budget),
    }
}

// ─────────────────────────── sensitivity run ───────────────────────────

/// One row of the sensitivity table: probe-flip rate over the unsafe
/// prompts and mean embedding drift over the safe prompts, at one
/// (mode, budget) point. Prompts whose budget is infeasible are skipped
/// and counted. Rates are `None` when every contributing prompt was
/// skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub mode: PerturbMode,
    pub budget: f64,
    pub flip_rate: Option<f64>,
    pub mean_drift: Option<f64>,
    pub n_skipped: usize,
}

/// For every budget and both modes, perturb each prompt's embedding under
/// the given encoder and measure: the fraction of unsafe prompts whose
/// probe decision flips, and the mean ℓ2 drift over safe prompts. Each
/// prompt gets its own rotation plane, seeded from
/// `(run seed, mode, budget index, prompt index)`, so runs are
/// reproducible and prompts are independent.
pub fn sensitivity_run(
    encoder: &EncoderState,
    safe_prompts: &[String],
    unsafe_prompts: &[String],
    budgets: &[f64],
    probe: &Probe,
    seed: u64,
) -> Result<Vec<SensitivityRow>> {
    if safe_prompts.is_empty() || unsafe_prompts.is_empty() {
        return Err(Error::Input(
            "sensitivity run needs non-empty safe and unsafe prompt sets".to_string(),
        ));
    }
    if budgets.is_empty() {
        return Err(Error::Input("no budgets given".to_string()));
    }
    if let Some(&bad) = budgets.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::Input(format!("budget {bad} invalid")));
    }
    let safe_embs = encode_pooled_batch(encoder, safe_prompts)?;
    let unsafe_embs = encode_pooled_batch(encoder, unsafe_prompts)?;
    let base_flags: Vec<bool> = unsafe_embs
        .iter()
        .map(|e| probe.flag(e))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(2 * budgets.len());
    for mode in [PerturbMode::DirectionOnly, PerturbMode::MagnitudeOnly] {
        for (bi, &budget) in budgets.iter().enumerate() {
            let mut skipped = 0usize;
            let mut flips = 0usize;
            let mut flip_total = 0usize;
            for (pi, e) in unsafe_embs.iter().enumerate() {
                let spec = PerturbSpec {
                    mode,
                    budget,
                    seed: seed_for(seed, &format!("perturb/{mode}/{bi}/{pi}")),
                };
                match perturb(e, &spec) {
                    Ok(ep) => {
                        flip_total += 1;
                        if probe.flag(&ep)? != base_flags[pi] {
                            flips += 1;
                        }
                    }
                    Err(Error::InfeasibleBudget(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let mut drift_sum = 0.0;
            let mut drift_total = 0usize;
            for (pi, e) in safe_embs.iter().enumerate() {
                let spec = PerturbSpec {
                    mode,
                    budget,
                    seed: seed_for(seed, &format!("perturb/{mode}/{bi}/safe/{pi}")),
                };
                match perturb(e, &spec) {
                    Ok(ep) => {
                        drift_total += 1;
                        drift_sum += metrics::euclidean(e, &ep)?;
                    }
                    Err(Error::InfeasibleBudget(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            rows.push(SensitivityRow {
                mode,
                budget,
                flip_rate: (flip_total > 0).then(|| flips as f64 / flip_total as f64),
                mean_drift: (drift_total > 0).then(|| drift_sum / drift_total as f64),
                n_skipped: skipped,
            });
        }
    }
    Ok(rows)
}

/// Sensitivity table as CSV: mode, budget, flip_rate, mean_drift,
/// n_skipped. All-skipped cells are left empty.
pub fn write_sensitivity_csv(rows: &[SensitivityRow], path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(["mode", "budget", "flip_rate", "mean_drift", "n_skipped"])
        .map_err(io_err)?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.budget.to_string(),
            r.flip_rate.map(|v| v.to_string()).unwrap_or_default(),
            r.mean_drift.map(|v| v.to_string()).unwrap_or_default(),
            r.n_skipped.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

// ──────────────────────────────── tests ────────────────────────────────
