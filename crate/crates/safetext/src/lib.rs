//! Embedding-space safety alignment for a small text encoder.
//!
//! The library fine-tunes a copy τ_s of a frozen text encoder τ so that
//! embeddings of unsafe prompts diverge from their originals while embeddings
//! of safe prompts stay put. Everything runs on the CPU in 64-bit floats and
//! is bitwise deterministic for a fixed seed.
//!
//! Module map:
//!
//! * [`tensor`] — minimal dense-tensor arithmetic with reverse-mode AD.
//! * [`encoder`] — word-level tokenizer, transformer encoder, checkpoints.
//! * [`metrics`] — distance metrics, removal-rate formula, drift statistics.
//! * [`dataprep`] — record ingestion, threshold filters, seeded splits,
//!   and a synthetic corpus generator.
//! * [`align`] — the alignment objective, the Adam training loop, and
//!   hyperparameter sweeps.
//! * [`perturb`] — direction-only vs magnitude-only perturbation experiments.
//! * [`attack`] — concept-vector extraction and a genetic vocabulary-search
//!   attack against the aligned encoder.
//! * [`probe`] — linear safety probe, proxy removal rate, evaluation reports,
//!   and the binary embeddings dump.
//! * [`seeding`] — one global seed fanned out into per-component streams.

pub mod align;
pub mod attack;
pub mod dataprep;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod perturb;
pub mod probe;
pub mod seeding;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
