//! One JSON run configuration shared by every subcommand.
//!
//! Resolution order: struct defaults ← config file ← `--set` overrides (in
//! flag order) ← dedicated flags (`--seed`, `--threads`, `--out`), with
//! `SAFETEXT_THREADS` slotted between the config and `--threads`. Unknown
//! keys anywhere in the document are rejected.
//!
//! The single global `seed` fans out into per-component seeds through the
//! fixed `(seed, tag)` splitting scheme, so adding a component never
//! perturbs the streams of existing ones. Component seed fields are
//! therefore derived, never set directly.

use safetext::align::AlignmentConfig;
use safetext::attack::GASpec;
use safetext::dataprep::SplitSpec;
use safetext::encoder::EncoderConfig;
use safetext::error::{Error, Result};
use safetext::seeding::seed_for;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Input files; which ones a subcommand needs is documented per command.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Raw JSONL corpus for `ingest`.
    pub raw: Option<PathBuf>,
    /// Safe-prompt records (JSONL), as produced by `ingest`.
    pub safe: Option<PathBuf>,
    /// Unsafe-prompt records (JSONL), as produced by `ingest`.
    #[serde(rename = "unsafe")]
    pub unsafe_records: Option<PathBuf>,
    /// Frozen original-encoder checkpoint. Commands that only need an
    /// encoder (sweep, perturb, probe) initialize one from the prompt
    /// corpus when this is absent.
    pub original: Option<PathBuf>,
    /// Aligned-encoder checkpoint.
    pub aligned: Option<PathBuf>,
    /// Trained probe JSON; commands train one on the fly when absent.
    pub probe: Option<PathBuf>,
    /// Concept-pair JSON (`[[unsafe wording, antonym], ...]`) for `attack`.
    pub concept_pairs: Option<PathBuf>,
}

/// Probe training knobs (the probe seed derives from the global seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub iters: usize,
    pub lr: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { iters: 300, lr: 0.5 }
    }
}

/// Hyperparameter sweep selection. Axis `lambda` pairs `lambda_grid` with
/// `metric_combos`; any other axis (`epochs`, `lr`, `batch`) sweeps `grid`
/// under the base alignment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: String,
    pub grid: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: "lambda".to_string(),
            grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub split: SplitSpec,
    pub encoder: EncoderConfig,
    /// Tokenizer vocabulary cap when building an encoder from a corpus.
    pub vocab_size: usize,
    pub align: AlignmentConfig,
    pub ga: GASpec,
    pub probe: ProbeSpec,
    pub sweep: SweepSpec,
    /// Lambda values for the `sweep` command's lambda axis.
    pub lambda_grid: Vec<f64>,
    /// Metric combinations (`D_U-D_E`, e.g. `Euclidean-NegCosine`) for the
    /// lambda sweep.
    pub metric_combos: Vec<String>,
    /// Absolute perturbation budgets for `perturb`.
    pub budgets: Vec<f64>,
    /// Concept-vector strength when building attack targets.
    pub attack_strength: f64,
    /// How many unsafe prompts `attack` crafts against (0 = all).
    pub attack_prompts: usize,
    /// Output directory; the `--out` flag overrides this.
    pub out: Option<PathBuf>,
    /// Global seed; all component seeds derive from it.
    pub seed: u64,
    /// Worker threads for sweep cells.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths::default(),
            split: SplitSpec::default(),
            encoder: EncoderConfig::default(),
            vocab_size: 4096,
            align: AlignmentConfig::default(),
            ga: GASpec::default(),
            probe: ProbeSpec::default(),
            sweep: SweepSpec::default(),
            lambda_grid: vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8],
            metric_combos: vec!["Euclidean-NegCosine".to_string()],
            budgets: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            attack_strength: 1.0,
            attack_prompts: 16,
            out: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            Error::Config("no output directory: pass --out or set `out`".to_string())
        })
    }

    pub fn probe_seed(&self) -> u64 {
        seed_for(self.seed, "cli/probe")
    }

    pub fn perturb_seed(&self) -> u64 {
        seed_for(self.seed, "cli/perturb")
    }
}

/// Load, merge, and validate the configuration for one invocation.
pub fn resolve(
    config_path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut doc: Value = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::Config("config root must be a JSON object".to_string()));
    }
    for spec in sets {
        apply_set(&mut doc, spec)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;

    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    } else if let Ok(raw) = std::env::var("SAFETEXT_THREADS") {
        cfg.threads = raw.trim().parse().map_err(|_| {
            Error::Config(format!("SAFETEXT_THREADS must be an integer, got {raw:?}"))
        })?;
    }
    if let Some(o) = out {
        cfg.out = Some(o.to_path_buf());
    }
    if cfg.threads == 0 {
        return Err(Error::Config("threads must be >= 1".to_string()));
    }

    // Fan the global seed out; component seed fields in the file are
    // intentionally overwritten so one seed governs the whole run.
    cfg.split.seed = seed_for(cfg.seed, "cli/split");
    cfg.encoder.seed = seed_for(cfg.seed, "cli/encoder");
    cfg.align.seed = seed_for(cfg.seed, "cli/align");
    cfg.ga.seed = seed_for(cfg.seed, "cli/attack");

    cfg.split.validate()?;
    cfg.encoder.validate()?;
    cfg.align.validate()?;
    cfg.ga.validate()?;
    Ok(cfg)
}

/// Apply one `key.path=value` override to the raw JSON document. The value
/// is parsed as JSON when possible and falls back to a plain string, so
/// `--set align.lambda=0.4` and `--set data.raw=corpus.jsonl` both work.
fn apply_set(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("--set has an empty key: {spec:?}")));
    }
    let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let mut node = doc;
    for key in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("--set {path}: `{key}` is not an object"))
        })?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("--set {path}: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), val);
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    config: &'a RunConfig,
    /// SHA-256 of every input file this run read.
    inputs: BTreeMap<String, String>,
}

/// Write `<command>.resolved.json` next to the run's artifacts: the fully
/// resolved config plus content hashes of every input file. Together with
/// the inputs themselves this reproduces the run bit-exactly.
pub fn write_resolved(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
) -> Result<()> {
    let mut hashed = BTreeMap::new();
    for p in inputs {
        hashed.insert(p.display().to_string(), sha256_file(p)?);
    }
    let path = out.join(format!("{command}.resolved.json"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(
        &mut f,
        &Resolved {
            command,
            config: cfg,
            inputs: hashed,
        },
    )
    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writeln!(f)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_config_file() {
        let cfg = resolve(None, &[], None, None, None).unwrap();
        assert_eq!(cfg.align.lambda, 0.2);
        assert_eq!(cfg.lambda_grid.len(), 6);
        assert_eq!(cfg.threads, 1);
        // Component seeds are derived, not the raw defaults.
        assert_eq!(cfg.split.seed, seed_for(0, "cli/split"));
        assert_eq!(cfg.align.seed, seed_for(0, "cli/align"));
    }

    #[test]
    fn set_overrides_apply_in_order_and_parse_json() {
        let sets = vec![
            "align.lambda=0.4".to_string(),
            "lambda_grid=[0,0.1]".to_string(),
            "data.raw=corpus.jsonl".to_string(),
            "align.lambda=0.8".to_string(),
        ];
        let cfg = resolve(None, &sets, None, None, None).unwrap();
        assert_eq!(cfg.align.lambda, 0.8);
        assert_eq!(cfg.lambda_grid, vec![0.0, 0.1]);
        assert_eq!(cfg.data.raw.as_deref(), Some(Path::new("corpus.jsonl")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = resolve(None, &["alignn.lambda=0.4".to_string()], None, None, None)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = resolve(None, &["align.lamda=0.4".to_string()], None, None, None)
            .unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn dedicated_flags_beat_set_overrides() {
        let sets = vec!["seed=5".to_string(), "threads=3".to_string()];
        let cfg = resolve(None, &sets, Some(9), Some(2), Some(Path::new("o"))).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.threads, 2);
        assert_eq!(cfg.out.as_deref(), Some(Path::new("o")));
        assert_eq!(cfg.ga.seed, seed_for(9, "cli/attack"));
    }

    #[test]
    fn malformed_set_is_a_config_error() {
        for bad in ["no_equals", "=5", ""] {
            let err = resolve(None, &[bad.to_string()], None, None, None).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad:?} -> {err}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = resolve(None, &["budgets=[1,2]".to_string()], Some(3), None, None).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
