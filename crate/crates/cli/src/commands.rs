//! Subcommand implementations.
//!
//! Shared behavior: resolve the configuration, create the output directory,
//! log a start/done line to stdout and `run.log` (the only artifact that
//! carries wall-clock data, so reruns stay hash-comparable), write the
//! command's artifacts, then drop `<command>.resolved.json` recording the
//! resolved config and the hashes of every input file read.

use crate::config::{self, RunConfig};
use crate::{Cli, Cmd};
use safetext::align::{self, SweepAxis, SweepReport};
use safetext::attack::{self, AttackReport};
use safetext::dataprep::{self, PromptRecord};
use safetext::encoder::{self, checkpoint, EncoderState, Vocab};
use safetext::error::{Error, Result};
use safetext::metrics::DistanceMetric;
use safetext::perturb;
use safetext::probe::{self, EvalReport, Probe};
use safetext::seeding::seed_for;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = config::resolve(
        cli.config.as_deref(),
        &cli.set,
        cli.seed,
        cli.threads,
        cli.out.as_deref(),
    )?;
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    let mut log = RunLog::open(&out)?;
    let name = cli.command.name();
    let started = Instant::now();
    log.line(&format!("{name}: start (seed {})", cfg.seed))?;
    let result = match cli.command {
        Cmd::Ingest => ingest(&cfg, &out, &mut log),
        Cmd::Train => train(&cfg, &out, &mut log),
        Cmd::Eval => eval(&cfg, &out, &mut log),
        Cmd::Sweep => sweep(&cfg, &out, &mut log),
        Cmd::Perturb => perturb_cmd(&cfg, &out, &mut log),
        Cmd::Attack => attack_cmd(&cfg, &out, &mut log),
        Cmd::Probe => probe_cmd(&cfg, &out, &mut log),
        Cmd::Report => report(&cfg, &out, &mut log),
    };
    match &result {
        Ok(()) => log.line(&format!("{name}: done in {:.2?}", started.elapsed()))?,
        Err(e) => log.line(&format!("{name}: failed: {e}"))?,
    }
    result
}

/// Append-only run log, mirrored to stdout. Timings live only here so every
/// other artifact is a pure function of config and inputs.
struct RunLog {
    file: std::fs::File,
}

impl RunLog {
    fn open(out: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("run.log"))?;
        Ok(RunLog { file })
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        println!("{msg}");
        let t = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(self.file, "[{t}] {msg}")?;
        Ok(())
    }
}

// ───────────────────────────── shared helpers ──────────────────────────

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Input(format!("missing {what}: set it in the config's data section")))
}

fn load_records(path: &Path) -> Result<Vec<PromptRecord>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let (records, rejects) = dataprep::parse_records(std::io::BufReader::new(f))?;
    if !rejects.is_empty() {
        return Err(Error::Input(format!(
            "{}: {} malformed record(s), first at line {}",
            path.display(),
            rejects.len(),
            rejects[0].line_no
        )));
    }
    Ok(records)
}

fn load_prompts(path: &Path) -> Result<Vec<String>> {
    Ok(load_records(path)?.into_iter().map(|r| r.prompt).collect())
}

/// The frozen original encoder: loaded from `data.original` when set,
/// otherwise initialized deterministically from the prompt corpus.
fn original_encoder(
    cfg: &RunConfig,
    safe: &[String],
    unsafe_prompts: &[String],
) -> Result<EncoderState> {
    if let Some(p) = &cfg.data.original {
        return checkpoint::load(p);
    }
    let corpus: Vec<&str> = safe.iter().chain(unsafe_prompts).map(|s| s.as_str()).collect();
    let vocab = Vocab::build(&corpus, cfg.vocab_size)?;
    Ok(EncoderState::init(cfg.encoder.clone(), vocab)?.frozen_copy())
}

/// The safety probe: loaded from `data.probe` when set, otherwise trained
/// on the frozen encoder's embeddings (safe = negative, unsafe = positive)
/// and saved as `probe.json`.
fn probe_for(
    cfg: &RunConfig,
    out: &Path,
    tau: &EncoderState,
    safe: &[String],
    unsafe_prompts: &[String],
    log: &mut RunLog,
) -> Result<Probe> {
    if let Some(p) = &cfg.data.probe {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", p.display())))?;
        return serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", p.display())));
    }
    let mut embs = encoder::encode_pooled_batch(tau, safe)?;
    let mut labels = vec![false; embs.len()];
    embs.extend(encoder::encode_pooled_batch(tau, unsafe_prompts)?);
    labels.extend(std::iter::repeat_n(true, unsafe_prompts.len()));
    let probe = probe::train_probe(&embs, &labels, cfg.probe.iters, cfg.probe.lr, cfg.probe_seed())?;
    write_json(&out.join("probe.json"), &probe)?;
    log.line(&format!(
        "probe: trained, held-out accuracy {:.3}",
        probe.meta.held_out_accuracy
    ))?;
    Ok(probe)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writeln!(f)?;
    Ok(())
}

fn parse_combos(names: &[String]) -> Result<Vec<(DistanceMetric, DistanceMetric)>> {
    names
        .iter()
        .map(|s| {
            let (u, e) = s.split_once('-').ok_or_else(|| {
                Error::Config(format!("metric combo {s:?} must be written as D_U-D_E"))
            })?;
            Ok((u.parse()?, e.parse()?))
        })
        .collect()
}

// ─────────────────────────────── commands ──────────────────────────────

fn ingest(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let raw = require(&cfg.data.raw, "raw corpus (data.raw)")?;
    let (records, rejects) = dataprep::ingest(raw)?;
    dataprep::write_records(&out.join("records.jsonl"), &records)?;
    dataprep::write_rejects(&out.join("rejects.jsonl"), &rejects)?;
    let safe_pool = dataprep::filter_safe(&records, &cfg.split);
    let unsafe_pool = dataprep::filter_unsafe(&records, &cfg.split);
    log.line(&format!(
        "ingest: {} valid, {} rejected; pools {} safe / {} unsafe",
        records.len(),
        rejects.len(),
        safe_pool.len(),
        unsafe_pool.len()
    ))?;
    let safe = dataprep::sample_split(&safe_pool, cfg.split.n_safe, seed_for(cfg.split.seed, "split/safe"))?;
    let unsafe_sample = dataprep::sample_split(
        &unsafe_pool,
        cfg.split.n_unsafe,
        seed_for(cfg.split.seed, "split/unsafe"),
    )?;
    dataprep::write_records(&out.join("safe.jsonl"), &safe)?;
    dataprep::write_records(&out.join("unsafe.jsonl"), &unsafe_sample)?;
    log.line(&format!(
        "ingest: sampled {} safe / {} unsafe prompts",
        safe.len(),
        unsafe_sample.len()
    ))?;
    config::write_resolved(out, "ingest", cfg, &[raw])
}

fn train(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let safe_path = require(&cfg.data.safe, "safe prompts (data.safe)")?;
    let unsafe_path = require(&cfg.data.unsafe_records, "unsafe prompts (data.unsafe)")?;
    let safe = load_prompts(safe_path)?;
    let unsafe_prompts = load_prompts(unsafe_path)?;
    let tau = original_encoder(cfg, &safe, &unsafe_prompts)?;
    log.line(&format!(
        "train: {} safe / {} unsafe prompts, vocab {}, {} params",
        safe.len(),
        unsafe_prompts.len(),
        tau.vocab.len(),
        tau.flat_params().len()
    ))?;
    let (aligned, history) = align::train(&tau, &safe, &unsafe_prompts, &cfg.align)?;
    checkpoint::save(&tau, &out.join("original.stxt"))?;
    checkpoint::save(&aligned, &out.join("aligned.stxt"))?;
    write_json(&out.join("history.json"), &history)?;
    log.line(&format!(
        "train: objective {:.6}, safe drift {:.6}, unsafe |cos| {:.6} (held out)",
        history.final_objective,
        history.final_safe_drift.mean_euclid,
        history.final_unsafe_divergence.mean_abs_cos
    ))?;
    let mut inputs = vec![safe_path, unsafe_path];
    if let Some(p) = &cfg.data.original {
        inputs.push(p);
    }
    config::write_resolved(out, "train", cfg, &inputs)
}

fn eval(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let orig_path = require(&cfg.data.original, "checkpoint (data.original)")?;
    let alig_path = require(&cfg.data.aligned, "checkpoint (data.aligned)")?;
    let safe_path = require(&cfg.data.safe, "safe prompts (data.safe)")?;
    let unsafe_path = require(&cfg.data.unsafe_records, "unsafe prompts (data.unsafe)")?;
    let original = checkpoint::load(orig_path)?;
    let aligned = checkpoint::load(alig_path)?;
    let safe = load_prompts(safe_path)?;
    let unsafe_prompts = load_prompts(unsafe_path)?;
    let probe = probe_for(cfg, out, &original, &safe, &unsafe_prompts, log)?;
    let echo = serde_json::to_value(cfg).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let report = probe::full_report(
        &original,
        &aligned,
        &safe,
        &unsafe_prompts,
        &probe,
        echo,
        &out.join("embeddings.stxd"),
    )?;
    write_json(&out.join("eval.json"), &report)?;
    log.line(&format!(
        "eval: proxy NRR {:.4}, safe drift {:.6}, unsafe |cos| {:.4}",
        report.proxy_nrr, report.safe_drift.mean_euclid, report.unsafe_divergence.mean_abs_cos
    ))?;
    let mut inputs = vec![orig_path, alig_path, safe_path, unsafe_path];
    if let Some(p) = &cfg.data.probe {
        inputs.push(p);
    }
    config::write_resolved(out, "eval", cfg, &inputs)
}

fn sweep(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let safe_path = require(&cfg.data.safe, "safe prompts (data.safe)")?;
    let unsafe_path = require(&cfg.data.unsafe_records, "unsafe prompts (data.unsafe)")?;
    let safe = load_prompts(safe_path)?;
    let unsafe_prompts = load_prompts(unsafe_path)?;
    let tau = original_encoder(cfg, &safe, &unsafe_prompts)?;
    let report = if cfg.sweep.axis == "lambda" {
        if cfg.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid is empty".to_string()));
        }
        let combos = parse_combos(&cfg.metric_combos)?;
        align::lambda_sweep(
            &tau,
            &safe,
            &unsafe_prompts,
            &cfg.align,
            &cfg.lambda_grid,
            &combos,
            cfg.threads,
        )?
    } else {
        if cfg.sweep.grid.is_empty() {
            return Err(Error::Config("sweep.grid is empty".to_string()));
        }
        let axis: SweepAxis = cfg.sweep.axis.parse()?;
        align::hyper_sweep(
            &tau,
            &safe,
            &unsafe_prompts,
            &cfg.align,
            axis,
            &cfg.sweep.grid,
            cfg.threads,
        )?
    };
    align::write_sweep_csv(&report, &out.join("sweep.csv"))?;
    align::write_sweep_json(&report, &out.join("sweep.json"))?;
    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    log.line(&format!(
        "sweep: {} cells on axis {} ({} failed), {} thread(s)",
        report.cells.len(),
        report.axis,
        failures,
        cfg.threads
    ))?;
    let mut inputs = vec![safe_path, unsafe_path];
    if let Some(p) = &cfg.data.original {
        inputs.push(p);
    }
    config::write_resolved(out, "sweep", cfg, &inputs)
}

fn perturb_cmd(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let safe_path = require(&cfg.data.safe, "safe prompts (data.safe)")?;
    let unsafe_path = require(&cfg.data.unsafe_records, "unsafe prompts (data.unsafe)")?;
    if cfg.budgets.is_empty() {
        return Err(Error::Config("budgets is empty".to_string()));
    }
    let safe = load_prompts(safe_path)?;
    let unsafe_prompts = load_prompts(unsafe_path)?;
    let tau = original_encoder(cfg, &safe, &unsafe_prompts)?;
    let probe = probe_for(cfg, out, &tau, &safe, &unsafe_prompts, log)?;
    let rows = perturb::sensitivity_run(
        &tau,
        &safe,
        &unsafe_prompts,
        &cfg.budgets,
        &probe,
        cfg.perturb_seed(),
    )?;
    perturb::write_sensitivity_csv(&rows, &out.join("sensitivity.csv"))?;
    log.line(&format!(
        "perturb: {} rows over {} budgets",
        rows.len(),
        cfg.budgets.len()
    ))?;
    let mut inputs = vec![safe_path, unsafe_path];
    for p in [&cfg.data.original, &cfg.data.probe].into_iter().flatten() {
        inputs.push(p);
    }
    config::write_resolved(out, "perturb", cfg, &inputs)
}

fn attack_cmd(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let orig_path = require(&cfg.data.original, "checkpoint (data.original)")?;
    let alig_path = require(&cfg.data.aligned, "checkpoint (data.aligned)")?;
    let pairs_path = require(&cfg.data.concept_pairs, "concept pairs (data.concept_pairs)")?;
    let unsafe_path = require(&cfg.data.unsafe_records, "unsafe prompts (data.unsafe)")?;
    let original = checkpoint::load(orig_path)?;
    let aligned = checkpoint::load(alig_path)?;
    let pairs = attack::load_concept_pairs(pairs_path)?;
    let cv = attack::concept_vector(&original, &pairs)?;
    let mut unsafe_prompts = load_prompts(unsafe_path)?;
    if cfg.attack_prompts > 0 && unsafe_prompts.len() > cfg.attack_prompts {
        unsafe_prompts.truncate(cfg.attack_prompts);
    }
    let mut inputs = vec![orig_path, alig_path, pairs_path, unsafe_path];
    let probe = if cfg.data.probe.is_some() {
        inputs.push(cfg.data.probe.as_deref().unwrap());
        probe_for(cfg, out, &original, &[], &[], log)?
    } else {
        let safe_path = require(&cfg.data.safe, "safe prompts (data.safe)")?;
        inputs.push(safe_path);
        let safe = load_prompts(safe_path)?;
        probe_for(cfg, out, &original, &safe, &unsafe_prompts, log)?
    };
    let report = attack::evaluate_attack(
        &original,
        &aligned,
        &unsafe_prompts,
        &cv,
        &cfg.ga,
        &probe,
        cfg.attack_strength,
    )?;
    attack::write_attack_json(&report, &out.join("attack.json"))?;
    attack::write_attack_csv(&report, &out.join("attack.csv"))?;
    log.line(&format!(
        "attack: {} prompts, probe-unsafe rate {:.3} original vs {:.3} aligned (differential {:.3})",
        report.n_prompts, report.unaligned_rate, report.aligned_rate, report.differential
    ))?;
    config::write_resolved(out, "attack", cfg, &inputs)
}

fn probe_cmd(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let safe_path = require(&cfg.data.safe, "safe prompts (data.safe)")?;
    let unsafe_path = require(&cfg.data.unsafe_records, "unsafe prompts (data.unsafe)")?;
    let safe = load_prompts(safe_path)?;
    let unsafe_prompts = load_prompts(unsafe_path)?;
    let tau = original_encoder(cfg, &safe, &unsafe_prompts)?;
    let mut embs = encoder::encode_pooled_batch(&tau, &safe)?;
    let mut labels = vec![false; embs.len()];
    embs.extend(encoder::encode_pooled_batch(&tau, &unsafe_prompts)?);
    labels.extend(std::iter::repeat_n(true, unsafe_prompts.len()));
    let probe =
        probe::train_probe(&embs, &labels, cfg.probe.iters, cfg.probe.lr, cfg.probe_seed())?;
    write_json(&out.join("probe.json"), &probe)?;
    log.line(&format!(
        "probe: {} train / {} held out, held-out accuracy {:.3}",
        probe.meta.n_train, probe.meta.n_held_out, probe.meta.held_out_accuracy
    ))?;
    let mut inputs = vec![safe_path, unsafe_path];
    if let Some(p) = &cfg.data.original {
        inputs.push(p);
    }
    config::write_resolved(out, "probe", cfg, &inputs)
}

// ──────────────────────────────── report ───────────────────────────────

/// Collect whatever artifacts earlier commands left in the output directory
/// into one human-readable `summary.md`.
fn report(cfg: &RunConfig, out: &Path, log: &mut RunLog) -> Result<()> {
    let mut md = String::from("# Run summary\n");
    let mut found = 0usize;

    if let Some(history) = read_if::<align::TrainHistory>(&out.join("history.json"))? {
        found += 1;
        let _ = write!(
            md,
            "\n## Training\n\n\
             - steps: {}\n\
             - final objective: {}\n\
             - safe drift (held out, mean Euclidean): {}\n\
             - unsafe divergence (held out, mean |cos|): {}\n",
            history.steps.len(),
            history.final_objective,
            history.final_safe_drift.mean_euclid,
            history.final_unsafe_divergence.mean_abs_cos
        );
    }

    if let Some(eval) = read_if::<EvalReport>(&out.join("eval.json"))? {
        found += 1;
        let _ = write!(
            md,
            "\n## Evaluation\n\n\
             - {}\n\
             - proxy removal rate: {}\n\
             - flagged unsafe prompts: {} -> {} (of {})\n\
             - flagged safe prompts: {} -> {} (of {})\n\
             - safe drift mean / p90: {} / {}\n\
             - unsafe mean |cos|: {}\n\
             - probe held-out accuracy: {}\n",
            eval.note,
            eval.proxy_nrr,
            eval.flagged_unsafe_before,
            eval.flagged_unsafe_after,
            eval.n_unsafe,
            eval.flagged_safe_before,
            eval.flagged_safe_after,
            eval.n_safe,
            eval.safe_drift.mean_euclid,
            eval.safe_drift.p90_euclid,
            eval.unsafe_divergence.mean_abs_cos,
            eval.probe_held_out_accuracy
        );
    }

    if let Some(sweep) = read_if::<SweepReport>(&out.join("sweep.json"))? {
        found += 1;
        let _ = write!(
            md,
            "\n## Sweep ({} axis, {} cells)\n\n\
             | {} | combo | safe drift | unsafe mean abs cos | error |\n\
             | --- | --- | --- | --- | --- |\n",
            sweep.axis,
            sweep.cells.len(),
            sweep.axis
        );
        for c in &sweep.cells {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                c.value,
                c.combo,
                opt(c.safe_mean_euclid),
                opt(c.unsafe_mean_abs_cos),
                c.error.as_deref().unwrap_or("")
            );
        }
    }

    let sens_path = out.join("sensitivity.csv");
    if sens_path.exists() {
        found += 1;
        let text = std::fs::read_to_string(&sens_path)?;
        let _ = write!(md, "\n## Perturbation sensitivity\n\n");
        for (i, line) in text.lines().enumerate() {
            let _ = writeln!(md, "| {} |", line.split(',').collect::<Vec<_>>().join(" | "));
            if i == 0 {
                let cols = line.split(',').count();
                let _ = writeln!(md, "|{}", " --- |".repeat(cols));
            }
        }
    }

    if let Some(atk) = read_if::<AttackReport>(&out.join("attack.json"))? {
        found += 1;
        let _ = write!(
            md,
            "\n## Attack\n\n\
             - prompts attacked: {}\n\
             - probe-unsafe rate, original encoder: {}\n\
             - probe-unsafe rate, aligned encoder: {}\n\
             - differential (original - aligned): {}\n",
            atk.n_prompts, atk.unaligned_rate, atk.aligned_rate, atk.differential
        );
    }

    if found == 0 {
        return Err(Error::Input(format!(
            "nothing to report: no artifacts found in {}",
            out.display()
        )));
    }
    std::fs::write(out.join("summary.md"), md)?;
    log.line(&format!(
        "report: {} section(s) -> {}",
        found,
        out.join("summary.md").display()
    ))?;
    config::write_resolved(out, "report", cfg, &[])
}

fn read_if<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let value = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(Some(value))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
