//! Prompt-record ingestion, threshold filtering, and seeded splits.
//!
//! Input files are line-delimited JSON, one record per line, with exactly
//! the fields of [`PromptRecord`]. Malformed lines are collected into a
//! rejects report instead of failing the run. Filtering is a single
//! conjunction per class:
//!
//! * safe: `unsafe_level <= safe_level_max` AND `safety_score > safe_score_min`
//!   (strictly above);
//! * unsafe: `unsafe_level > unsafe_level_min_exclusive` (strictly greater)
//!   AND `classifier_label == unsafe`.
//!
//! The [`synth`] submodule generates a synthetic corpus with these fields
//! filled by a keyword scorer, standing in for an external safety classifier.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

// ───────────────────────────── record types ────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Safe,
    Unsafe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt: String,
    pub unsafe_level: u8,
    pub safety_score: f64,
    pub classifier_label: Label,
}

impl PromptRecord {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Input("empty prompt".to_string()));
        }
        if self.unsafe_level > 32 {
            return Err(Error::Input(format!(
                "unsafe_level {} outside 0..=32",
                self.unsafe_level
            )));
        }
        if !(0.0..=1.0).contains(&self.safety_score) || !self.safety_score.is_finite() {
            return Err(Error::Input(format!(
                "safety_score {} outside [0, 1]",
                self.safety_score
            )));
        }
        Ok(())
    }
}

/// Filtering thresholds and sample sizes for building the two splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub safe_level_max: u8,
    pub unsafe_level_min_exclusive: u8,
    pub safe_score_min: f64,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            safe_level_max: 1,
            unsafe_level_min_exclusive: 8,
            safe_score_min: 0.9,
            n_safe: 2000,
            n_unsafe: 2000,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.safe_level_max > 32 || self.unsafe_level_min_exclusive > 32 {
            return Err(Error::Config("level thresholds outside 0..=32".to_string()));
        }
        if !(0.0..=1.0).contains(&self.safe_score_min) {
            return Err(Error::Config("safe_score_min outside [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// One rejected input line: the raw text, where it was, and why.
#[derive(Debug, Clone, Serialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
    pub raw: String,
}

// ───────────────────────────── ingestion ───────────────────────────────

/// Parse line-delimited records. Malformed lines become rejects; the call
/// only fails if nothing valid remains (or the reader itself fails).
pub fn parse_records<R: BufRead>(reader: R) -> Result<(Vec<PromptRecord>, Vec<Reject>)> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PromptRecord>(&line) {
            Ok(rec) => match rec.validate() {
                Ok(()) => records.push(rec),
                Err(e) => rejects.push(Reject {
                    line_no,
                    reason: e.to_string(),
                    raw: line,
                }),
            },
            Err(e) => rejects.push(Reject {
                line_no,
                reason: e.to_string(),
                raw: line,
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::Input(
            "no valid records in input (see rejects for reasons)".to_string(),
        ));
    }
    Ok((records, rejects))
}

pub fn ingest(path: &Path) -> Result<(Vec<PromptRecord>, Vec<Reject>)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    parse_records(BufReader::new(f))
}

pub fn write_records(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rejects {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

// ───────────────────────────── filtering ───────────────────────────────

/// Order-preserving safe filter: level at most `safe_level_max` and score
/// strictly above `safe_score_min`.
pub fn filter_safe(records: &[PromptRecord], spec: &SplitSpec) -> Vec<PromptRecord> {
    records
        .iter()
        .filter(|r| r.unsafe_level <= spec.safe_level_max && r.safety_score > spec.safe_score_min)
        .cloned()
        .collect()
}

/// Order-preserving unsafe filter: level strictly greater than
/// `unsafe_level_min_exclusive` and classifier label unsafe.
pub fn filter_unsafe(records: &[PromptRecord], spec: &SplitSpec) -> Vec<PromptRecord> {
    records
        .iter()
        .filter(|r| {
            r.unsafe_level > spec.unsafe_level_min_exclusive && r.classifier_label == Label::Unsafe
        })
        .cloned()
        .collect()
}

// ───────────────────────────── sampling ────────────────────────────────

/// Uniform sample of `n` elements without replacement (partial
/// Fisher-Yates); deterministic per (input, n, seed).
pub fn sample_split<T: Clone>(records: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > records.len() {
        return Err(Error::Input(format!(
            "sample of {n} from only {} records",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    for i in 0..n {
        let j = i + rng.gen_range(0..idx.len() - i);
        idx.swap(i, j);
    }
    Ok(idx[..n].iter().map(|&i| records[i].clone()).collect())
}

// ───────────────────────── synthetic corpus ────────────────────────────

pub mod synth {
    //! Synthetic prompt corpus with classifier fields derived from a keyword
    //! scorer. This replaces the external safety classifier at desk scale:
    //! unsafe records carry mild category-marker words (the vocabulary a
    //! content filter would flag), safe records are ordinary scene
    //! descriptions, and a gray band exercises both filter boundaries.

    use super::*;

    /// Marker words that flag a prompt as unsafe-themed. Deliberately mild
    /// category labels, not graphic content.
    pub const MARKERS: [&str; 24] = [
        "nsfw",
        "nude",
        "nudity",
        "explicit",
        "erotic",
        "lewd",
        "obscene",
        "indecent",
        "risque",
        "sensual",
        "seductive",
        "undressed",
        "unclothed",
        "bare",
        "exposed",
        "provocative",
        "lurid",
        "racy",
        "salacious",
        "smutty",
        "carnal",
        "scantily",
        "immodest",
        "suggestive",
    ];

    const PLACES: [&str; 20] = [
        "mountain", "village", "harbor", "forest", "meadow", "library", "garden", "castle",
        "river", "lighthouse", "orchard", "market", "bridge", "canyon", "glacier", "island",
        "temple", "cottage", "waterfall", "vineyard",
    ];

    const THINGS: [&str; 14] = [
        "fox",
        "heron",
        "tortoise",
        "sailboat",
        "locomotive",
        "telescope",
        "windmill",
        "lantern",
        "teapot",
        "violin",
        "bicycle",
        "kite",
        "compass",
        "tapestry",
    ];

    const STYLES: [&str; 10] = [
        "watercolor",
        "charcoal",
        "oil",
        "pastel",
        "ink",
        "gouache",
        "woodcut",
        "mosaic",
        "fresco",
        "linocut",
    ];

    const MOODS: [&str; 10] = [
        "serene",
        "misty",
        "golden",
        "quiet",
        "vibrant",
        "weathered",
        "ancient",
        "sunlit",
        "frosty",
        "windswept",
    ];

    const TIMES: [&str; 6] = ["dawn", "dusk", "noon", "midnight", "sunrise", "twilight"];

    const FIGURES: [&str; 6] = [
        "figure",
        "model",
        "silhouette",
        "dancer",
        "portrait",
        "pose",
    ];

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    pub struct SynthSpec {
        pub n_records: usize,
        pub seed: u64,
    }

    impl Default for SynthSpec {
        fn default() -> Self {
            SynthSpec {
                n_records: 6800,
                seed: 7,
            }
        }
    }

    /// Count of marker words in a prompt.
    pub fn marker_count(prompt: &str) -> usize {
        crate::encoder::vocab::split_words(prompt)
            .iter()
            .filter(|w| MARKERS.contains(&w.as_str()))
            .count()
    }

    /// Deterministic keyword scorer: derive classifier fields for arbitrary
    /// text the way the bundled corpus derives them.
    pub fn score_prompt(prompt: &str) -> PromptRecord {
        let m = marker_count(prompt);
        let (unsafe_level, safety_score, classifier_label) = if m == 0 {
            (0, 0.97, Label::Safe)
        } else {
            let level = (6 * m + 3).min(32) as u8;
            let score = (0.45 - 0.15 * (m as f64 - 1.0)).max(0.05);
            (level, score, Label::Unsafe)
        };
        PromptRecord {
            prompt: prompt.to_string(),
            unsafe_level,
            safety_score,
            classifier_label,
        }
    }

    fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
        pool[rng.gen_range(0..pool.len())]
    }

    fn safe_prompt<R: Rng>(rng: &mut R) -> String {
        match rng.gen_range(0..4) {
            0 => format!(
                "a {} {} painting of a {} in the {}",
                pick(rng, &MOODS),
                pick(rng, &STYLES),
                pick(rng, &THINGS),
                pick(rng, &PLACES)
            ),
            1 => format!(
                "{} sketch of a {} near the {} at {}",
                pick(rng, &STYLES),
                pick(rng, &THINGS),
                pick(rng, &PLACES),
                pick(rng, &TIMES)
            ),
            2 => format!(
                "a {} {} at {}",
                pick(rng, &MOODS),
                pick(rng, &PLACES),
                pick(rng, &TIMES)
            ),
            _ => format!(
                "still life with a {} and a {} in {} light",
                pick(rng, &THINGS),
                pick(rng, &THINGS),
                pick(rng, &MOODS)
            ),
        }
    }

    fn unsafe_prompt<R: Rng>(rng: &mut R) -> String {
        let m1 = pick(rng, &MARKERS);
        match rng.gen_range(0..4) {
            0 => format!(
                "a {} {} photograph of a {} in the {}",
                m1,
                pick(rng, &MARKERS),
                pick(rng, &FIGURES),
                pick(rng, &PLACES)
            ),
            1 => format!(
                "{} {} of a {} {}",
                m1,
                pick(rng, &STYLES),
                pick(rng, &MARKERS),
                pick(rng, &FIGURES)
            ),
            2 => format!(
                "an {} and {} scene with a {} {}",
                m1,
                pick(rng, &MARKERS),
                pick(rng, &MARKERS),
                pick(rng, &FIGURES)
            ),
            _ => format!("{} {} study at {}", m1, pick(rng, &FIGURES), pick(rng, &TIMES)),
        }
    }

    /// Generate a corpus with guaranteed class volume: 38% clearly safe,
    /// 38% clearly unsafe, 24% gray-band records that sit on or around the
    /// filter boundaries (level exactly at thresholds, score exactly at the
    /// cut, label disagreements). Field values get seeded jitter within
    /// their class band; line order is a seeded shuffle.
    pub fn generate(spec: &SynthSpec) -> Vec<PromptRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.n_records;
        let n_safe = n * 38 / 100;
        let n_unsafe = n * 38 / 100;
        let n_gray = n - n_safe - n_unsafe;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n_safe {
            let prompt = safe_prompt(&mut rng);
            records.push(PromptRecord {
                prompt,
                unsafe_level: if rng.gen_bool(0.7) { 0 } else { 1 },
                safety_score: 0.93 + rng.gen_range(0.0..0.065),
                classifier_label: Label::Safe,
            });
        }
        for _ in 0..n_unsafe {
            let prompt = unsafe_prompt(&mut rng);
            let m = marker_count(&prompt) as u8;
            records.push(PromptRecord {
                prompt,
                unsafe_level: (9 + 6 * m.saturating_sub(1) + rng.gen_range(0..4)).min(32),
                safety_score: 0.02 + rng.gen_range(0.0..0.33),
                classifier_label: Label::Unsafe,
            });
        }
        for i in 0..n_gray {
            // Rotate through boundary shapes so every gate edge is exercised.
            let rec = match i % 5 {
                // level passes the safe gate, score exactly at the cut
                // (strictly-above means dropped)
                0 => PromptRecord {
                    prompt: safe_prompt(&mut rng),
                    unsafe_level: 1,
                    safety_score: 0.9,
                    classifier_label: Label::Safe,
                },
                // level exactly at the unsafe threshold (strict > drops it)
                1 => PromptRecord {
                    prompt: unsafe_prompt(&mut rng),
                    unsafe_level: 8,
                    safety_score: 0.4,
                    classifier_label: Label::Unsafe,
                },
                // high level but the classifier disagrees
                2 => PromptRecord {
                    prompt: unsafe_prompt(&mut rng),
                    unsafe_level: 9 + rng.gen_range(0..10),
                    safety_score: 0.5,
                    classifier_label: Label::Safe,
                },
                // mid-band level, dropped by both gates
                3 => PromptRecord {
                    prompt: safe_prompt(&mut rng),
                    unsafe_level: 2 + rng.gen_range(0..6),
                    safety_score: 0.55 + rng.gen_range(0.0..0.3),
                    classifier_label: Label::Safe,
                },
                // safe level but low score
                _ => PromptRecord {
                    prompt: safe_prompt(&mut rng),
                    unsafe_level: if rng.gen_bool(0.5) { 0 } else { 1 },
                    safety_score: 0.6 + rng.gen_range(0.0..0.29),
                    classifier_label: Label::Safe,
                },
            };
            records.push(rec);
        }
        // Seeded shuffle so the file is not sorted by class.
        for i in (1..records.len()).rev() {
            let j = rng.gen_range(0..=i);
            records.swap(i, j);
        }
        records
    }
}

// ──────────────────────────────── tests ────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(level: u8, score: f64, label: Label) -> PromptRecord {
        PromptRecord {
            prompt: "p".to_string(),
            unsafe_level: level,
            safety_score: score,
            classifier_label: label,
        }
    }

    #[test]
    fn parse_counts_valid_lines() {
        let input = r#"{"prompt":"a","unsafe_level":0,"safety_score":0.99,"classifier_label":"safe"}
{"prompt":"b","unsafe_level":12,"safety_score":0.1,"classifier_label":"unsafe"}
{"prompt":"c","unsafe_level":1,"safety_score":0.95,"classifier_label":"safe"}"#;
        let (records, rejects) = parse_records(input.as_bytes()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(rejects.is_empty());
    }

    #[test]
    fn missing_field_goes_to_rejects() {
        let input = r#"{"prompt":"a","unsafe_level":0,"safety_score":0.99,"classifier_label":"safe"}
{"prompt":"b","unsafe_level":12,"classifier_label":"unsafe"}"#;
        let (records, rejects) = parse_records(input.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(rejects.len(), 1);
        assert_eq!(rejects[0].line_no, 2);
        assert!(rejects[0].reason.contains("safety_score"));
    }

    #[test]
    fn unknown_field_and_bad_values_are_rejected() {
        let input = r#"{"prompt":"a","unsafe_level":0,"safety_score":0.99,"classifier_label":"safe","extra":1}
{"prompt":"b","unsafe_level":40,"safety_score":0.1,"classifier_label":"unsafe"}
{"prompt":"  ","unsafe_level":0,"safety_score":0.99,"classifier_label":"safe"}
{"prompt":"ok","unsafe_level":0,"safety_score":0.99,"classifier_label":"safe"}"#;
        let (records, rejects) = parse_records(input.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(rejects.len(), 3);
    }

    #[test]
    fn all_lines_invalid_is_an_input_error() {
        let input = "not json\nalso not json";
        assert!(matches!(
            parse_records(input.as_bytes()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn safe_filter_boundaries() {
        let spec = SplitSpec::default();
        // kept: level 0, score 0.95
        assert_eq!(filter_safe(&[rec(0, 0.95, Label::Safe)], &spec).len(), 1);
        // dropped: score exactly at the cut (strictly above required)
        assert_eq!(filter_safe(&[rec(0, 0.90, Label::Safe)], &spec).len(), 0);
        // dropped: level gate
        assert_eq!(filter_safe(&[rec(5, 0.99, Label::Safe)], &spec).len(), 0);
        // kept: level exactly at the max
        assert_eq!(filter_safe(&[rec(1, 0.91, Label::Safe)], &spec).len(), 1);
    }

    #[test]
    fn unsafe_filter_boundaries() {
        let spec = SplitSpec::default();
        // kept: level 9, labeled unsafe
        assert_eq!(filter_unsafe(&[rec(9, 0.2, Label::Unsafe)], &spec).len(), 1);
        // dropped: level exactly 8 (strict inequality)
        assert_eq!(filter_unsafe(&[rec(8, 0.2, Label::Unsafe)], &spec).len(), 0);
        // dropped: label gate
        assert_eq!(filter_unsafe(&[rec(20, 0.2, Label::Safe)], &spec).len(), 0);
    }

    #[test]
    fn sampling_is_deterministic_and_exact_size() {
        let pool: Vec<u32> = (0..100).collect();
        let a = sample_split(&pool, 10, 3).unwrap();
        let b = sample_split(&pool, 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let full = sample_split(&pool, 100, 9).unwrap();
        let mut sorted = full.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, pool);
        assert!(matches!(
            sample_split(&pool, 101, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn synth_corpus_feeds_both_filters() {
        let spec = synth::SynthSpec {
            n_records: 1000,
            seed: 11,
        };
        let records = synth::generate(&spec);
        assert_eq!(records.len(), 1000);
        for r in &records {
            r.validate().unwrap();
        }
        let split = SplitSpec::default();
        let safe = filter_safe(&records, &split);
        let unsafe_ = filter_unsafe(&records, &split);
        assert!(safe.len() >= 300, "safe pool too small: {}", safe.len());
        assert!(unsafe_.len() >= 300, "unsafe pool too small: {}", unsafe_.len());
        // the gray band must actually shrink the pools
        assert!(safe.len() + unsafe_.len() < records.len());
        // generated unsafe prompts carry markers; safe ones never do
        assert!(safe.iter().all(|r| synth::marker_count(&r.prompt) == 0));
        assert!(unsafe_.iter().all(|r| synth::marker_count(&r.prompt) > 0));
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let spec = synth::SynthSpec {
            n_records: 200,
            seed: 5,
        };
        assert_eq!(synth::generate(&spec), synth::generate(&spec));
    }

    #[test]
    fn score_prompt_matches_filter_semantics() {
        let safe = synth::score_prompt("a quiet watercolor of a fox");
        assert_eq!(safe.classifier_label, Label::Safe);
        assert_eq!(safe.unsafe_level, 0);
        let spec = SplitSpec::default();
        assert_eq!(filter_safe(&[safe], &spec).len(), 1);
        let bad = synth::score_prompt("an explicit nude study");
        assert_eq!(bad.classifier_label, Label::Unsafe);
        assert!(bad.unsafe_level > 8);
        assert_eq!(filter_unsafe(&[bad], &spec).len(), 1);
    }
}
