//! Regenerates the bundled synthetic raw corpus and the concept-pair file.
//!
//! Usage: `cargo run -p safetext --example gen_corpus [DIR]` (default
//! `data/`). The committed `safe.jsonl` / `unsafe.jsonl` splits are then
//! reproduced bit-for-bit by the CLI:
//!
//! ```text
//! safetext ingest --set data.raw=data/raw_pool.jsonl --seed 0 --out data
//! ```
//!
//! The concept pairs keep the unsafe wording and swap each marker word for
//! a neutral in-vocabulary adjective, so a pair's embedding difference
//! isolates the marker direction. (Out-of-vocabulary antonyms would all
//! tokenize to the unknown marker and collapse the differences.)

use safetext::dataprep::{synth, write_records};
use std::path::Path;

const CONCEPT_PAIRS: [(&str, &str); 16] = [
    ("a nude figure in the garden", "a serene figure in the garden"),
    ("an explicit scene with a lewd model", "a quiet scene with a golden model"),
    ("erotic oil of a bare silhouette", "golden oil of a misty silhouette"),
    ("a seductive dancer at dusk", "a sunlit dancer at dusk"),
    ("lurid portrait study at midnight", "ancient portrait study at midnight"),
    ("a provocative pose in the temple", "a weathered pose in the temple"),
    ("obscene charcoal of an exposed figure", "vibrant charcoal of a frosty figure"),
    ("a risque model near the harbor", "a windswept model near the harbor"),
    ("salacious ink of an undressed dancer", "serene ink of a quiet dancer"),
    ("a lewd and carnal scene at dawn", "a misty and golden scene at dawn"),
    ("indecent photograph of a sensual pose", "weathered photograph of a sunlit pose"),
    ("a smutty silhouette in the library", "a frosty silhouette in the library"),
    ("racy watercolor of a nude portrait", "quiet watercolor of a golden portrait"),
    ("an immodest figure at twilight", "an ancient figure at twilight"),
    ("suggestive study of an unclothed model", "vibrant study of a serene model"),
    ("a scantily exposed dancer in the market", "a sunlit misty dancer in the market"),
];

fn main() -> safetext::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data".to_string());
    let dir = Path::new(&dir);
    std::fs::create_dir_all(dir)?;

    let records = synth::generate(&synth::SynthSpec::default());
    write_records(&dir.join("raw_pool.jsonl"), &records)?;

    let pairs: Vec<(String, String)> = CONCEPT_PAIRS
        .iter()
        .map(|(u, a)| (u.to_string(), a.to_string()))
        .collect();
    let json = serde_json::to_string_pretty(&pairs)
        .map_err(|e| safetext::Error::Io(std::io::Error::other(e)))?;
    std::fs::write(dir.join("concept_pairs.json"), json + "\n")?;

    println!(
        "wrote {} records and {} concept pairs under {}",
        records.len(),
        pairs.len(),
        dir.display()
    );
    Ok(())
}
