//! Generates corpora from the default manifest (or `key=value` overrides of a
//! run config), round-trips them through JSONL and prints split statistics.
//!
//! `cargo run --release --example gen_data -- [data.manifest.seed=7 ...]`

use moemix::cli_io::{gen_data, load_config};
use moemix::synth::read_corpus_jsonl;

fn main() -> moemix::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = load_config(None, &overrides)?;
    let manifest = cfg.data.resolve_manifest()?;
    let dir = std::env::temp_dir().join("moemix-gen-data");
    let (manifest_path, corpus_path) = gen_data(&manifest, &dir)?;
    let set = read_corpus_jsonl(&corpus_path, manifest.vocab_size)?;
    println!("manifest {}\ncorpus   {}", manifest_path.display(), corpus_path.display());
    for (train, probe) in set.train.iter().zip(&set.probe) {
        let mean = |c: &moemix::synth::DomainCorpus| c.token_count() as f64 / c.sequences.len() as f64;
        println!(
            "{}: train {} seqs ({:.1} tokens avg), probe {} seqs ({:.1} avg)",
            train.domain,
            train.sequences.len(),
            mean(train),
            probe.sequences.len(),
            mean(probe)
        );
    }
    let regenerated = cfg.data.load()?;
    println!("JSONL round trip identical to regeneration: {}", regenerated == set);
    Ok(())
}
