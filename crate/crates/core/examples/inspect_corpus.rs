//! Generates the default corpora and prints, per domain, the entropy rate of
//! its Markov chain (for order 1, the loss floor of a bigram predictor trained
//! on that domain alone) and the pairwise distances of the dataset embeddings.
//!
//! `cargo run --release --example inspect_corpus -- [key=value ...]`

use moemix::cli_io::load_config;
use moemix::gate_stats::embedding_distance_summary;
use moemix::synth::{dataset_embedding, generate_all, MarkovChain};

/// Stationary distribution over contexts by power iteration.
fn stationary(chain: &MarkovChain) -> Vec<f64> {
    let s = chain.num_states;
    let next_ctx = |ctx: usize, tok: usize| if chain.order == 2 { (ctx % s) * s + tok } else { tok };
    let mut pi = vec![1.0 / chain.rows.len() as f64; chain.rows.len()];
    for _ in 0..500 {
        let mut next = vec![0.0; chain.rows.len()];
        for (ctx, &p) in pi.iter().enumerate() {
            for (tok, &q) in chain.rows[ctx].iter().enumerate() {
                next[next_ctx(ctx, tok)] += p * q;
            }
        }
        pi = next;
    }
    pi
}

fn main() -> moemix::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = load_config(None, &overrides)?;
    let manifest = cfg.data.resolve_manifest()?;
    let set = generate_all(&manifest)?;
    for d in &manifest.domains {
        let chain = MarkovChain::for_domain(&manifest.domains, &d.name, manifest.vocab_size)?;
        let pi = stationary(&chain);
        let h: f64 = pi
            .iter()
            .zip(&chain.rows)
            .map(|(p, row)| p * row.iter().map(|q| -q * q.ln()).sum::<f64>())
            .sum();
        let mut unigram = vec![0.0; chain.num_states];
        for (ctx, p) in pi.iter().enumerate() {
            unigram[ctx % chain.num_states] += p;
        }
        let uni_h: f64 = unigram.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
        println!("{}: entropy rate {h:.4}  unigram entropy {uni_h:.4}", d.name);
    }
    let embs = set
        .probe
        .iter()
        .map(|c| dataset_embedding(c, set.vocab_size, cfg.embedding_hash_width).map(|e| e.vector))
        .collect::<moemix::Result<Vec<_>>>()?;
    let summary = embedding_distance_summary(&embs);
    for (name, row) in set.names().iter().zip(&summary.delta) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.4}")).collect();
        println!("{name} {}", cells.join(" "));
    }
    println!("mean distance {:?}", summary.avg);
    Ok(())
}
