//! Routes one batch through an untrained network and prints each token's
//! top-K experts, the per-expert importance and load, and the balance loss.
//!
//! `cargo run --release --example routing_balance -- [experts=N] [top_k=K]`

use moemix::moe::{balance_loss, cv_squared, forward_loss, gate_scores, top_k_route, MoEConfig, MoENetwork, PaddedBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> moemix::Result<()> {
    let mut cfg = MoEConfig::default();
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some(("experts", v)) => cfg.num_experts = v.parse().expect("N"),
            Some(("top_k", v)) => cfg.top_k = v.parse().expect("K"),
            _ => panic!("unknown argument {arg}"),
        }
    }
    let net = MoENetwork::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let tokens = [5u32, 17, 17, 40, 63];
    for &t in &tokens {
        let hidden = &net.params.embedding[t as usize * cfg.embed_dim..(t as usize + 1) * cfg.embed_dim];
        let scores = gate_scores(&net, hidden, 0, false, &mut rng)?;
        let top = top_k_route(&scores, cfg.top_k)?;
        let picked: Vec<String> = top.iter().map(|&e| format!("{e}:{:.3}", scores[e])).collect();
        println!("token {t:>2} -> {}", picked.join(" "));
    }

    let batch = PaddedBatch::from_sequences(&[&tokens[..], &[1, 2, 3]], 0)?;
    let out = forward_loss(&net, &batch, false, &mut rng)?;
    let stats = &out.stats[0];
    println!("non-pad tokens {}, K x tokens {}", stats.non_pad_tokens, cfg.top_k * stats.non_pad_tokens);
    println!("gate load  {:?} (sum {})", stats.gate_load, stats.gate_load.iter().sum::<u64>());
    let imp: Vec<String> = stats.importance.iter().map(|x| format!("{x:.3}")).collect();
    println!("importance [{}]", imp.join(", "));
    println!(
        "CV2(G) {:.4}  CV2(O) {:.4}  balance loss {:.4}",
        cv_squared(&stats.importance)?,
        cv_squared(&stats.gate_load_f64())?,
        balance_loss(stats)?
    );
    println!("task loss {:.4} (ln V = {:.4})", out.task_loss, (cfg.vocab_size as f64).ln());
    Ok(())
}
