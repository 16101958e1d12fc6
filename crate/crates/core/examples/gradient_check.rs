//! Compares the hand-written backward pass with central differences on a
//! small two-layer network, block by block.
//!
//! `cargo run --release --example gradient_check -- [seed]`

use moemix::moe::{backward, forward_loss, MoEConfig, MoENetwork, PaddedBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn loss(net: &MoENetwork, batch: &PaddedBatch) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    forward_loss(net, batch, true, &mut rng).unwrap().total_loss
}

fn main() -> moemix::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let cfg = MoEConfig {
        vocab_size: 10,
        embed_dim: 4,
        num_experts: 4,
        top_k: 2,
        expert_hidden_dim: 5,
        num_moe_layers: 2,
        gate_noise_std: 0.2,
        balance_loss_coeff: 0.5,
        freeze_gate: false,
        seed,
    };
    let mut net = MoENetwork::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..net.params.len()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    net.set_flat(&flat)?;
    let batch = PaddedBatch::from_sequences(&[vec![1u32, 4, 2, 9, 3], vec![5, 5, 8]], 0)?;

    let mut noise = ChaCha8Rng::seed_from_u64(7);
    let out = forward_loss(&net, &batch, true, &mut noise)?;
    let grads = backward(&net, &out.cache)?;
    println!("{} parameters, loss {:.6}", net.params.len(), out.total_loss);

    let eps = 1e-5;
    let mut offset = 0;
    for (kind, g) in grads.blocks() {
        let mut worst: f64 = 0.0;
        for (j, &a) in g.iter().enumerate() {
            let mut p = flat.clone();
            p[offset + j] += eps;
            let mut probe = net.clone();
            probe.set_flat(&p)?;
            let up = loss(&probe, &batch);
            p[offset + j] -= 2.0 * eps;
            probe.set_flat(&p)?;
            let down = loss(&probe, &batch);
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
        println!("{:<22} {:>4} values  max rel error {worst:.2e}", kind.name(), g.len());
        offset += g.len();
    }
    println!("(a large error in one block usually means a routing decision flipped under the perturbation)");
    Ok(())
}
