mod common;

use common::{finite_difference_check, random_batch, small_network};
use moemix::moe::{backward, forward_loss, MoEConfig, MoENetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..20 {
        let net = small_network(seed);
        assert!(net.params.len() <= 5000);
        let batch = random_batch(seed, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = forward_loss(&net, &batch, true, &mut rng).unwrap();
        let g = backward(&net, &out.cache).unwrap();
        let r = finite_difference_check(&net, &g, &batch, 99, 1e-4);
        assert!(r.checked > r.skipped, "seed {seed}: {} checked, {} skipped", r.checked, r.skipped);
        assert!(r.max_rel_err < 1e-4, "seed {seed}: rel err {}", r.max_rel_err);
    }
}

#[test]
fn frozen_gate_still_propagates_through_gate_values() {
    let mut net = small_network(3);
    net.config.freeze_gate = true;
    let batch = random_batch(3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = forward_loss(&net, &batch, true, &mut rng).unwrap();
    let g = backward(&net, &out.cache).unwrap();
    assert!(g.layers.iter().all(|l| l.gate.iter().all(|&x| x == 0.0)));
    assert!(g.embedding.iter().any(|&x| x != 0.0));
}

#[test]
fn gradient_check_without_noise_or_balance() {
    for seed in 100..105 {
        let mut net = small_network(seed);
        net.config.gate_noise_std = 0.0;
        net.config.balance_loss_coeff = 0.0;
        let batch = random_batch(seed, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_loss(&net, &batch, false, &mut rng).unwrap();
        let g = backward(&net, &out.cache).unwrap();
        let r = finite_difference_check(&net, &g, &batch, 0, 1e-4);
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {}", r.max_rel_err);
    }
}

#[test]
fn default_network_is_untrained_uniform_predictor() {
    let net = MoENetwork::new(MoEConfig::default()).unwrap();
    let batch = random_batch(1, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_loss(&net, &batch, false, &mut rng).unwrap();
    assert!((out.task_loss - 64f64.ln()).abs() < 1e-12);
}
