#![allow(dead_code)]

use moemix::moe::{forward_loss, MoEConfig, MoENetwork, PaddedBatch, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

const LN2_HI: f64 = std::f64::consts::LN_2;
const LN2_LO: f64 = 2.319046813846299558e-17;

/// `exp` in double-double: `x = k·ln2 + r`, `r` scaled by 2^-10, Taylor
/// series, then squared back.
pub fn dd_exp(x: TwoFloat) -> TwoFloat {
    let ln2 = TwoFloat::new_add(LN2_HI, LN2_LO);
    let k = (f64::from(x) / LN2_HI).round();
    let r = (x - ln2 * k) / 1024.0;
    let mut term = TwoFloat::from(1.0);
    let mut sum = TwoFloat::from(1.0);
    for i in 1..30 {
        term = term * r / i as f64;
        sum += term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

/// `ln` in double-double by Newton steps on `exp(y) = x`.
pub fn dd_ln(x: TwoFloat) -> TwoFloat {
    let mut y = TwoFloat::from(f64::from(x).ln());
    for _ in 0..3 {
        y = y + x * dd_exp(-y) - 1.0;
    }
    y
}

/// Dynamic update in double-double arithmetic with plain loops.
pub fn dynamic_update_oracle(w: &[f64], delta: &[f64], eta: f64, c: f64) -> Vec<f64> {
    let n = w.len();
    let eta = TwoFloat::from(eta);
    let c = TwoFloat::from(c);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        logits.push(dd_ln(TwoFloat::from(w[i])) + eta * TwoFloat::from(delta[i]));
    }
    let mut max = logits[0];
    for l in &logits {
        if *l > max {
            max = *l;
        }
    }
    let mut e = Vec::with_capacity(n);
    let mut z = TwoFloat::from(0.0);
    for l in &logits {
        let v = dd_exp(*l - max);
        z += v;
        e.push(v);
    }
    let one = TwoFloat::from(1.0);
    let nn = TwoFloat::from(n as f64);
    let mut smoothed = Vec::with_capacity(n);
    let mut s = TwoFloat::from(0.0);
    for v in &e {
        let x = (one - c) * (*v / z) + c / nn;
        s += x;
        smoothed.push(x);
    }
    smoothed.iter().map(|x| f64::from(*x / s)).collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// Small network with every parameter drawn from N(0, 0.5²) so that no
/// gradient block is identically zero.
pub fn small_network(seed: u64) -> MoENetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_experts = rng.random_range(2..=4);
    let cfg = MoEConfig {
        vocab_size: 12,
        embed_dim: rng.random_range(3..=6),
        num_experts,
        top_k: rng.random_range(1..=num_experts),
        expert_hidden_dim: rng.random_range(3..=6),
        num_moe_layers: rng.random_range(1..=2),
        gate_noise_std: 0.3,
        balance_loss_coeff: 0.5,
        freeze_gate: false,
        seed,
    };
    let mut net = MoENetwork::new(cfg).unwrap();
    let flat: Vec<f64> = (0..net.params.len())
        .map(|_| 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    net.set_flat(&flat).unwrap();
    net
}

pub fn random_batch(seed: u64, vocab: u32) -> PaddedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbad5eed);
    let rows = rng.random_range(2..=4);
    let seqs: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            let len = rng.random_range(2..=7);
            (0..len).map(|_| rng.random_range(1..vocab)).collect()
        })
        .collect();
    PaddedBatch::from_sequences(&seqs, 0).unwrap()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn eval(net: &MoENetwork, batch: &PaddedBatch, noise_seed: u64) -> (f64, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let out = forward_loss(net, batch, true, &mut rng).unwrap();
    let k = net.config.top_k;
    let routes = (0..net.config.num_moe_layers)
        .map(|l| {
            (0..out.cache.token_count())
                .flat_map(|t| out.cache.routing(l, t, k))
                .collect()
        })
        .collect();
    (out.total_loss, routes)
}

/// Central differences with step `eps` on every coordinate. Coordinates whose
/// perturbation changes any routing decision are skipped: the loss is not
/// differentiable across a routing switch.
pub fn finite_difference_check(net: &MoENetwork, analytic: &Params, batch: &PaddedBatch, noise_seed: u64, eps: f64) -> GradCheck {
    let base = net.params.to_flat();
    let grad = analytic.to_flat();
    let (_, routes0) = eval(net, batch, noise_seed);
    let mut probe = net.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        probe.set_flat(&p).unwrap();
        let (fp, rp) = eval(&probe, batch, noise_seed);
        p[i] = base[i] - eps;
        probe.set_flat(&p).unwrap();
        let (fm, rm) = eval(&probe, batch, noise_seed);
        if rp != routes0 || rm != routes0 {
            out.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * eps);
        let a = grad[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        out.max_rel_err = out.max_rel_err.max(rel);
        out.checked += 1;
    }
    out
}

/// Three small domains over a 16-token vocabulary, A and B near-duplicates.
pub fn tiny_manifest() -> moemix::synth::Manifest {
    use moemix::synth::{Blend, DomainSpec, Manifest};
    let mut domains: Vec<DomainSpec> = [("A", 1), ("B", 2), ("C", 3)]
        .iter()
        .map(|&(n, s)| {
            let mut d = DomainSpec::new(n, s);
            d.sequence_length_range = [6, 12];
            d.train_size = 128;
            d.probe_size = 32;
            d
        })
        .collect();
    domains[1].blend = Some(Blend {
        with: "A".into(),
        lambda: 0.9,
    });
    Manifest {
        vocab_size: 16,
        domains,
        ..Manifest::default()
    }
}

/// A run over [`tiny_manifest`] that finishes in well under a second.
pub fn tiny_config() -> moemix::trainer::RunConfig {
    let mut cfg = moemix::trainer::RunConfig::default();
    cfg.run_id = "tiny".into();
    cfg.data.manifest = tiny_manifest();
    cfg.model = MoEConfig {
        vocab_size: 16,
        embed_dim: 8,
        num_experts: 4,
        top_k: 2,
        expert_hidden_dim: 8,
        ..MoEConfig::default()
    };
    cfg.total_steps = 120;
    cfg.batch_size = 8;
    cfg.scheduler.interval = 20;
    cfg.probe_batch_size = 32;
    cfg
}
