//! Gate scoring, top-K selection and the load statistics derived from routing.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::MoENetwork;
use crate::error::{Error, Result};

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Raw gate logits `hiddenᵀ · gate` for one layer.
pub(crate) fn gate_logits(net: &MoENetwork, hidden: &[f64], layer: usize, out: &mut [f64]) {
    let n = net.config.num_experts;
    let gate = &net.params.layers[layer].gate;
    out.iter_mut().for_each(|v| *v = 0.0);
    for (i, &h) in hidden.iter().enumerate() {
        let row = &gate[i * n..(i + 1) * n];
        for (o, &g) in out.iter_mut().zip(row) {
            *o += h * g;
        }
    }
}

/// Routing distribution `G(x)` over the experts of `layer`.
///
/// Gaussian noise scaled by `gate_noise_std` is added to the logits only when
/// `train_mode` is set.
pub fn gate_scores<R: Rng + ?Sized>(
    net: &MoENetwork,
    hidden: &[f64],
    layer: usize,
    train_mode: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if layer >= net.config.num_moe_layers {
        return Err(Error::config(format!(
            "layer {layer} out of range ({} layers)",
            net.config.num_moe_layers
        )));
    }
    if hidden.len() != net.config.embed_dim {
        return Err(Error::config(format!(
            "hidden has length {}, expected {}",
            hidden.len(),
            net.config.embed_dim
        )));
    }
    if hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLayer {
            layer,
            what: "gate input".into(),
        });
    }
    let mut scores = vec![0.0; net.config.num_experts];
    gate_logits(net, hidden, layer, &mut scores);
    add_gate_noise(&mut scores, net.config.gate_noise_std, train_mode, rng);
    softmax_in_place(&mut scores);
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLayer {
            layer,
            what: "gate scores".into(),
        });
    }
    Ok(scores)
}

pub(crate) fn add_gate_noise<R: Rng + ?Sized>(
    logits: &mut [f64],
    std: f64,
    train_mode: bool,
    rng: &mut R,
) {
    if train_mode && std > 0.0 {
        for v in logits.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
}

/// Indices of the `k` largest scores in descending order; ties go to the lower
/// index.
pub fn top_k_route(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::config(format!(
            "top_k must be in 1..={}, got {k}",
            scores.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    top_k_into(scores, k, &mut out);
    Ok(out)
}

/// Allocation-free variant used on the hot path. Assumes `1 <= k <= len`.
pub(crate) fn top_k_into(scores: &[f64], k: usize, out: &mut Vec<usize>) {
    out.clear();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if out.contains(&i) {
                continue;
            }
            // strict comparison keeps the lower index on ties
            match best {
                Some(b) if scores[b] >= s => {}
                _ => best = Some(i),
            }
        }
        out.push(best.expect("k <= len"));
    }
}

/// Routing decision for a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub selected_scores: Vec<f64>,
}

impl RoutingRecord {
    pub fn new(scores: Vec<f64>, selected: Vec<usize>) -> Self {
        let selected_scores = selected.iter().map(|&i| scores[i]).collect();
        Self {
            selected,
            scores,
            selected_scores,
        }
    }
}

/// Importance (summed scores) and gate load (dispatch counts) over a token set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub importance: Vec<f64>,
    pub gate_load: Vec<u64>,
    pub non_pad_tokens: usize,
}

impl BatchStats {
    pub fn new(num_experts: usize) -> Self {
        Self {
            importance: vec![0.0; num_experts],
            gate_load: vec![0; num_experts],
            non_pad_tokens: 0,
        }
    }

    pub fn record(&mut self, scores: &[f64], selected: &[usize]) {
        for (acc, &s) in self.importance.iter_mut().zip(scores) {
            *acc += s;
        }
        for &i in selected {
            self.gate_load[i] += 1;
        }
        self.non_pad_tokens += 1;
    }

    pub fn merge(&mut self, other: &BatchStats) {
        for (a, b) in self.importance.iter_mut().zip(&other.importance) {
            *a += b;
        }
        for (a, b) in self.gate_load.iter_mut().zip(&other.gate_load) {
            *a += b;
        }
        self.non_pad_tokens += other.non_pad_tokens;
    }

    pub fn gate_load_f64(&self) -> Vec<f64> {
        self.gate_load.iter().map(|&c| c as f64).collect()
    }
}

/// Squared coefficient of variation, `(σ/μ)²` with the population deviation.
/// An all-zero vector yields 0.
pub fn cv_squared(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::data("cv_squared of an empty vector"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// Gradient of [`cv_squared`] with respect to each entry.
pub(crate) fn cv_squared_grad(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return vec![0.0; v.len()];
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter()
        .map(|x| 2.0 * (x - mean) / (n * mean * mean) - 2.0 * var / (n * mean * mean * mean))
        .collect()
}

/// `CV(importance)² + CV(gate_load)²`.
pub fn balance_loss(stats: &BatchStats) -> Result<f64> {
    Ok(cv_squared(&stats.importance)? + cv_squared(&stats.gate_load_f64())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::network::MoEConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(n: usize) -> MoENetwork {
        MoENetwork::new(MoEConfig {
            num_experts: n,
            top_k: 1,
            embed_dim: 2,
            gate_noise_std: 0.0,
            ..MoEConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_gate_gives_uniform_scores() {
        let mut n = net(4);
        n.params_mut().layers[0].gate.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = gate_scores(&n, &[0.3, -2.0], 0, false, &mut rng).unwrap();
        for v in s {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_two_logits() {
        // logits [2, 0]: gate picks out hidden[0] for expert 0
        let mut n = net(2);
        n.params_mut().layers[0].gate = vec![1.0, 0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = gate_scores(&n, &[2.0, 5.0], 0, false, &mut rng).unwrap();
        let e2 = 2.0f64.exp();
        assert!((s[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn noise_free_train_mode_matches_eval() {
        let n = MoENetwork::new(MoEConfig {
            gate_noise_std: 0.0,
            ..MoEConfig::default()
        })
        .unwrap();
        let h: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = gate_scores(&n, &h, 0, true, &mut r1).unwrap();
        let b = gate_scores(&n, &h, 0, false, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_only_in_train_mode() {
        let n = MoENetwork::new(MoEConfig {
            gate_noise_std: 1.0,
            ..MoEConfig::default()
        })
        .unwrap();
        let h = vec![0.5; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = gate_scores(&n, &h, 0, false, &mut rng).unwrap();
        let noisy = gate_scores(&n, &h, 0, true, &mut rng).unwrap();
        assert_ne!(clean, noisy);
        assert!((noisy.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_hidden_reports_layer() {
        let n = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = gate_scores(&n, &[f64::NAN, 0.0], 0, false, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLayer { layer: 0, .. }));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_route(&[0.1, 0.6, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_route(&[0.25; 4], 1).unwrap(), vec![0]);
        assert_eq!(
            top_k_route(&[0.2, 0.3, 0.2, 0.3], 4).unwrap(),
            vec![1, 3, 0, 2]
        );
        assert!(matches!(top_k_route(&[0.5, 0.5], 3), Err(Error::Config(_))));
    }

    #[test]
    fn cv_squared_examples() {
        assert_eq!(cv_squared(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cv_squared(&[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cv_squared(&[3.0, 1.0, 1.0, 3.0]).unwrap(), 0.25);
        assert_eq!(cv_squared(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(cv_squared(&[]).is_err());
    }

    #[test]
    fn balance_loss_examples() {
        let balanced = BatchStats {
            importance: vec![2.5; 4],
            gate_load: vec![5; 4],
            non_pad_tokens: 10,
        };
        assert_eq!(balance_loss(&balanced).unwrap(), 0.0);
        let skewed = BatchStats {
            importance: vec![2.0, 0.0],
            gate_load: vec![2, 0],
            non_pad_tokens: 2,
        };
        assert_eq!(balance_loss(&skewed).unwrap(), 2.0);
        let mixed = BatchStats {
            importance: vec![2.0; 4],
            gate_load: vec![3, 1, 1, 3],
            non_pad_tokens: 4,
        };
        assert_eq!(balance_loss(&mixed).unwrap(), 0.25);
    }

    #[test]
    fn cv_grad_matches_finite_difference() {
        let v = [0.7, 2.1, 1.3, 0.2];
        let g = cv_squared_grad(&v);
        for i in 0..v.len() {
            let mut p = v;
            let mut m = v;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (cv_squared(&p).unwrap() - cv_squared(&m).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_full_sort(
            scores in prop::collection::vec(0.0f64..1.0, 1..12),
            k_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
            let got = top_k_route(&scores, k).unwrap();
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(&got[..], &idx[..k]);
        }

        #[test]
        fn balance_loss_zero_iff_constant(
            imp in prop::collection::vec(0.01f64..5.0, 2..6),
            load in prop::collection::vec(0u64..20, 2..6),
        ) {
            let n = imp.len().min(load.len());
            let stats = BatchStats {
                importance: imp[..n].to_vec(),
                gate_load: load[..n].to_vec(),
                non_pad_tokens: 1,
            };
            let constant = imp[..n].iter().all(|&x| x == imp[0])
                && load[..n].iter().all(|&x| x == load[0]);
            let loss = balance_loss(&stats).unwrap();
            prop_assert!(loss >= 0.0);
            if constant { prop_assert_eq!(loss, 0.0); } else { prop_assert!(loss > 0.0); }
        }
    }
}
