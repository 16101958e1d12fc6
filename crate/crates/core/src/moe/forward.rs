//! Forward pass, next-token loss and the exact reverse pass.

use rand::Rng;

use super::network::{Expert, MoENetwork, Params};
use super::routing::{
    add_gate_noise, balance_loss, cv_squared_grad, gate_logits, gate_scores, softmax_in_place,
    top_k_into, top_k_route, BatchStats, RoutingRecord,
};
use crate::error::{Error, Result};

/// Right-padded token batch. Row `r` holds `lengths[r]` real tokens followed by
/// `pad_id` up to `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub width: usize,
    pub pad_id: u32,
}

impl PaddedBatch {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], pad_id: u32) -> Result<Self> {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(width * seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.contains(&pad_id) {
                return Err(Error::data("pad id inside a sequence"));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad_id, width - s.len()));
            lengths.push(s.len());
        }
        Ok(Self {
            ids,
            lengths,
            width,
            pad_id,
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|&l| l.saturating_sub(1)).sum()
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Writes the expert's hidden pre-activation into `pre` and its output into `out`.
fn expert_forward(ex: &Expert, x: &[f64], pre: &mut [f64], out: &mut [f64]) {
    let h = pre.len();
    pre.copy_from_slice(&ex.b1);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &ex.w1[i * h..(i + 1) * h];
        for (p, &w) in pre.iter_mut().zip(row) {
            *p += xi * w;
        }
    }
    let d = out.len();
    out.copy_from_slice(&ex.b2);
    for (j, &p) in pre.iter().enumerate() {
        let a = silu(p);
        let row = &ex.w2[j * d..(j + 1) * d];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += a * w;
        }
    }
}

/// Evaluates a single expert on one hidden vector.
pub fn expert_output(net: &MoENetwork, layer: usize, expert: usize, x: &[f64]) -> Vec<f64> {
    let ex = &net.params.layers[layer].experts[expert];
    let mut pre = vec![0.0; net.config.expert_hidden_dim];
    let mut out = vec![0.0; net.config.embed_dim];
    expert_forward(ex, x, &mut pre, &mut out);
    out
}

/// `Σ_{i∈I_K} G(x)_i · E_i(x)` for arbitrary expert functions.
pub fn combine_experts<F>(record: &RoutingRecord, dim: usize, mut expert: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Vec<f64>,
{
    let mut y = vec![0.0; dim];
    for (&e, &g) in record.selected.iter().zip(&record.selected_scores) {
        let out = expert(e);
        if out.len() != dim {
            return Err(Error::config(format!("expert {e} output has wrong length")));
        }
        for (acc, v) in y.iter_mut().zip(out) {
            *acc += g * v;
        }
    }
    Ok(y)
}

/// One MoE layer on one token: gate, route, aggregate.
pub fn moe_layer_forward<R: Rng + ?Sized>(
    net: &MoENetwork,
    hidden: &[f64],
    layer: usize,
    train_mode: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, RoutingRecord)> {
    let scores = gate_scores(net, hidden, layer, train_mode, rng)?;
    let selected = top_k_route(&scores, net.config.top_k)?;
    let record = RoutingRecord::new(scores, selected);
    let mut bad_expert = None;
    let y = combine_experts(&record, net.config.embed_dim, |e| {
        let out = expert_output(net, layer, e, hidden);
        if bad_expert.is_none() && out.iter().any(|v| !v.is_finite()) {
            bad_expert = Some(e);
        }
        out
    })?;
    if let Some(expert) = bad_expert {
        return Err(Error::NonFiniteExpert { layer, expert });
    }
    Ok((y, record))
}

/// Activations kept for the reverse pass. Token-major flat buffers.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    tokens: Vec<u32>,
    /// `u32::MAX` marks positions without a next-token target.
    targets: Vec<u32>,
    num_targets: usize,
    h_in: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    selected: Vec<Vec<u32>>,
    pre: Vec<Vec<f64>>,
    expert_out: Vec<Vec<f64>>,
    h_final: Vec<f64>,
    probs: Vec<f64>,
    importance: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Per-layer routing of token `t` (in row-major order over non-pad tokens).
    pub fn routing(&self, layer: usize, t: usize, k: usize) -> Vec<usize> {
        self.selected[layer][t * k..(t + 1) * k]
            .iter()
            .map(|&e| e as usize)
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub task_loss: f64,
    pub balance_losses: Vec<f64>,
    pub total_loss: f64,
    pub stats: Vec<BatchStats>,
    pub cache: ForwardCache,
}

/// Mean next-token cross-entropy over the batch plus the weighted per-layer
/// balance losses. Pad tokens are excluded from loss and statistics.
pub fn forward_loss<R: Rng + ?Sized>(
    net: &MoENetwork,
    batch: &PaddedBatch,
    train_mode: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let cfg = &net.config;
    let (d, n, k, hd, v, nl) = (
        cfg.embed_dim,
        cfg.num_experts,
        cfg.top_k,
        cfg.expert_hidden_dim,
        cfg.vocab_size,
        cfg.num_moe_layers,
    );
    let num_targets = batch.target_count();
    if num_targets == 0 {
        return Err(Error::data("batch has no next-token targets"));
    }
    let t_total = batch.non_pad_tokens();

    let mut tokens = Vec::with_capacity(t_total);
    let mut targets = Vec::with_capacity(t_total);
    for r in 0..batch.rows() {
        let row = batch.row(r);
        for (t, &tok) in row.iter().enumerate() {
            if tok as usize >= v {
                return Err(Error::data(format!("token id {tok} >= vocab size {v}")));
            }
            tokens.push(tok);
            targets.push(row.get(t + 1).copied().unwrap_or(u32::MAX));
        }
    }

    let mut cache = ForwardCache {
        version: net.version(),
        h_in: vec![vec![0.0; t_total * d]; nl],
        scores: vec![vec![0.0; t_total * n]; nl],
        selected: vec![vec![0; t_total * k]; nl],
        pre: vec![vec![0.0; t_total * k * hd]; nl],
        expert_out: vec![vec![0.0; t_total * k * d]; nl],
        h_final: vec![0.0; t_total * d],
        probs: vec![0.0; t_total * v],
        importance: Vec::new(),
        tokens,
        targets,
        num_targets,
    };
    let mut stats: Vec<BatchStats> = (0..nl).map(|_| BatchStats::new(n)).collect();

    let mut h = vec![0.0; d];
    let mut sel = Vec::with_capacity(k);
    let mut nll = 0.0;
    for t in 0..t_total {
        let tok = cache.tokens[t] as usize;
        h.copy_from_slice(&net.params.embedding[tok * d..(tok + 1) * d]);
        for l in 0..nl {
            cache.h_in[l][t * d..(t + 1) * d].copy_from_slice(&h);
            let s = &mut cache.scores[l][t * n..(t + 1) * n];
            gate_logits(net, &h, l, s);
            add_gate_noise(s, cfg.gate_noise_std, train_mode, rng);
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLayer {
                    layer: l,
                    what: format!("gate logits at token {t}"),
                });
            }
            softmax_in_place(s);
            top_k_into(s, k, &mut sel);
            stats[l].record(s, &sel);
            let layer = &net.params.layers[l];
            for (slot, &e) in sel.iter().enumerate() {
                cache.selected[l][t * k + slot] = e as u32;
                let pre = &mut cache.pre[l][(t * k + slot) * hd..(t * k + slot + 1) * hd];
                let out = &mut cache.expert_out[l][(t * k + slot) * d..(t * k + slot + 1) * d];
                expert_forward(&layer.experts[e], &cache.h_in[l][t * d..(t + 1) * d], pre, out);
                if out.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteExpert {
                        layer: l,
                        expert: e,
                    });
                }
                let g = cache.scores[l][t * n + e];
                for (hv, &o) in h.iter_mut().zip(out.iter()) {
                    *hv += g * o;
                }
            }
        }
        cache.h_final[t * d..(t + 1) * d].copy_from_slice(&h);
        let target = cache.targets[t];
        if target != u32::MAX {
            let p = &mut cache.probs[t * v..(t + 1) * v];
            p.iter_mut().for_each(|x| *x = 0.0);
            for (i, &hv) in h.iter().enumerate() {
                let row = &net.params.head[i * v..(i + 1) * v];
                for (pv, &w) in p.iter_mut().zip(row) {
                    *pv += hv * w;
                }
            }
            softmax_in_place(p);
            nll -= p[target as usize].ln();
        }
    }

    let task_loss = nll / num_targets as f64;
    let balance_losses = stats
        .iter()
        .map(balance_loss)
        .collect::<Result<Vec<f64>>>()?;
    let total_loss = task_loss + cfg.balance_loss_coeff * balance_losses.iter().sum::<f64>();
    cache.importance = stats.iter().map(|s| s.importance.clone()).collect();
    Ok(ForwardOutput {
        task_loss,
        balance_losses,
        total_loss,
        stats,
        cache,
    })
}

/// Exact gradient of `total_loss` for the batch that produced `cache`.
///
/// Routing index sets are constants of the forward pass; the selected gate
/// values and the importance term of the balance loss differentiate through the
/// softmax. The gate block stays zero when the gate is frozen.
pub fn backward(net: &MoENetwork, cache: &ForwardCache) -> Result<Params> {
    if cache.version != net.version() {
        return Err(Error::StaleCache {
            cache: cache.version,
            network: net.version(),
        });
    }
    let cfg = &net.config;
    let (d, n, k, hd, v, nl) = (
        cfg.embed_dim,
        cfg.num_experts,
        cfg.top_k,
        cfg.expert_hidden_dim,
        cfg.vocab_size,
        cfg.num_moe_layers,
    );
    let mut grads = Params::zeros(cfg);
    let bal_grads: Vec<Vec<f64>> = cache
        .importance
        .iter()
        .map(|imp| {
            if cfg.balance_loss_coeff > 0.0 {
                cv_squared_grad(imp)
                    .into_iter()
                    .map(|g| g * cfg.balance_loss_coeff)
                    .collect()
            } else {
                vec![0.0; n]
            }
        })
        .collect();
    let inv_targets = 1.0 / cache.num_targets as f64;

    let mut dh = vec![0.0; d];
    let mut dy = vec![0.0; d];
    let mut dlogits = vec![0.0; v];
    let mut ds = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dpre = vec![0.0; hd];

    for t in 0..cache.tokens.len() {
        dh.iter_mut().for_each(|x| *x = 0.0);
        let target = cache.targets[t];
        if target != u32::MAX {
            let p = &cache.probs[t * v..(t + 1) * v];
            for (dl, &pv) in dlogits.iter_mut().zip(p) {
                *dl = pv * inv_targets;
            }
            dlogits[target as usize] -= inv_targets;
            let hf = &cache.h_final[t * d..(t + 1) * d];
            for i in 0..d {
                let row = &net.params.head[i * v..(i + 1) * v];
                let grow = &mut grads.head[i * v..(i + 1) * v];
                let mut acc = 0.0;
                for ((g, &w), &dl) in grow.iter_mut().zip(row).zip(&dlogits) {
                    *g += hf[i] * dl;
                    acc += w * dl;
                }
                dh[i] = acc;
            }
        }

        for l in (0..nl).rev() {
            let h = &cache.h_in[l][t * d..(t + 1) * d];
            let s = &cache.scores[l][t * n..(t + 1) * n];
            dy.copy_from_slice(&dh);
            ds.copy_from_slice(&bal_grads[l]);
            let layer = &net.params.layers[l];
            let glayer = &mut grads.layers[l];
            for slot in 0..k {
                let e = cache.selected[l][t * k + slot] as usize;
                let idx = t * k + slot;
                let out = &cache.expert_out[l][idx * d..(idx + 1) * d];
                let pre = &cache.pre[l][idx * hd..(idx + 1) * hd];
                ds[e] += dy.iter().zip(out).map(|(a, b)| a * b).sum::<f64>();
                let g = s[e];
                let ex = &layer.experts[e];
                let gex = &mut glayer.experts[e];
                // output affine map
                for (gb, &dyv) in gex.b2.iter_mut().zip(&dy) {
                    *gb += g * dyv;
                }
                for j in 0..hd {
                    let a = silu(pre[j]);
                    let row = &ex.w2[j * d..(j + 1) * d];
                    let grow = &mut gex.w2[j * d..(j + 1) * d];
                    let mut da = 0.0;
                    for ((gw, &w), &dyv) in grow.iter_mut().zip(row).zip(&dy) {
                        let dout = g * dyv;
                        *gw += a * dout;
                        da += w * dout;
                    }
                    dpre[j] = da * silu_grad(pre[j]);
                }
                // input affine map
                for (gb, &dp) in gex.b1.iter_mut().zip(&dpre) {
                    *gb += dp;
                }
                for i in 0..d {
                    let row = &ex.w1[i * hd..(i + 1) * hd];
                    let grow = &mut gex.w1[i * hd..(i + 1) * hd];
                    let mut acc = 0.0;
                    for ((gw, &w), &dp) in grow.iter_mut().zip(row).zip(&dpre) {
                        *gw += h[i] * dp;
                        acc += w * dp;
                    }
                    dh[i] += acc;
                }
            }
            // softmax
            let sds: f64 = s.iter().zip(&ds).map(|(a, b)| a * b).sum();
            for ((z, &sv), &dsv) in dz.iter_mut().zip(s).zip(&ds) {
                *z = sv * (dsv - sds);
            }
            for i in 0..d {
                let row = &layer.gate[i * n..(i + 1) * n];
                if !cfg.freeze_gate {
                    let grow = &mut glayer.gate[i * n..(i + 1) * n];
                    for (gw, &z) in grow.iter_mut().zip(&dz) {
                        *gw += h[i] * z;
                    }
                }
                dh[i] += row.iter().zip(&dz).map(|(w, z)| w * z).sum::<f64>();
            }
        }

        let tok = cache.tokens[t] as usize;
        for (g, &x) in grads.embedding[tok * d..(tok + 1) * d].iter_mut().zip(&dh) {
            *g += x;
        }
    }
    Ok(grads)
}
