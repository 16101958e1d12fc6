use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and training switches of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoEConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden_dim: usize,
    pub num_moe_layers: usize,
    pub gate_noise_std: f64,
    pub balance_loss_coeff: f64,
    pub freeze_gate: bool,
    pub seed: u64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 16,
            num_experts: 16,
            top_k: 2,
            expert_hidden_dim: 16,
            num_moe_layers: 1,
            gate_noise_std: 0.1,
            balance_loss_coeff: 0.01,
            freeze_gate: true,
            seed: 0,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("num_moe_layers", self.num_moe_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "top_k ({}) exceeds num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        if !(self.gate_noise_std >= 0.0 && self.gate_noise_std.is_finite()) {
            return Err(Error::config("gate_noise_std must be finite and >= 0"));
        }
        if !(self.balance_loss_coeff >= 0.0 && self.balance_loss_coeff.is_finite()) {
            return Err(Error::config("balance_loss_coeff must be finite and >= 0"));
        }
        Ok(())
    }

    /// Total number of trainable scalars (gate included).
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.expert_hidden_dim;
        let expert = d * h + h + h * d + d;
        let layer = d * self.num_experts + self.num_experts * expert;
        2 * self.vocab_size * d + self.num_moe_layers * layer
    }
}

/// One feed-forward expert: `w2ᵀ silu(w1ᵀ x + b1) + b2`.
///
/// `w1` is `embed_dim × hidden` and `w2` is `hidden × embed_dim`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Expert {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w1: vec![0.0; d * h],
            b1: vec![0.0; h],
            w2: vec![0.0; h * d],
            b2: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    /// `embed_dim × num_experts`, row-major.
    pub gate: Vec<f64>,
    pub experts: Vec<Expert>,
}

/// All trainable tensors. Gradients reuse the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab_size × embed_dim`
    pub embedding: Vec<f64>,
    pub layers: Vec<MoELayer>,
    /// `embed_dim × vocab_size`
    pub head: Vec<f64>,
}

/// Identifies a parameter block in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Embedding,
    Gate { layer: usize },
    ExpertW1 { layer: usize, expert: usize },
    ExpertB1 { layer: usize, expert: usize },
    ExpertW2 { layer: usize, expert: usize },
    ExpertB2 { layer: usize, expert: usize },
    Head,
}

impl BlockKind {
    pub fn name(&self) -> String {
        match *self {
            BlockKind::Embedding => "embedding".into(),
            BlockKind::Gate { layer } => format!("layer{layer}.gate"),
            BlockKind::ExpertW1 { layer, expert } => format!("layer{layer}.expert{expert}.w1"),
            BlockKind::ExpertB1 { layer, expert } => format!("layer{layer}.expert{expert}.b1"),
            BlockKind::ExpertW2 { layer, expert } => format!("layer{layer}.expert{expert}.w2"),
            BlockKind::ExpertB2 { layer, expert } => format!("layer{layer}.expert{expert}.b2"),
            BlockKind::Head => "head".into(),
        }
    }

    pub fn is_gate(&self) -> bool {
        matches!(self, BlockKind::Gate { .. })
    }
}

impl Params {
    pub fn zeros(cfg: &MoEConfig) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.expert_hidden_dim;
        Self {
            embedding: vec![0.0; cfg.vocab_size * d],
            layers: (0..cfg.num_moe_layers)
                .map(|_| MoELayer {
                    gate: vec![0.0; d * cfg.num_experts],
                    experts: (0..cfg.num_experts).map(|_| Expert::zeros(d, h)).collect(),
                })
                .collect(),
            head: vec![0.0; d * cfg.vocab_size],
        }
    }

    /// Blocks in declaration order: embedding, then per layer the gate followed by
    /// each expert's `w1, b1, w2, b2`, then the output head.
    pub fn blocks(&self) -> Vec<(BlockKind, &[f64])> {
        let mut out: Vec<(BlockKind, &[f64])> = vec![(BlockKind::Embedding, &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((BlockKind::Gate { layer: l }, &layer.gate));
            for (e, ex) in layer.experts.iter().enumerate() {
                out.push((BlockKind::ExpertW1 { layer: l, expert: e }, &ex.w1));
                out.push((BlockKind::ExpertB1 { layer: l, expert: e }, &ex.b1));
                out.push((BlockKind::ExpertW2 { layer: l, expert: e }, &ex.w2));
                out.push((BlockKind::ExpertB2 { layer: l, expert: e }, &ex.b2));
            }
        }
        out.push((BlockKind::Head, &self.head));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(BlockKind, &mut [f64])> {
        let mut out: Vec<(BlockKind, &mut [f64])> =
            vec![(BlockKind::Embedding, &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((BlockKind::Gate { layer: l }, &mut layer.gate));
            for (e, ex) in layer.experts.iter_mut().enumerate() {
                out.push((BlockKind::ExpertW1 { layer: l, expert: e }, &mut ex.w1));
                out.push((BlockKind::ExpertB1 { layer: l, expert: e }, &mut ex.b1));
                out.push((BlockKind::ExpertW2 { layer: l, expert: e }, &mut ex.w2));
                out.push((BlockKind::ExpertB2 { layer: l, expert: e }, &mut ex.b2));
            }
        }
        out.push((BlockKind::Head, &mut self.head));
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for (_, b) in self.blocks() {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, b) in self.blocks_mut() {
            b.copy_from_slice(&flat[off..off + b.len()]);
            off += b.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// The full model: token embedding, a stack of residual MoE layers and a
/// linear output head.
#[derive(Debug, Clone)]
pub struct MoENetwork {
    pub config: MoEConfig,
    pub params: Params,
    version: u64,
}

impl MoENetwork {
    /// Random initialization from `config.seed`. The output head starts at zero so
    /// an untrained network predicts the uniform distribution.
    pub fn new(config: MoEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::zeros(&config);
        let d = config.embed_dim as f64;
        let h = config.expert_hidden_dim as f64;
        let mut fill = |buf: &mut [f64], std: f64| {
            for v in buf.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * std;
            }
        };
        fill(&mut params.embedding, 1.0);
        for layer in params.layers.iter_mut() {
            fill(&mut layer.gate, 1.0 / d.sqrt());
            for ex in layer.experts.iter_mut() {
                fill(&mut ex.w1, 1.0 / d.sqrt());
                fill(&mut ex.w2, 0.5 / h.sqrt());
            }
        }
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    pub fn from_params(config: MoEConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        let shapes_match = expected
            .blocks()
            .iter()
            .zip(params.blocks().iter())
            .all(|((_, a), (_, b))| a.len() == b.len())
            && expected.blocks().len() == params.blocks().len();
        if !shapes_match {
            return Err(Error::config("parameter shapes do not match config"));
        }
        if !params.all_finite() {
            return Err(Error::config("parameters contain non-finite values"));
        }
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    /// Monotone counter bumped on every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    /// Overwrite flat parameters in declaration order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.params_mut().load_flat(flat)
    }
}
