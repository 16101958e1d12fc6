//! Sparse mixture-of-experts network with top-K routing, a CV² balance loss and
//! hand-written reverse mode.
//!
//! The network is deliberately small: each token's embedding passes through a
//! stack of residual MoE layers (`h ← h + Σ_{i∈I_K} G(h)_i · E_i(h)`) and a
//! linear head predicts the next token. Scores are a full softmax over the
//! experts; the top K are used as-is without renormalization.

pub mod checkpoint;
mod forward;
mod network;
mod optim;
mod routing;

pub use forward::{
    backward, combine_experts, expert_output, forward_loss, moe_layer_forward, ForwardCache,
    ForwardOutput, PaddedBatch,
};
pub use network::{BlockKind, Expert, MoEConfig, MoELayer, MoENetwork, Params};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use routing::{
    balance_loss, cv_squared, gate_scores, softmax_in_place, top_k_route, BatchStats,
    RoutingRecord,
};
