//! Sampling-weight policies over the dataset simplex.
//!
//! The dynamic rule is an exponentiated step on the log weights followed by
//! smoothing toward uniform:
//!
//! ```text
//! α  = softmax(log w + η Δ)
//! w' = (1 − c) α + c / |D|
//! w  = w' / Σ w'
//! ```
//!
//! Datasets whose gate loads sit far from the others (large `Δ_i`) gain weight.
//! Every other policy (static, random, sequential, loss-gap, inverse) shares the
//! same [`Scheduler`] driver so trajectories are logged in one format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating externally supplied simplices.
const SIMPLEX_INPUT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub w: Vec<f64>,
    pub round: usize,
}

impl SamplingWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            w: vec![1.0 / n as f64; n],
            round: 0,
        }
    }

    /// Normalizes a non-negative vector onto the simplex.
    pub fn from_simplex(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::config("weights must not be empty"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("weights must be finite and non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_INPUT_TOL {
            return Err(Error::config(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self {
            w: w.iter().map(|x| x / sum).collect(),
            round: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Uniform,
    Datasize,
    Random,
    Sequential,
    Refloss,
    Dynamic,
    /// Dynamic rule driven by dataset-embedding distances instead of gate loads.
    DynamicSentemb,
    /// Dynamic rule with `−Δ`: similar datasets gain weight.
    Inverse,
    FinalStatic,
    /// Dynamic rule, but `Δ` is frozen at the untrained network's gate loads.
    GateloadStatic,
    /// Replays a fixed weight sequence, one entry per round.
    Scripted,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Uniform => "uniform",
            Policy::Datasize => "datasize",
            Policy::Random => "random",
            Policy::Sequential => "sequential",
            Policy::Refloss => "refloss",
            Policy::Dynamic => "dynamic",
            Policy::DynamicSentemb => "dynamic_sentemb",
            Policy::Inverse => "inverse",
            Policy::FinalStatic => "final_static",
            Policy::GateloadStatic => "gateload_static",
            Policy::Scripted => "scripted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown policy `{s}`")))
    }

    pub fn is_static(&self) -> bool {
        matches!(self, Policy::Uniform | Policy::Datasize | Policy::FinalStatic)
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Starting point of the weight trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialWeights {
    /// `"uniform"` or `"sentemb"` (one dynamic step from uniform using
    /// dataset-embedding distances).
    Named(String),
    Explicit(Vec<f64>),
}

impl Default for InitialWeights {
    fn default() -> Self {
        InitialWeights::Named("uniform".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub eta: f64,
    pub c: f64,
    /// Evaluation interval `m` in optimizer steps.
    pub interval: usize,
    pub initial_weights: InitialWeights,
    pub seed: u64,
    /// Upper bound of the random policy's per-coordinate noise; `None` means
    /// `0.5 / |D|`.
    pub random_noise: Option<f64>,
    /// Held weights for `final_static`.
    pub final_weights: Option<Vec<f64>>,
    /// Per-round weights for `scripted`: entry 0 is used before the first
    /// update, entry `t` after update `t`.
    pub script: Option<Vec<Vec<f64>>>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Dynamic,
            eta: 10.0,
            c: 0.05,
            interval: 100,
            initial_weights: InitialWeights::default(),
            seed: 0,
            random_noise: None,
            final_weights: None,
            script: None,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.c) {
            return Err(Error::config(format!("c must be in [0, 1), got {}", self.c)));
        }
        if self.interval == 0 {
            return Err(Error::config("interval m must be >= 1"));
        }
        if let Some(rho) = self.random_noise {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(Error::config("random_noise must be >= 0"));
            }
        }
        if let InitialWeights::Named(name) = &self.initial_weights {
            if name != "uniform" && name != "sentemb" {
                return Err(Error::config(format!("unknown initial weights `{name}`")));
            }
        }
        Ok(())
    }
}

/// Per-dataset current and reference evaluation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossGap {
    pub current: f64,
    pub reference: f64,
}

impl LossGap {
    pub fn gap(&self) -> f64 {
        self.current - self.reference
    }
}

/// The dynamic update: exponentiated step on `log w`, then smoothing.
pub fn dynamic_update(
    w_prev: &SamplingWeights,
    delta: &[f64],
    eta: f64,
    c: f64,
) -> Result<SamplingWeights> {
    let n = w_prev.len();
    if n == 0 || delta.len() != n {
        return Err(Error::config(format!(
            "weights ({n}) and distances ({}) must have the same non-zero length",
            delta.len()
        )));
    }
    if let Some(i) = w_prev.w.iter().position(|&x| x <= 0.0) {
        return Err(Error::data(format!(
            "weight of dataset {i} is zero; log undefined (use c > 0)"
        )));
    }
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::data("non-finite distance"));
    }
    let mut alpha: Vec<f64> = w_prev
        .w
        .iter()
        .zip(delta)
        .map(|(w, d)| w.ln() + eta * d)
        .collect();
    crate::moe::softmax_in_place(&mut alpha);
    let smoothed: Vec<f64> = alpha
        .iter()
        .map(|a| (1.0 - c) * a + c / n as f64)
        .collect();
    let sum: f64 = smoothed.iter().sum();
    Ok(SamplingWeights {
        w: smoothed.iter().map(|x| x / sum).collect(),
        round: w_prev.round + 1,
    })
}

/// Dynamic update with `Δ_i = L_current,i − L_reference,i`.
pub fn refloss_update(
    w_prev: &SamplingWeights,
    gaps: &[LossGap],
    eta: f64,
    c: f64,
) -> Result<SamplingWeights> {
    let delta: Vec<f64> = gaps.iter().map(LossGap::gap).collect();
    dynamic_update(w_prev, &delta, eta, c)
}

/// Dynamic update with the sign of `Δ` reversed.
pub fn inverse_update(
    w_prev: &SamplingWeights,
    delta: &[f64],
    eta: f64,
    c: f64,
) -> Result<SamplingWeights> {
    let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
    dynamic_update(w_prev, &neg, eta, c)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StaticKind<'a> {
    Uniform,
    DataSize(&'a [usize]),
    FinalStatic(&'a [f64]),
}

pub fn static_policy(kind: StaticKind<'_>, num_datasets: usize) -> Result<SamplingWeights> {
    match kind {
        StaticKind::Uniform => Ok(SamplingWeights::uniform(num_datasets)),
        StaticKind::DataSize(sizes) => {
            if sizes.len() != num_datasets || sizes.contains(&0) {
                return Err(Error::config("datasize needs one positive size per dataset"));
            }
            let total: usize = sizes.iter().sum();
            Ok(SamplingWeights {
                w: sizes.iter().map(|&s| s as f64 / total as f64).collect(),
                round: 0,
            })
        }
        StaticKind::FinalStatic(w) => {
            if w.len() != num_datasets {
                return Err(Error::config("final_static weights have the wrong length"));
            }
            SamplingWeights::from_simplex(w.to_vec())
        }
    }
}

/// Uniform base plus i.i.d. `U[0, ρ]` noise per coordinate, renormalized.
pub fn random_policy<R: Rng + ?Sized>(num_datasets: usize, rho: f64, rng: &mut R) -> SamplingWeights {
    let base = 1.0 / num_datasets as f64;
    let raw: Vec<f64> = (0..num_datasets)
        .map(|_| {
            let noise = if rho > 0.0 { rng.random_range(0.0..=rho) } else { 0.0 };
            (base + noise).max(0.0)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    SamplingWeights {
        w: raw.iter().map(|x| x / sum).collect(),
        round: 0,
    }
}

/// One-hot on dataset `t mod |D|`.
pub fn sequential_policy(round: usize, num_datasets: usize) -> SamplingWeights {
    let mut w = vec![0.0; num_datasets];
    w[round % num_datasets] = 1.0;
    SamplingWeights { w, round }
}

/// Signals available at a round boundary.
#[derive(Debug, Clone, Default)]
pub struct RoundInputs<'a> {
    /// `Δ` from gate loads probed at this boundary.
    pub gate_delta: Option<&'a [f64]>,
    /// Per-dataset evaluation losses at this boundary.
    pub current_losses: Option<&'a [f64]>,
}

/// Side information some policies need, fixed for a whole run.
#[derive(Debug, Clone, Default)]
pub struct SchedulerContext {
    pub dataset_names: Vec<String>,
    pub dataset_sizes: Vec<usize>,
    /// `Δ` from dataset embeddings (SentEmb stand-in).
    pub embedding_delta: Option<Vec<f64>>,
    /// `Δ` from gate loads of the untrained network.
    pub initial_gate_delta: Option<Vec<f64>>,
    /// Final per-dataset losses of a completed uniform run.
    pub reference_losses: Option<Vec<f64>>,
}

/// Owns the current weights and applies one policy at every round boundary.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    ctx: SchedulerContext,
    weights: SamplingWeights,
    rng: ChaCha8Rng,
    warnings: Vec<String>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, ctx: SchedulerContext) -> Result<Self> {
        config.validate()?;
        let n = ctx.dataset_names.len();
        if n == 0 {
            return Err(Error::config("scheduler needs at least one dataset"));
        }
        let mut warnings = Vec::new();
        let uses_distances = matches!(
            config.policy,
            Policy::Dynamic | Policy::Inverse | Policy::DynamicSentemb | Policy::GateloadStatic
        );
        if uses_distances && n == 2 {
            let msg = "with two datasets both mean distances are equal; dynamic weights cannot change"
                .to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
        match config.policy {
            Policy::Refloss if ctx.reference_losses.is_none() => {
                return Err(Error::config(
                    "refloss needs reference losses: run the uniform phase first (run_refloss does both phases)",
                ));
            }
            Policy::DynamicSentemb if ctx.embedding_delta.is_none() => {
                return Err(Error::config("dynamic_sentemb needs dataset embedding distances"));
            }
            Policy::GateloadStatic if ctx.initial_gate_delta.is_none() => {
                return Err(Error::config("gateload_static needs initial gate-load distances"));
            }
            Policy::FinalStatic if config.final_weights.is_none() => {
                return Err(Error::config("final_static needs final_weights"));
            }
            Policy::Scripted if config.script.as_ref().is_none_or(|s| s.is_empty()) => {
                return Err(Error::config("scripted policy needs a non-empty script"));
            }
            Policy::Datasize if ctx.dataset_sizes.len() != n => {
                return Err(Error::config("datasize needs dataset sizes"));
            }
            _ => {}
        }
        let weights = Self::initial_weights(&config, &ctx, n)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            ctx,
            weights,
            rng,
            warnings,
        })
    }

    fn initial_weights(
        config: &SchedulerConfig,
        ctx: &SchedulerContext,
        n: usize,
    ) -> Result<SamplingWeights> {
        // policies whose weights are fixed by construction ignore initial_weights
        match config.policy {
            Policy::Uniform => return static_policy(StaticKind::Uniform, n),
            Policy::Datasize => return static_policy(StaticKind::DataSize(&ctx.dataset_sizes), n),
            Policy::FinalStatic => {
                let w = config.final_weights.as_deref().unwrap_or_default();
                return static_policy(StaticKind::FinalStatic(w), n);
            }
            Policy::Sequential => return Ok(sequential_policy(0, n)),
            Policy::Scripted => {
                let w = config.script.as_ref().expect("validated")[0].clone();
                if w.len() != n {
                    return Err(Error::config("script entries have the wrong length"));
                }
                return SamplingWeights::from_simplex(w);
            }
            _ => {}
        }
        match &config.initial_weights {
            InitialWeights::Named(name) if name == "uniform" => Ok(SamplingWeights::uniform(n)),
            InitialWeights::Named(_) => {
                let delta = ctx.embedding_delta.as_ref().ok_or_else(|| {
                    Error::config("sentemb initial weights need dataset embedding distances")
                })?;
                let mut w = dynamic_update(&SamplingWeights::uniform(n), delta, config.eta, config.c)?;
                w.round = 0;
                Ok(w)
            }
            InitialWeights::Explicit(w) => {
                if w.len() != n {
                    return Err(Error::config("initial weights have the wrong length"));
                }
                SamplingWeights::from_simplex(w.clone())
            }
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn weights(&self) -> &SamplingWeights {
        &self.weights
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn num_datasets(&self) -> usize {
        self.ctx.dataset_names.len()
    }

    /// Applies the policy for the next round. Returns the signal logged as `Δ`
    /// (gate-load distances for policies that consume none).
    pub fn update(&mut self, inputs: &RoundInputs<'_>) -> Result<Vec<f64>> {
        let n = self.num_datasets();
        let next_round = self.weights.round + 1;
        let gate_delta = || {
            inputs
                .gate_delta
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::data("policy needs gate-load distances this round"))
        };
        let (mut next, signal) = match self.config.policy {
            Policy::Dynamic => {
                let d = gate_delta()?;
                (dynamic_update(&self.weights, &d, self.config.eta, self.config.c)?, d)
            }
            Policy::Inverse => {
                let d = gate_delta()?;
                (inverse_update(&self.weights, &d, self.config.eta, self.config.c)?, d)
            }
            Policy::DynamicSentemb => {
                let d = self.ctx.embedding_delta.clone().expect("validated");
                (dynamic_update(&self.weights, &d, self.config.eta, self.config.c)?, d)
            }
            Policy::GateloadStatic => {
                let d = self.ctx.initial_gate_delta.clone().expect("validated");
                (dynamic_update(&self.weights, &d, self.config.eta, self.config.c)?, d)
            }
            Policy::Refloss => {
                let current = inputs
                    .current_losses
                    .ok_or_else(|| Error::data("refloss needs current evaluation losses"))?;
                let reference = self.ctx.reference_losses.as_ref().expect("validated");
                if current.len() != n || reference.len() != n {
                    return Err(Error::data("loss vectors have the wrong length"));
                }
                let gaps: Vec<LossGap> = current
                    .iter()
                    .zip(reference)
                    .map(|(&c, &r)| LossGap {
                        current: c,
                        reference: r,
                    })
                    .collect();
                let d = gaps.iter().map(LossGap::gap).collect();
                (refloss_update(&self.weights, &gaps, self.config.eta, self.config.c)?, d)
            }
            Policy::Uniform | Policy::Datasize | Policy::FinalStatic => {
                (self.weights.clone(), inputs.gate_delta.map(<[f64]>::to_vec).unwrap_or_default())
            }
            Policy::Random => {
                let rho = self.config.random_noise.unwrap_or(0.5 / n as f64);
                (
                    random_policy(n, rho, &mut self.rng),
                    inputs.gate_delta.map(<[f64]>::to_vec).unwrap_or_default(),
                )
            }
            Policy::Sequential => (
                sequential_policy(next_round, n),
                inputs.gate_delta.map(<[f64]>::to_vec).unwrap_or_default(),
            ),
            Policy::Scripted => {
                let script = self.config.script.as_ref().expect("validated");
                let w = script.get(next_round).ok_or_else(|| {
                    Error::config(format!("script has no entry for round {next_round}"))
                })?;
                (
                    SamplingWeights::from_simplex(w.clone())?,
                    inputs.gate_delta.map(<[f64]>::to_vec).unwrap_or_default(),
                )
            }
        };
        next.round = next_round;
        self.weights = next;
        Ok(signal)
    }
}

/// One logged row group: the weights in force after round `round`'s update.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundWeights {
    pub round: usize,
    pub step: usize,
    pub weights: Vec<f64>,
    pub signal: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    round: usize,
    step: usize,
    dataset_name: String,
    weight: f64,
    delta: f64,
    policy: String,
}

/// Writes `round,step,dataset_name,weight,delta,policy`. `delta` is empty-valued
/// (NaN) when the policy saw no signal.
pub fn write_weight_trajectory(
    path: &Path,
    names: &[String],
    policy: Policy,
    rounds: &[RoundWeights],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rounds {
        for (i, name) in names.iter().enumerate() {
            w.serialize(TrajectoryRow {
                round: r.round,
                step: r.step,
                dataset_name: name.clone(),
                weight: r.weights[i],
                delta: r.signal.get(i).copied().unwrap_or(f64::NAN),
                policy: policy.as_str().to_string(),
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a trajectory back as `(dataset names, policy, rounds)`.
pub fn read_weight_trajectory(path: &Path) -> Result<(Vec<String>, String, Vec<RoundWeights>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut names: Vec<String> = Vec::new();
    let mut policy = String::new();
    let mut rounds: Vec<RoundWeights> = Vec::new();
    for (i, rec) in rdr.deserialize::<TrajectoryRow>().enumerate() {
        let row = rec.map_err(|e| Error::Trace {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        policy = row.policy.clone();
        if rounds.last().is_none_or(|r| r.round != row.round) {
            rounds.push(RoundWeights {
                round: row.round,
                step: row.step,
                weights: Vec::new(),
                signal: Vec::new(),
            });
        }
        if rounds.len() == 1 {
            names.push(row.dataset_name.clone());
        }
        let cur = rounds.last_mut().expect("pushed");
        cur.weights.push(row.weight);
        cur.signal.push(row.delta);
    }
    Ok((names, policy, rounds))
}

/// Sum over rounds of `|w_t,i − w_{t−1},i|`, per dataset. `initial` is `w_0`.
pub fn path_total_variation(initial: &[f64], rounds: &[RoundWeights]) -> Vec<f64> {
    let mut tv = vec![0.0; initial.len()];
    let mut prev = initial.to_vec();
    for r in rounds {
        for (i, (a, b)) in r.weights.iter().zip(&prev).enumerate() {
            tv[i] += (a - b).abs();
        }
        prev.clone_from(&r.weights);
    }
    tv
}
