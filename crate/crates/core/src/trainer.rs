//! Training loop, per-dataset evaluation, the two-phase loss-gap protocol and
//! multi-seed sweeps.
//!
//! A run of `total_steps` optimizer steps is split into rounds of `m` steps.
//! Round `t` samples batches with `w_{t-1}`; at its end the network is probed
//! on every dataset's probe split (gate loads and losses in one pass), the
//! scheduler produces `w_t`, and `w_t` is logged as round `t`. The untrained
//! network is probed once more before the first step and stored as round 0 of
//! the gate-load trace.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate_stats::{
    embedding_distance_summary, gate_load_deltas, gate_loads_from_outcomes, probe_datasets,
    write_distance_json, write_gate_load_trace, DistanceSummary, GateLoadMatrix, ProbeSet,
    TraceRound,
};
use crate::moe::{
    backward, checkpoint, cv_squared, forward_loss, AdamW, AdamWConfig, LrSchedule, MoEConfig,
    MoENetwork,
};
use crate::scheduler::{
    path_total_variation, write_weight_trajectory, InitialWeights, Policy, RoundInputs,
    RoundWeights, Scheduler, SchedulerConfig, SchedulerContext,
};
use crate::synth::{
    dataset_embedding, fixed_batches, generate_all, read_corpus_jsonl, sample_batch, CorpusSet,
    Manifest,
};

pub const RUN_SCHEMA_VERSION: u32 = 1;

// rng substreams of the run seed
const STREAM_SAMPLER: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Manifest,
    /// Loaded instead of `manifest` when set.
    pub manifest_path: Option<PathBuf>,
    /// Pre-generated JSONL corpus; generated from the manifest when absent.
    pub corpus_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: Manifest::default(),
            manifest_path: None,
            corpus_path: None,
        }
    }
}

impl DataConfig {
    pub fn resolve_manifest(&self) -> Result<Manifest> {
        match &self.manifest_path {
            Some(p) => Manifest::load(p),
            None => {
                self.manifest.validate()?;
                Ok(self.manifest.clone())
            }
        }
    }

    pub fn load(&self) -> Result<CorpusSet> {
        let manifest = self.resolve_manifest()?;
        match &self.corpus_path {
            Some(p) => read_corpus_jsonl(p, manifest.vocab_size),
            None => generate_all(&manifest),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub adamw: AdamWConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let lr = LrSchedule::default();
        Self {
            peak_lr: lr.peak_lr,
            min_lr: lr.min_lr,
            warmup_fraction: lr.warmup_fraction,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run_id: String,
    /// Master seed. Overrides `model.seed` and `scheduler.seed`.
    pub seed: u64,
    pub model: MoEConfig,
    pub scheduler: SchedulerConfig,
    pub data: DataConfig,
    pub total_steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Extra per-dataset evaluations every this many steps (0: rounds only).
    pub eval_every: usize,
    /// MoE layer whose gate loads are probed; `None` is the last layer.
    pub probe_layer: Option<usize>,
    pub probe_batch_size: usize,
    /// Bigram hash width of the dataset embeddings; `None` keeps all `V²` slots.
    pub embedding_hash_width: Option<usize>,
    /// Outputs go to `<output_dir>/<run_id>/` when set.
    pub output_dir: Option<PathBuf>,
    /// Reference losses for `refloss`, inline.
    pub reference_losses: Option<Vec<f64>>,
    /// Reference losses for `refloss`, from a phase-1 `reference_losses.json`.
    pub reference_losses_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            run_id: "run".into(),
            seed: 0,
            model: MoEConfig::default(),
            scheduler: SchedulerConfig::default(),
            data: DataConfig::default(),
            total_steps: 2000,
            batch_size: 32,
            optim: OptimConfig::default(),
            eval_every: 0,
            probe_layer: None,
            probe_batch_size: 128,
            embedding_hash_width: Some(1024),
            output_dir: None,
            reference_losses: None,
            reference_losses_path: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scheduler.validate()?;
        if self.batch_size == 0 || self.probe_batch_size == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.total_steps < self.scheduler.interval {
            return Err(Error::config(format!(
                "total_steps ({}) must be >= interval m ({})",
                self.total_steps, self.scheduler.interval
            )));
        }
        if let Some(l) = self.probe_layer {
            if l >= self.model.num_moe_layers {
                return Err(Error::config(format!("probe_layer {l} out of range")));
            }
        }
        if !(self.optim.peak_lr > 0.0 && self.optim.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.optim.warmup_fraction) {
            return Err(Error::config("warmup_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    /// Copy with derived fields filled in: seeds propagated from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = c.seed;
        c.scheduler.seed = c.seed;
        c
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.optim.peak_lr,
            min_lr: self.optim.min_lr,
            warmup_fraction: self.optim.warmup_fraction,
            total_steps: self.total_steps,
        }
    }

    pub fn num_rounds(&self) -> usize {
        self.total_steps / self.scheduler.interval
    }

    pub fn run_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|d| d.join(&self.run_id))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub schema_version: u32,
    /// 0-based optimizer step.
    pub step: usize,
    /// Round whose weights sampled this batch (1-based).
    pub round: usize,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    /// Per MoE layer.
    pub cv2_importance: Vec<f64>,
    pub cv2_load: Vec<f64>,
    pub gate_load: Vec<Vec<u64>>,
    pub non_pad_tokens: usize,
    /// Batch rows drawn from each dataset.
    pub dataset_counts: Vec<usize>,
}

/// Network state observed at a round boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub step: usize,
    pub gate_loads: GateLoadMatrix,
    pub distances: DistanceSummary,
    pub eval_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub step: usize,
    /// Weights produced by this round's update.
    pub weights: Vec<f64>,
    /// Signal the policy consumed (or gate-load `Δ` for policies that consume none).
    pub signal: Vec<f64>,
    pub probe: ProbeSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub dataset_names: Vec<String>,
    pub initial_weights: Vec<f64>,
    pub initial_probe: ProbeSnapshot,
    pub steps: Vec<StepMetrics>,
    pub rounds: Vec<RoundRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_losses: Vec<f64>,
    pub warnings: Vec<String>,
    pub optimizer_steps: u64,
    pub network: MoENetwork,
    pub run_dir: Option<PathBuf>,
}

impl RunRecord {
    pub fn final_weights(&self) -> &[f64] {
        self.rounds
            .last()
            .map(|r| r.weights.as_slice())
            .unwrap_or(&self.initial_weights)
    }

    pub fn macro_loss(&self) -> f64 {
        self.final_losses.iter().sum::<f64>() / self.final_losses.len() as f64
    }

    pub fn round_weights(&self) -> Vec<RoundWeights> {
        self.rounds
            .iter()
            .map(|r| RoundWeights {
                round: r.round,
                step: r.step,
                weights: r.weights.clone(),
                signal: r.signal.clone(),
            })
            .collect()
    }

    /// Total variation of each dataset's weight path.
    pub fn weight_total_variation(&self) -> Vec<f64> {
        path_total_variation(&self.initial_weights, &self.round_weights())
    }

    pub fn gate_load_trace(&self) -> Vec<TraceRound> {
        std::iter::once(TraceRound {
            round: 0,
            loads: self.initial_probe.gate_loads.clone(),
        })
        .chain(self.rounds.iter().map(|r| TraceRound {
            round: r.round,
            loads: r.probe.gate_loads.clone(),
        }))
        .collect()
    }

    pub fn summary(&self) -> RunSummary {
        let tv = self.weight_total_variation();
        RunSummary {
            schema_version: RUN_SCHEMA_VERSION,
            run_id: self.config.run_id.clone(),
            policy: self.config.scheduler.policy,
            seed: self.config.seed,
            interval: self.config.scheduler.interval,
            total_steps: self.config.total_steps,
            optimizer_steps: self.optimizer_steps,
            dataset_names: self.dataset_names.clone(),
            initial_losses: self.initial_probe.eval_losses.clone(),
            final_losses: self.final_losses.clone(),
            macro_loss: self.macro_loss(),
            final_weights: self.final_weights().to_vec(),
            mean_total_variation: tv.iter().sum::<f64>() / tv.len() as f64,
            weight_total_variation: tv,
            warnings: self.warnings.clone(),
        }
    }

    /// Writes config.json, metrics.jsonl, rounds.csv, gateloads.csv,
    /// distances.json, checkpoint.bin and summary.json into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), &self.config)?;
        let metrics = dir.join("metrics.jsonl");
        let mut text = String::new();
        for m in &self.steps {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        std::fs::write(&metrics, text).map_err(|e| Error::io(&metrics, e))?;
        write_weight_trajectory(
            &dir.join("rounds.csv"),
            &self.dataset_names,
            self.config.scheduler.policy,
            &self.round_weights(),
        )?;
        write_gate_load_trace(&dir.join("gateloads.csv"), &self.gate_load_trace())?;
        let distances: Vec<(usize, DistanceSummary)> = std::iter::once((0, self.initial_probe.distances.clone()))
            .chain(self.rounds.iter().map(|r| (r.round, r.probe.distances.clone())))
            .collect();
        write_distance_json(&dir.join("distances.json"), &distances)?;
        checkpoint::save(&self.network, &dir.join("checkpoint.bin"))?;
        write_json(&dir.join("summary.json"), &self.summary())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run_id: String,
    pub policy: Policy,
    pub seed: u64,
    pub interval: usize,
    pub total_steps: usize,
    pub optimizer_steps: u64,
    pub dataset_names: Vec<String>,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub macro_loss: f64,
    pub final_weights: Vec<f64>,
    pub weight_total_variation: Vec<f64>,
    pub mean_total_variation: f64,
    pub warnings: Vec<String>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Probe splits cut into fixed batches.
pub fn probe_sets(corpora: &CorpusSet, batch_size: usize) -> Result<Vec<ProbeSet>> {
    corpora
        .probe
        .iter()
        .map(|c| {
            Ok(ProbeSet {
                name: c.domain.clone(),
                batches: fixed_batches(c, batch_size)?,
            })
        })
        .collect()
}

/// Deterministic mean next-token cross-entropy per dataset.
pub fn evaluate_per_dataset(net: &MoENetwork, probes: &[ProbeSet]) -> Result<Vec<f64>> {
    Ok(probe_datasets(net, probes)?
        .iter()
        .map(|o| o.mean_loss())
        .collect())
}

fn probe_snapshot(net: &MoENetwork, probes: &[ProbeSet], layer: usize, step: usize) -> Result<ProbeSnapshot> {
    let outcomes = probe_datasets(net, probes)?;
    let gate_loads = gate_loads_from_outcomes(probes, &outcomes, layer);
    let distances = gate_load_deltas(&gate_loads)?;
    Ok(ProbeSnapshot {
        step,
        gate_loads,
        distances,
        eval_losses: outcomes.iter().map(|o| o.mean_loss()).collect(),
    })
}

/// `Δ` from dataset embeddings of the probe splits.
pub fn embedding_deltas(corpora: &CorpusSet, hash_width: Option<usize>) -> Result<DistanceSummary> {
    let embs = corpora
        .probe
        .iter()
        .map(|c| dataset_embedding(c, corpora.vocab_size, hash_width).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    Ok(embedding_distance_summary(&embs))
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceFile {
    schema_version: u32,
    dataset_names: Vec<String>,
    losses: Vec<f64>,
}

pub fn write_reference_losses(path: &Path, names: &[String], losses: &[f64]) -> Result<()> {
    write_json(
        path,
        &ReferenceFile {
            schema_version: RUN_SCHEMA_VERSION,
            dataset_names: names.to_vec(),
            losses: losses.to_vec(),
        },
    )
}

pub fn read_reference_losses(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(format!(
            "reference losses {} unreadable ({e}); run the uniform phase first",
            path.display()
        ))
    })?;
    let f: ReferenceFile = serde_json::from_str(&text)?;
    Ok((f.dataset_names, f.losses))
}

/// Generates or loads the corpora, then trains.
pub fn run_training(config: &RunConfig) -> Result<RunRecord> {
    let corpora = config.data.load()?;
    run_training_on(config, &corpora)
}

/// Trains on already-loaded corpora.
pub fn run_training_on(config: &RunConfig, corpora: &CorpusSet) -> Result<RunRecord> {
    let config = config.resolved();
    config.validate()?;
    if corpora.vocab_size != config.model.vocab_size {
        return Err(Error::config(format!(
            "corpus vocabulary {} differs from model vocabulary {}",
            corpora.vocab_size, config.model.vocab_size
        )));
    }
    let names = corpora.names();
    let m = config.scheduler.interval;
    let layer = config.probe_layer.unwrap_or(config.model.num_moe_layers - 1);
    let probes = probe_sets(corpora, config.probe_batch_size)?;

    let mut net = MoENetwork::new(config.model.clone())?;
    let mut opt = AdamW::new(&net, config.optim.adamw.clone());
    let lr = config.lr_schedule();
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sampler_rng.set_stream(STREAM_SAMPLER);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(STREAM_NOISE);

    let initial_probe = probe_snapshot(&net, &probes, layer, 0)?;
    let policy = config.scheduler.policy;
    let needs_embedding = policy == Policy::DynamicSentemb
        || matches!(&config.scheduler.initial_weights, InitialWeights::Named(n) if n == "sentemb");
    let reference_losses = match (&config.reference_losses, &config.reference_losses_path) {
        (Some(r), _) => Some(r.clone()),
        (None, Some(p)) => {
            let (ref_names, losses) = read_reference_losses(p)?;
            if ref_names != names {
                return Err(Error::config("reference losses were computed on different datasets"));
            }
            Some(losses)
        }
        (None, None) => None,
    };
    let ctx = SchedulerContext {
        dataset_names: names.clone(),
        dataset_sizes: corpora.train_sizes(),
        embedding_delta: if needs_embedding {
            Some(embedding_deltas(corpora, config.embedding_hash_width)?.avg)
        } else {
            None
        },
        initial_gate_delta: Some(initial_probe.distances.avg.clone()),
        reference_losses,
    };
    let mut scheduler = Scheduler::new(config.scheduler.clone(), ctx)?;
    let initial_weights = scheduler.weights().w.clone();

    let mut steps = Vec::with_capacity(config.total_steps);
    let mut rounds = Vec::with_capacity(config.num_rounds());
    let mut evals = vec![EvalRecord {
        step: 0,
        losses: initial_probe.eval_losses.clone(),
    }];
    for step in 0..config.total_steps {
        let sampled = sample_batch(scheduler.weights(), &corpora.train, config.batch_size, &mut sampler_rng)?;
        let out = forward_loss(&net, &sampled.batch, true, &mut noise_rng)?;
        if !out.total_loss.is_finite() {
            log::error!("non-finite loss at step {step}");
            return Err(Error::NanLoss { step });
        }
        let grads = backward(&net, &out.cache)?;
        let rate = lr.lr_at(step);
        opt.step(&mut net, &grads, rate)?;
        steps.push(StepMetrics {
            schema_version: RUN_SCHEMA_VERSION,
            step,
            round: step / m + 1,
            task_loss: out.task_loss,
            balance_loss: out.balance_losses.iter().sum(),
            total_loss: out.total_loss,
            lr: rate,
            cv2_importance: out.stats.iter().map(|s| cv_squared(&s.importance)).collect::<Result<_>>()?,
            cv2_load: out.stats.iter().map(|s| cv_squared(&s.gate_load_f64())).collect::<Result<_>>()?,
            gate_load: out.stats.iter().map(|s| s.gate_load.clone()).collect(),
            non_pad_tokens: sampled.batch.non_pad_tokens(),
            dataset_counts: sampled.counts(names.len()),
        });
        let done = step + 1;
        let at_round = done % m == 0;
        let at_eval = config.eval_every > 0 && done % config.eval_every == 0;
        if at_round {
            let probe = probe_snapshot(&net, &probes, layer, done)?;
            let signal = scheduler.update(&RoundInputs {
                gate_delta: Some(&probe.distances.avg),
                current_losses: Some(&probe.eval_losses),
            })?;
            log::debug!("round {} weights {:?}", done / m, scheduler.weights().w);
            if at_eval {
                evals.push(EvalRecord {
                    step: done,
                    losses: probe.eval_losses.clone(),
                });
            }
            rounds.push(RoundRecord {
                round: done / m,
                step: done,
                weights: scheduler.weights().w.clone(),
                signal,
                probe,
            });
        } else if at_eval {
            evals.push(EvalRecord {
                step: done,
                losses: evaluate_per_dataset(&net, &probes)?,
            });
        }
    }
    let final_losses = match rounds.last() {
        Some(r) if r.step == config.total_steps => r.probe.eval_losses.clone(),
        _ => evaluate_per_dataset(&net, &probes)?,
    };
    if evals.last().is_none_or(|e| e.step != config.total_steps) {
        evals.push(EvalRecord {
            step: config.total_steps,
            losses: final_losses.clone(),
        });
    }
    let record = RunRecord {
        run_dir: config.run_dir(),
        warnings: scheduler.warnings().to_vec(),
        optimizer_steps: opt.steps_taken(),
        config,
        dataset_names: names,
        initial_weights,
        initial_probe,
        steps,
        rounds,
        evals,
        final_losses,
        network: net,
    };
    if let Some(dir) = &record.run_dir {
        record.write(dir)?;
    }
    Ok(record)
}

/// Both phases of the loss-gap protocol.
#[derive(Debug, Clone)]
pub struct RefLossRecord {
    pub phase1: RunRecord,
    pub phase2: RunRecord,
    /// Reference losses exactly as phase 2 read them.
    pub reference: Vec<f64>,
}

impl RefLossRecord {
    pub fn total_optimizer_steps(&self) -> u64 {
        self.phase1.optimizer_steps + self.phase2.optimizer_steps
    }
}

/// Phase 1 trains with uniform weights and persists its final per-dataset
/// losses; phase 2 trains with the loss-gap policy against them.
pub fn run_refloss(config: &RunConfig) -> Result<RefLossRecord> {
    let corpora = config.data.load()?;
    run_refloss_on(config, &corpora)
}

pub fn run_refloss_on(config: &RunConfig, corpora: &CorpusSet) -> Result<RefLossRecord> {
    let mut p1 = config.clone();
    p1.run_id = format!("{}-phase1", config.run_id);
    p1.scheduler.policy = Policy::Uniform;
    p1.reference_losses = None;
    p1.reference_losses_path = None;
    let phase1 = run_training_on(&p1, corpora)?;

    let mut p2 = config.clone();
    p2.run_id = format!("{}-phase2", config.run_id);
    p2.scheduler.policy = Policy::Refloss;
    p2.reference_losses = None;
    let reference = match phase1.run_dir.as_ref() {
        Some(dir) => {
            let path = dir.join("reference_losses.json");
            write_reference_losses(&path, &phase1.dataset_names, &phase1.final_losses)?;
            p2.reference_losses_path = Some(path.clone());
            read_reference_losses(&path)?.1
        }
        None => {
            // same serialization as the on-disk file
            let text = serde_json::to_string(&phase1.final_losses)?;
            let r: Vec<f64> = serde_json::from_str(&text)?;
            p2.reference_losses = Some(r.clone());
            r
        }
    };
    let phase2 = run_training_on(&p2, corpora)?;
    Ok(RefLossRecord {
        phase1,
        phase2,
        reference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub policy: Policy,
    pub seed: u64,
    pub interval: usize,
    pub run_id: String,
    /// `None` when the run succeeded.
    pub error: Option<String>,
    pub final_losses: Vec<f64>,
    pub macro_loss: f64,
    pub final_weights: Vec<f64>,
    pub weight_total_variation: Vec<f64>,
    pub mean_total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub dataset_names: Vec<String>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, policy: Policy, seed: u64, interval: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.policy == policy && c.seed == seed && c.interval == interval)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["run_id", "policy", "seed", "interval", "status", "macro_loss", "mean_total_variation"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for n in &self.dataset_names {
            header.push(format!("loss_{n}"));
        }
        for n in &self.dataset_names {
            header.push(format!("weight_{n}"));
        }
        for n in &self.dataset_names {
            header.push(format!("tv_{n}"));
        }
        w.write_record(&header)?;
        for c in &self.cells {
            let mut row = vec![
                c.run_id.clone(),
                c.policy.to_string(),
                c.seed.to_string(),
                c.interval.to_string(),
                c.error.as_ref().map_or("ok".into(), |e| format!("failed: {e}")),
                c.macro_loss.to_string(),
                c.mean_total_variation.to_string(),
            ];
            for v in [&c.final_losses, &c.final_weights, &c.weight_total_variation] {
                if v.is_empty() {
                    row.extend(std::iter::repeat_n(String::new(), self.dataset_names.len()));
                } else {
                    row.extend(v.iter().map(|x| x.to_string()));
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Cross product of policies × seeds × intervals on shared corpora. Cells run
/// on up to `jobs` worker threads and a failed cell does not stop the others.
pub fn run_sweep(
    base: &RunConfig,
    policies: &[Policy],
    seeds: &[u64],
    intervals: &[usize],
    jobs: usize,
) -> Result<SweepTable> {
    if policies.is_empty() || seeds.is_empty() || intervals.is_empty() {
        return Err(Error::config("sweep lists must be non-empty"));
    }
    let corpora = base.data.load()?;
    let grid: Vec<(Policy, u64, usize)> = policies
        .iter()
        .flat_map(|&p| {
            seeds
                .iter()
                .flat_map(move |&s| intervals.iter().map(move |&m| (p, s, m)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        grid.par_iter()
            .map(|&(policy, seed, interval)| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.scheduler.policy = policy;
                cfg.scheduler.interval = interval;
                cfg.run_id = format!("{}-{policy}-m{interval}-s{seed}", base.run_id);
                let result = if policy == Policy::Refloss {
                    run_refloss_on(&cfg, &corpora).map(|r| r.phase2)
                } else {
                    run_training_on(&cfg, &corpora)
                };
                match result {
                    Ok(rec) => {
                        let s = rec.summary();
                        SweepCell {
                            policy,
                            seed,
                            interval,
                            run_id: cfg.run_id,
                            error: None,
                            final_losses: s.final_losses,
                            macro_loss: s.macro_loss,
                            final_weights: s.final_weights,
                            weight_total_variation: s.weight_total_variation,
                            mean_total_variation: s.mean_total_variation,
                        }
                    }
                    Err(e) => {
                        log::warn!("sweep cell {} failed: {e}", cfg.run_id);
                        SweepCell {
                            policy,
                            seed,
                            interval,
                            run_id: cfg.run_id,
                            error: Some(e.to_string()),
                            final_losses: vec![],
                            macro_loss: f64::NAN,
                            final_weights: vec![],
                            weight_total_variation: vec![],
                            mean_total_variation: f64::NAN,
                        }
                    }
                }
            })
            .collect()
    });
    Ok(SweepTable {
        schema_version: RUN_SCHEMA_VERSION,
        dataset_names: corpora.names(),
        cells,
    })
}
