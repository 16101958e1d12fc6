//! Dataset-level gate loads and the distance quantities derived from them.
//!
//! A dataset's gate load is the per-expert count of routed tokens over its
//! probe split at one MoE layer. Rows are normalized to unit sum, then pairwise
//! Euclidean distances `δ` and per-dataset mean distances `Δ` are computed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{forward_loss, BatchStats, MoENetwork, PaddedBatch};

/// Probe split of one dataset, already batched.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub name: String,
    pub batches: Vec<PaddedBatch>,
}

/// Gate-load counts, one row per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLoadMatrix {
    pub names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Non-pad probe tokens per dataset; absent when loaded from a trace.
    pub probe_token_counts: Option<Vec<usize>>,
}

impl GateLoadMatrix {
    pub fn num_datasets(&self) -> usize {
        self.counts.len()
    }

    pub fn num_experts(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Checks `row_sum == top_k × tokens` for every dataset.
    pub fn conserves(&self, top_k: usize) -> bool {
        match &self.probe_token_counts {
            Some(tokens) => self
                .counts
                .iter()
                .zip(tokens)
                .all(|(row, &t)| row.iter().sum::<u64>() == (top_k * t) as u64),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGateLoads {
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    /// Pairwise distances, symmetric with zero diagonal.
    pub delta: Vec<Vec<f64>>,
    /// `avg[i] = Σ_j delta[i][j] / |D|`
    pub avg: Vec<f64>,
}

/// Per-dataset result of one evaluation-mode pass over a probe split.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    /// Statistics for every MoE layer.
    pub layer_stats: Vec<BatchStats>,
    pub nll_sum: f64,
    pub targets: usize,
}

impl ProbeOutcome {
    pub fn mean_loss(&self) -> f64 {
        self.nll_sum / self.targets as f64
    }
}

/// Runs the network in evaluation mode (no gate noise) over every probe split.
/// Datasets are processed in parallel; results are ordered by dataset index.
pub fn probe_datasets(net: &MoENetwork, probes: &[ProbeSet]) -> Result<Vec<ProbeOutcome>> {
    probes
        .par_iter()
        .map(|p| {
            if p.batches.is_empty() || p.batches.iter().all(|b| b.non_pad_tokens() == 0) {
                return Err(Error::data(format!("probe set for `{}` is empty", p.name)));
            }
            // eval mode never draws from this rng
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut layer_stats: Vec<BatchStats> = (0..net.config.num_moe_layers)
                .map(|_| BatchStats::new(net.config.num_experts))
                .collect();
            let mut nll_sum = 0.0;
            let mut targets = 0;
            for b in &p.batches {
                let out = forward_loss(net, b, false, &mut rng)?;
                for (acc, s) in layer_stats.iter_mut().zip(&out.stats) {
                    acc.merge(s);
                }
                let t = b.target_count();
                nll_sum += out.task_loss * t as f64;
                targets += t;
            }
            Ok(ProbeOutcome {
                layer_stats,
                nll_sum,
                targets,
            })
        })
        .collect()
}

/// Gate loads of `layer` assembled from probe outcomes.
pub fn gate_loads_from_outcomes(
    probes: &[ProbeSet],
    outcomes: &[ProbeOutcome],
    layer: usize,
) -> GateLoadMatrix {
    GateLoadMatrix {
        names: probes.iter().map(|p| p.name.clone()).collect(),
        counts: outcomes
            .iter()
            .map(|o| o.layer_stats[layer].gate_load.clone())
            .collect(),
        probe_token_counts: Some(
            outcomes
                .iter()
                .map(|o| o.layer_stats[layer].non_pad_tokens)
                .collect(),
        ),
    }
}

/// Gate loads at `layer` (normally the last MoE layer).
pub fn probe_gate_loads(
    net: &MoENetwork,
    probes: &[ProbeSet],
    layer: usize,
) -> Result<GateLoadMatrix> {
    if layer >= net.config.num_moe_layers {
        return Err(Error::config(format!("probe layer {layer} out of range")));
    }
    let outcomes = probe_datasets(net, probes)?;
    Ok(gate_loads_from_outcomes(probes, &outcomes, layer))
}

/// Divides each row by its own sum.
pub fn normalize_rows(o: &GateLoadMatrix) -> Result<NormalizedGateLoads> {
    let rows = o
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                let name = o.names.get(i).map_or("?", String::as_str);
                return Err(Error::data(format!(
                    "gate-load row for `{name}` sums to zero (empty probe)"
                )));
            }
            Ok(row.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(NormalizedGateLoads { rows })
}

fn pairwise_summary(rows: &[Vec<f64>]) -> DistanceSummary {
    let nd = rows.len();
    let mut delta = vec![vec![0.0; nd]; nd];
    for i in 0..nd {
        for j in (i + 1)..nd {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            delta[i][j] = d;
            delta[j][i] = d;
        }
    }
    let avg = delta
        .iter()
        .map(|row| row.iter().sum::<f64>() / nd as f64)
        .collect();
    DistanceSummary { delta, avg }
}

pub fn distance_summary(o_hat: &NormalizedGateLoads) -> DistanceSummary {
    pairwise_summary(&o_hat.rows)
}

/// The same distance arithmetic applied to dataset embedding rows.
pub fn embedding_distance_summary(embeddings: &[Vec<f64>]) -> DistanceSummary {
    pairwise_summary(embeddings)
}

/// Convenience: counts → `Δ`.
pub fn gate_load_deltas(o: &GateLoadMatrix) -> Result<DistanceSummary> {
    Ok(distance_summary(&normalize_rows(o)?))
}

/// One round of a gate-load trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRound {
    pub round: usize,
    pub loads: GateLoadMatrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    round: usize,
    dataset: String,
    expert: usize,
    count: u64,
}

/// Writes `round,dataset,expert,count` rows.
pub fn write_gate_load_trace(path: &Path, rounds: &[TraceRound]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rounds {
        for (name, row) in r.loads.names.iter().zip(&r.loads.counts) {
            for (expert, &count) in row.iter().enumerate() {
                w.serialize(TraceRow {
                    round: r.round,
                    dataset: name.clone(),
                    expert,
                    count,
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a gate-load trace. Rounds must be contiguous and every round must
/// cover the same datasets and experts.
pub fn read_gate_load_trace(path: &Path) -> Result<Vec<TraceRound>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_gate_load_trace(file, path)
}

pub fn parse_gate_load_trace<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<TraceRound>> {
    let trace_err = |line: usize, msg: String| Error::Trace {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::Reader::from_reader(input);
    // round -> dataset order + (dataset -> expert -> count)
    let mut rounds: BTreeMap<usize, (Vec<String>, BTreeMap<String, BTreeMap<usize, u64>>)> =
        BTreeMap::new();
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = rec.map_err(|e| trace_err(line, format!("malformed row: {e}")))?;
        let entry = rounds.entry(row.round).or_default();
        if !entry.1.contains_key(&row.dataset) {
            entry.0.push(row.dataset.clone());
        }
        let experts = entry.1.entry(row.dataset).or_default();
        if experts.insert(row.expert, row.count).is_some() {
            return Err(trace_err(line, "duplicate (round, dataset, expert)".into()));
        }
    }
    let mut out = Vec::with_capacity(rounds.len());
    let mut expected_round = None;
    let mut shape: Option<(Vec<String>, usize)> = None;
    for (round, (order, map)) in rounds {
        if let Some(exp) = expected_round {
            if round != exp {
                return Err(trace_err(0, format!("rounds not contiguous: expected {exp}, found {round}")));
            }
        }
        expected_round = Some(round + 1);
        let num_experts = map.values().map(|m| m.len()).max().unwrap_or(0);
        let mut counts = Vec::with_capacity(order.len());
        for name in &order {
            let m = &map[name];
            if m.len() != num_experts || m.keys().enumerate().any(|(i, &e)| i != e) {
                return Err(trace_err(0, format!("round {round}: dataset `{name}` has gaps in expert indices")));
            }
            counts.push(m.values().copied().collect());
        }
        match &shape {
            None => shape = Some((order.clone(), num_experts)),
            Some((names, ne)) => {
                if *names != order || *ne != num_experts {
                    return Err(trace_err(0, format!("round {round}: datasets or experts differ from earlier rounds")));
                }
            }
        }
        out.push(TraceRound {
            round,
            loads: GateLoadMatrix {
                names: order,
                counts,
                probe_token_counts: None,
            },
        });
    }
    if out.is_empty() {
        return Err(trace_err(1, "trace has no rows".into()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DistanceFile {
    schema_version: u32,
    rounds: BTreeMap<String, DistanceSummary>,
}

/// Distance summaries keyed by round number.
pub fn write_distance_json(path: &Path, rounds: &[(usize, DistanceSummary)]) -> Result<()> {
    let file = DistanceFile {
        schema_version: 1,
        rounds: rounds
            .iter()
            .map(|(r, s)| (r.to_string(), s.clone()))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_distance_json(path: &Path) -> Result<Vec<(usize, DistanceSummary)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DistanceFile = serde_json::from_str(&text)?;
    let mut out = file
        .rounds
        .into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|r| (r, v))
                .map_err(|_| Error::data(format!("bad round key `{k}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|(r, _)| *r);
    Ok(out)
}
