//! Command plumbing shared by the `moemix` binary and the examples: config
//! loading with dotted-key overrides, data generation, trace replay and
//! multi-run reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gate_stats::{distance_summary, normalize_rows, read_gate_load_trace, TraceRound};
use crate::scheduler::{
    write_weight_trajectory, Policy, RoundInputs, RoundWeights, Scheduler, SchedulerConfig,
    SchedulerContext,
};
use crate::synth::{generate_all, write_corpus_jsonl, Manifest};
use crate::trainer::{write_json, RunConfig, RunSummary};

pub const OUTPUT_ENV: &str = "MOEMIX_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Output root: an explicit flag, else `$MOEMIX_OUT`, else `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT_ROOT),
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` (dot-separated, array elements by index) to `raw`, parsed as JSON
/// when possible and as a string otherwise. The key must already exist.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::config(format!("unknown config key `{key}` (at `{part}`)")))?,
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(format!("`{key}`: `{part}` is not an index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(format!("`{key}`: index {idx} out of range ({len})")))?
            }
            _ => return Err(Error::config(format!("`{key}`: `{part}` descends into a scalar"))),
        };
    }
    *cur = parse_scalar(raw);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))
}

/// Reads a config file (or the defaults) and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for o in overrides {
        let (k, v) = parse_assignment(o)?;
        apply_override(&mut value, k, v)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `manifest.json` and `corpus.jsonl` into `out_dir`.
pub fn gen_data(manifest: &Manifest, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let set = generate_all(manifest)?;
    let mpath = out_dir.join("manifest.json");
    let cpath = out_dir.join("corpus.jsonl");
    manifest.save(&mpath)?;
    write_corpus_jsonl(&cpath, &set)?;
    Ok((mpath, cpath))
}

/// Applies a scheduler to a gate-load trace without a model. Round 0 (when
/// present) is the pre-training probe and only seeds `gateload_static`; every
/// later round triggers one update. Output step indices are `round · m`.
pub fn replay_trace(trace: &[TraceRound], config: &SchedulerConfig) -> Result<(Vec<String>, Vec<RoundWeights>)> {
    let first = trace.first().ok_or_else(|| Error::data("empty gate-load trace"))?;
    match config.policy {
        Policy::Refloss | Policy::DynamicSentemb | Policy::Datasize => {
            return Err(Error::config(format!(
                "policy {} needs inputs a gate-load trace does not carry",
                config.policy
            )));
        }
        _ => {}
    }
    let names = first.loads.names.clone();
    let deltas = trace
        .iter()
        .map(|r| {
            normalize_rows(&r.loads)
                .map(|n| distance_summary(&n).avg)
                .map_err(|e| Error::data(format!("round {}: {e}", r.round)))
        })
        .collect::<Result<Vec<_>>>()?;
    let ctx = SchedulerContext {
        dataset_names: names.clone(),
        initial_gate_delta: Some(deltas[0].clone()),
        ..SchedulerContext::default()
    };
    let mut sched = Scheduler::new(config.clone(), ctx)?;
    let mut out = Vec::new();
    for (r, delta) in trace.iter().zip(&deltas) {
        if r.round == 0 {
            continue;
        }
        let signal = sched.update(&RoundInputs {
            gate_delta: Some(delta),
            current_losses: None,
        })?;
        out.push(RoundWeights {
            round: r.round,
            step: r.round * config.interval,
            weights: sched.weights().w.clone(),
            signal,
        });
    }
    Ok((names, out))
}

/// Replays `trace_path` and writes a rounds.csv-format trajectory to `out_path`.
pub fn replay(trace_path: &Path, config: &SchedulerConfig, out_path: &Path) -> Result<Vec<RoundWeights>> {
    let trace = read_gate_load_trace(trace_path)?;
    let (names, rounds) = replay_trace(&trace, config)?;
    write_weight_trajectory(out_path, &names, config.policy, &rounds)?;
    Ok(rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_dir: PathBuf,
    /// `None` when the directory had no readable summary.json.
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

/// Collects summary.json of each run directory. Unreadable runs become absent
/// rows with a warning.
pub fn collect_report(run_dirs: &[PathBuf]) -> Report {
    let mut warnings = Vec::new();
    let rows = run_dirs
        .iter()
        .map(|dir| {
            let path = dir.join("summary.json");
            let summary = std::fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<RunSummary>(&t).map_err(|e| e.to_string()));
            match summary {
                Ok(s) => ReportRow {
                    run_dir: dir.clone(),
                    summary: Some(s),
                },
                Err(e) => {
                    warnings.push(format!("{}: {e}", path.display()));
                    ReportRow {
                        run_dir: dir.clone(),
                        summary: None,
                    }
                }
            }
        })
        .collect();
    Report {
        schema_version: 1,
        rows,
        warnings,
    }
}

/// Writes `<out>.json` and a tidy `<out>.csv` (one row per run and dataset).
pub fn write_report(report: &Report, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_json(&out.with_extension("json"), report)?;
    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "run_dir",
        "run_id",
        "policy",
        "seed",
        "interval",
        "status",
        "dataset",
        "final_loss",
        "final_weight",
        "weight_total_variation",
        "macro_loss",
        "mean_total_variation",
    ])?;
    for row in &report.rows {
        let dir = row.run_dir.display().to_string();
        match &row.summary {
            None => w.write_record([dir.as_str(), "", "", "", "", "absent", "", "", "", "", "", ""])?,
            Some(s) => {
                for (i, name) in s.dataset_names.iter().enumerate() {
                    w.write_record([
                        dir.clone(),
                        s.run_id.clone(),
                        s.policy.to_string(),
                        s.seed.to_string(),
                        s.interval.to_string(),
                        "ok".into(),
                        name.clone(),
                        s.final_losses[i].to_string(),
                        s.final_weights[i].to_string(),
                        s.weight_total_variation[i].to_string(),
                        s.macro_loss.to_string(),
                        s.mean_total_variation.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}
