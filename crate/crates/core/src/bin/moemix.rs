use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moemix::cli_io::{collect_report, gen_data, load_config, output_root, replay, write_report};
use moemix::scheduler::Policy;
use moemix::synth::Manifest;
use moemix::trainer::{run_refloss, run_sweep, run_training};
use moemix::{Error, Result};

/// Sparse MoE routing lab with gate-load driven data-mixture scheduling.
#[derive(Parser)]
#[command(name = "moemix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default: $MOEMIX_OUT, else ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `scheduler.eta=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora from a manifest into <out>/data.
    GenData {
        /// Manifest JSON; the default four-domain manifest when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        interval: Option<usize>,
    },
    /// Uniform reference run followed by the loss-gap run.
    Refloss {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        interval: Option<usize>,
    },
    /// Cross product of policies, seeds and intervals.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated policies.
        #[arg(long, value_delimiter = ',', default_value = "uniform,dynamic")]
        policy: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seed: Vec<u64>,
        /// Comma-separated evaluation intervals.
        #[arg(long, value_delimiter = ',', default_value = "100")]
        interval: Vec<usize>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Apply a scheduler to a gate-load trace without a model.
    Replay {
        /// gateloads.csv from a run.
        trace: PathBuf,
        /// Run config whose scheduler section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        interval: Option<usize>,
        /// Output trajectory CSV (default: rounds.replay.csv next to the trace).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consolidate summary.json of several runs into <out>.json and <out>.csv.
    Report {
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn overrides(run: &RunArgs, extra: &[(&str, Option<String>)]) -> Vec<String> {
    let mut o = run.overrides.clone();
    if let Some(s) = run.steps {
        o.push(format!("total_steps={s}"));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            o.push(format!("{k}={v}"));
        }
    }
    o
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut manifest = match config {
                Some(p) => Manifest::load(&p)?,
                None => Manifest::default(),
            };
            if let Some(s) = seed {
                manifest.seed = s;
            }
            let dir = output_root(out.as_deref()).join("data");
            let (m, c) = gen_data(&manifest, &dir)?;
            println!("wrote {} and {}", m.display(), c.display());
        }
        Command::Train {
            run,
            seed,
            policy,
            interval,
        } => {
            let o = overrides(
                &run,
                &[
                    ("seed", seed.map(|s| s.to_string())),
                    ("scheduler.policy", policy),
                    ("scheduler.interval", interval.map(|m| m.to_string())),
                ],
            );
            let mut cfg = load_config(run.config.as_deref(), &o)?;
            cfg.output_dir = Some(output_root(run.out.as_deref()));
            let rec = run_training(&cfg)?;
            for w in &rec.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: macro loss {:.5}, final weights {:?}",
                rec.run_dir.as_ref().map_or_else(String::new, |d| d.display().to_string()),
                rec.macro_loss(),
                rec.final_weights()
            );
        }
        Command::Refloss { run, seed, interval } => {
            let o = overrides(
                &run,
                &[
                    ("seed", seed.map(|s| s.to_string())),
                    ("scheduler.interval", interval.map(|m| m.to_string())),
                ],
            );
            let mut cfg = load_config(run.config.as_deref(), &o)?;
            cfg.output_dir = Some(output_root(run.out.as_deref()));
            let rec = run_refloss(&cfg)?;
            println!(
                "phase 1 macro {:.5}, phase 2 macro {:.5}, optimizer steps {}",
                rec.phase1.macro_loss(),
                rec.phase2.macro_loss(),
                rec.total_optimizer_steps()
            );
        }
        Command::Sweep {
            run,
            policy,
            seed,
            interval,
            jobs,
        } => {
            let mut cfg = load_config(run.config.as_deref(), &overrides(&run, &[]))?;
            let root = output_root(run.out.as_deref());
            cfg.output_dir = Some(root.clone());
            let policies = policy.iter().map(|p| Policy::parse(p)).collect::<Result<Vec<_>>>()?;
            let table = run_sweep(&cfg, &policies, &seed, &interval, jobs)?;
            std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            let json = root.join(format!("{}-sweep.json", cfg.run_id));
            std::fs::write(&json, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&json, e))?;
            table.write_csv(&root.join(format!("{}-sweep.csv", cfg.run_id)))?;
            let failed = table.cells.iter().filter(|c| c.error.is_some()).count();
            println!("{} cells, {failed} failed, table in {}", table.cells.len(), json.display());
        }
        Command::Replay {
            trace,
            config,
            overrides,
            policy,
            interval,
            out,
        } => {
            let mut o = overrides;
            if let Some(p) = policy {
                o.push(format!("scheduler.policy={p}"));
            }
            if let Some(m) = interval {
                o.push(format!("scheduler.interval={m}"));
            }
            let cfg = load_config(config.as_deref(), &o)?;
            let out = out.unwrap_or_else(|| trace.with_file_name("rounds.replay.csv"));
            let rounds = replay(&trace, &cfg.scheduler, &out)?;
            println!("replayed {} rounds into {}", rounds.len(), out.display());
        }
        Command::Report { run_dirs, out } => {
            let report = collect_report(&run_dirs);
            write_report(&report, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} runs, {} absent, report in {}",
                report.rows.len(),
                report.warnings.len(),
                out.with_extension("csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
