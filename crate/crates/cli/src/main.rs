use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use guardian_core::config::GuardianConfig;
use guardian_core::heal::IncidentReport;
use guardian_core::orchestrator::{self, replay, run_lifecycle, stabilize, RunManifest, RunStatus};
use guardian_core::perfmodel::{calibrate, evaluate_sla, ScalingCoefficients};
use guardian_core::sim::{Scenario, SimOptions};

const EXIT_INFEASIBLE: u8 = 3;
const EXIT_REPLAY_MISMATCH: u8 = 4;
const DEFAULT_SCENARIO: &str = "outage18h";

#[derive(Parser)]
#[command(name = "guardian", version, about = "Autonomous SRE engine for a simulated Elasticsearch-on-Kubernetes cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Bundled scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for artifacts.
    #[arg(long, env = "GUARDIAN_OUT_DIR")]
    out: Option<PathBuf>,
    /// Disable probe noise.
    #[arg(long)]
    zero_noise: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check the SLA target against the latency model; exits 3 when infeasible.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Deploy, stabilize and calibrate baselines.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full lifecycle against a scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// Incident memory file; defaults to <out>/incidents.jsonl.
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Override the scenario duration in simulated seconds.
        #[arg(long)]
        duration: Option<u64>,
    },
    /// Re-run a recorded run directory and verify the run log is identical.
    Replay { run_dir: PathBuf },
    /// Summarize the incident reports of a run directory.
    Report { run_dir: PathBuf },
    /// Print the metrics exposition of a run directory.
    Metrics { run_dir: PathBuf },
    /// List bundled scenarios.
    Scenarios,
}

fn load_config(common: &Common) -> Result<GuardianConfig> {
    let mut cfg = match &common.config {
        Some(p) => GuardianConfig::load(p)?,
        None => GuardianConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.scenario.is_some() {
        cfg.scenario = common.scenario.clone();
    }
    if common.out.is_some() {
        cfg.out_dir = common.out.clone();
    }
    cfg.zero_noise |= common.zero_noise;
    cfg.validate()?;
    Ok(cfg)
}

fn load_scenario(cfg: &GuardianConfig) -> Result<Scenario> {
    let name = cfg.scenario.as_deref().unwrap_or(DEFAULT_SCENARIO);
    if let Some(s) = Scenario::builtin(name) {
        return Ok(s);
    }
    Scenario::load(Path::new(name)).with_context(|| format!("loading scenario {name}"))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn evaluate(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let report = evaluate_sla(&cfg.sla, &ScalingCoefficients::default())?;
    print_json(&report)?;
    Ok(if report.feasible { ExitCode::SUCCESS } else { ExitCode::from(EXIT_INFEASIBLE) })
}

fn calibrate_cmd(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let scenario = load_scenario(&cfg)?;
    let options = if cfg.zero_noise { SimOptions::zero_noise() } else { SimOptions::default() };
    let mut sim = scenario.instantiate(cfg.seed.unwrap_or(scenario.seed), options)?;
    stabilize(&mut sim, cfg.stabilize_timeout_s)?;
    let b = calibrate(&mut sim)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        b.save(&dir.join("baselines.json"))?;
    }
    println!("{}", b.to_json());
    Ok(ExitCode::SUCCESS)
}

fn run_cmd(common: &Common, memory: Option<PathBuf>, duration: Option<u64>) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if memory.is_some() {
        cfg.memory_path = memory;
    }
    let mut scenario = load_scenario(&cfg)?;
    if let Some(d) = duration {
        scenario.duration_s = d;
    }
    let a = run_lifecycle(cfg.clone(), scenario)?;
    if a.status == RunStatus::Halted {
        eprintln!(
            "SLA infeasible: predicted query {:.1} ms, write {:.1} ms",
            a.evaluation.predicted_query_ms, a.evaluation.predicted_write_ms
        );
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    }
    let health = a.final_state.as_ref().map(|s| s.health.to_string()).unwrap_or_default();
    println!("final health     {health}");
    println!("alerts           {}", a.alerts.len());
    println!("ai loop runs     {}", a.reports.len());
    println!("plans executed   {}", a.plan_executions.len());
    println!("memory records   {}", a.new_records.len());
    println!("max pending pods {}", a.observations.max_pending_pods);
    println!("run log sha256   {}", a.run_log_hash());
    for r in a.reports.iter().filter(|r| !r.actions.is_empty()) {
        println!("  [{}..{}] {}: {}", r.opened_at_s, r.closed_at_s, r.outcome.as_str(), r.summary);
    }
    if let Some(dir) = &cfg.out_dir {
        println!("artifacts        {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn replay_cmd(dir: &Path) -> Result<ExitCode> {
    let manifest = read_manifest(dir)?;
    let recorded: Vec<String> = std::fs::read_to_string(dir.join("run-log.jsonl"))
        .context("reading run-log.jsonl")?
        .lines()
        .map(str::to_string)
        .collect();
    let file_hash = orchestrator::run_log_hash(&recorded);
    let verdict = replay(&manifest)?;
    let ok = verdict.matches && file_hash == verdict.actual_sha256;
    println!("recorded {file_hash}");
    println!("replayed {}", verdict.actual_sha256);
    println!("{}", if ok { "replay OK: run log is byte-identical" } else { "replay MISMATCH" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_REPLAY_MISMATCH) })
}

fn report_cmd(dir: &Path) -> Result<ExitCode> {
    let rdir = dir.join("reports");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&rdir)
        .with_context(|| format!("reading {}", rdir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let r: IncidentReport = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
        if r.outcome.memory_outcome().is_none() {
            continue;
        }
        println!("{} [{}..{}] {}: {}", p.file_name().unwrap_or_default().to_string_lossy(), r.opened_at_s, r.closed_at_s, r.outcome.as_str(), r.summary);
        for (i, step) in r.causal_chain.iter().enumerate() {
            println!("  {:>2}. {:<14} {}", i + 1, step.tool, step.finding);
        }
        for f in &r.flags {
            println!("  flag: {f}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn metrics_cmd(dir: &Path) -> Result<ExitCode> {
    let p = dir.join("metrics.prom");
    if !p.exists() {
        bail!("{} not found", p.display());
    }
    print!("{}", std::fs::read_to_string(p)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Evaluate { common } => evaluate(&common),
        Command::Calibrate { common } => calibrate_cmd(&common),
        Command::Run { common, memory, duration } => run_cmd(&common, memory, duration),
        Command::Replay { run_dir } => replay_cmd(&run_dir),
        Command::Report { run_dir } => report_cmd(&run_dir),
        Command::Metrics { run_dir } => metrics_cmd(&run_dir),
        Command::Scenarios => {
            for n in Scenario::builtin_names() {
                println!("{n}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
