//! `semnav` — run the bundled (or any) episode suite, ablation tables, or a served session.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semnav_core::apiserve::{Hub, ServeMode};
use semnav_core::harness::{
    aggregate, format_table, run_ablation_suite, run_suite, save_results_csv, Ablations, EpisodeMetrics, EpisodeOutcome,
    PlannerKind, RunConfig,
};
use semnav_core::llmgw::ModelEndpoint;
use semnav_core::perception::DetectorConfig;
use semnav_core::world::{bundled_suite_path, EpisodeSuite};

#[derive(Parser)]
#[command(name = "semnav", version, about = "Object-goal navigation with scene graphs and model planners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every episode of a suite and write per-episode results.
    Run(RunArgs),
    /// Full stack against each single-module ablation over several seeds.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerChoice {
    Oracle,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Human,
    Auto,
}

#[derive(Args)]
struct Common {
    /// Episode file; defaults to the bundled 16-episode suite.
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// Only run the named episode(s).
    #[arg(long = "episode")]
    only: Vec<String>,
    #[arg(long, value_enum, default_value = "oracle")]
    planner: PlannerChoice,
    /// Chat-completions base URL for --planner remote.
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    endpoint: String,
    #[arg(long, default_value = "gpt-4")]
    model: String,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    auth_env: String,
    /// Per-episode step cap.
    #[arg(long, default_value_t = 500)]
    steps: u32,
    /// Detector false-positive rate (expected spurious segments per frame).
    #[arg(long = "fp", default_value_t = 0.0)]
    false_positive: f64,
    /// Detector miss rate.
    #[arg(long = "fn", default_value_t = 0.0)]
    false_negative: f64,
    /// Oracle verifier flip probability.
    #[arg(long, default_value_t = 0.0)]
    verify_error: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    no_stm: bool,
    #[arg(long)]
    no_pruner: bool,
    #[arg(long)]
    no_captions: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Directory for per-episode traces, graph dumps and model transcripts.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Serve live state on this port and run episodes one at a time.
    #[arg(long)]
    serve: Option<u16>,
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeChoice,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Seeds 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_suite(c: &Common) -> Result<EpisodeSuite> {
    let path = c.episodes.clone().unwrap_or_else(bundled_suite_path);
    let mut suite = EpisodeSuite::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if !c.only.is_empty() {
        for name in &c.only {
            if suite.get(name).is_none() {
                bail!("no episode named '{name}' in {}", path.display());
            }
        }
        suite.episodes.retain(|(e, _)| c.only.contains(&e.name));
    }
    Ok(suite)
}

fn base_config(c: &Common) -> RunConfig {
    let planner = match c.planner {
        PlannerChoice::Oracle => PlannerKind::Oracle,
        PlannerChoice::Remote => PlannerKind::Remote(ModelEndpoint {
            base_url: c.endpoint.clone(),
            model: c.model.clone(),
            auth_env: Some(c.auth_env.clone()),
            ..ModelEndpoint::default()
        }),
    };
    let detector = if c.false_positive > 0.0 || c.false_negative > 0.0 {
        DetectorConfig {
            false_positive_rate: c.false_positive,
            miss_rate: c.false_negative,
            ..DetectorConfig::default()
        }
    } else {
        DetectorConfig::noise_free()
    };
    RunConfig {
        planner,
        detector,
        verify_error_rate: c.verify_error,
        step_budget: Some(c.steps),
        ..RunConfig::default()
    }
}

fn write_traces(dir: &Path, outcomes: &[EpisodeOutcome]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for o in outcomes {
        let name = &o.metrics.episode;
        std::fs::write(dir.join(format!("{name}.trace.json")), o.trace.to_json())?;
        o.graph.write_dump(&dir.join(format!("{name}.graph.jsonl")))?;
        if let Some(t) = o.transcript.as_ref().filter(|t| !t.is_empty()) {
            t.save(&dir.join(format!("{name}.transcript.jsonl")))?;
        }
    }
    Ok(())
}

fn run_served(suite: &EpisodeSuite, cfg: &RunConfig, port: u16, mode: ServeMode) -> Result<Vec<EpisodeOutcome>> {
    let rt = tokio::runtime::Runtime::new()?;
    let hub = Hub::new(mode, 1024);
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let server = rt.spawn(semnav_serve::serve(hub.clone(), addr));
    eprintln!("live state at http://{addr}/state, events at /events, decisions to POST /decision");
    let mut outcomes = Vec::new();
    for (spec, scene) in &suite.episodes {
        eprintln!("episode {} (target: {})", spec.name, spec.target_label);
        let handle = semnav_serve::spawn_episode(hub.clone(), spec.clone(), Arc::clone(scene), cfg.clone());
        let outcome = handle.join().map_err(|_| anyhow::anyhow!("episode thread panicked"))??;
        if server.is_finished() {
            bail!("server stopped unexpectedly");
        }
        outcomes.push(outcome);
    }
    server.abort();
    Ok(outcomes)
}

fn run(args: RunArgs) -> Result<()> {
    let suite = load_suite(&args.common)?;
    let cfg = RunConfig {
        seed: args.seed,
        ..base_config(&args.common)
    }
    .with_ablations(Ablations {
        no_stm: args.no_stm,
        no_pruner: args.no_pruner,
        no_captions: args.no_captions,
    });
    let outcomes = match args.serve {
        Some(port) => {
            let mode = match args.mode {
                ModeChoice::Human => ServeMode::Human,
                ModeChoice::Auto => ServeMode::Auto,
            };
            run_served(&suite, &cfg, port, mode)?
        }
        None => run_suite(&suite, &cfg)?,
    };
    let metrics: Vec<EpisodeMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    save_results_csv(&args.out, &metrics)?;
    if let Some(dir) = &args.trace_dir {
        write_traces(dir, &outcomes)?;
    }
    let (sr, spl) = aggregate(&metrics)?;
    print!("{}", format_table(&[("run".to_string(), sr, spl)]));
    eprintln!("{} episodes -> {}", metrics.len(), args.out.display());
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let suite = load_suite(&args.common)?;
    let cfg = base_config(&args.common);
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let rows = run_ablation_suite(&suite, &cfg, &seeds)?;
    let table: Vec<(String, f64, f64)> = rows.iter().map(|r| (r.name.clone(), r.sr, r.spl)).collect();
    print!("{}", format_table(&table));
    if let Some(path) = &args.out {
        let mut text = String::from("method,sr,spl,episodes\n");
        for r in &rows {
            text.push_str(&format!("{},{:.6},{:.6},{}\n", r.name, r.sr, r.spl, r.episodes));
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
    }
}
