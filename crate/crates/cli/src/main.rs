use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use chrono::DateTime;
use clap::{Args, Parser, Subcommand, ValueEnum};

use madeval::clock::{Clock, ManualClock, SystemClock};
use madeval::config::{CompetitionConfig, MetricKind};
use madeval::jsonl;
use madeval::pipeline::{Pipeline, Stage};
use madeval::pool::{evolve, load_seeds, pool_stats, EvolveConfig, GrowthPolicy, TemplateSet};
use madeval::provider::{generator_for, TextGenerator};
use madeval::rating::leaderboard;
use madeval::selector::{SetAggregation, Strategy};
use madeval::{ModelId, RatingTable, Scenario};

#[derive(Parser)]
#[command(name = "madeval", version, about = "Pairwise model competitions on maximum-discrepancy instructions")]
struct Cli {
    /// Competition config (TOML).
    #[arg(long, global = true, default_value = "competition.toml")]
    config: PathBuf,
    /// Directory holding the competition state.
    #[arg(long, global = true, default_value = "state")]
    state: PathBuf,
    /// Read time from a fixed clock so repeated runs write identical files.
    #[arg(long, global = true)]
    fixed_clock: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Embedding,
    Judge,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pick {
    Mad,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregate {
    Max,
    Mean,
}

/// Settings that override the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    metric: Option<Metric>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<Pick>,
    #[arg(long, global = true, value_enum)]
    aggregation: Option<Aggregate>,
    /// Seed for everything seeded (selection, bootstrap, evolution, simulation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    s0: Option<f64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Grow an instruction pool from seed instructions.
    Pool(PoolArgs),
    /// Create the competition (if needed) and collect model responses.
    Respond,
    /// Select top-K instructions for every model pair.
    Select,
    /// Serve annotation tasks over HTTP.
    Serve(ServeArgs),
    /// Judge every open task with simulated annotators.
    JudgeSim,
    /// Compute bootstrapped Elo ratings.
    Rank,
    /// Add a configured model to a rated competition.
    AddModel {
        id: String,
        /// Judge the new tasks with simulated annotators and re-rank.
        #[arg(long)]
        simulate: bool,
    },
    /// Write leaderboard, win matrix, selections and K sweep.
    Report,
    /// Run every stage; resumes from the last completed one.
    Run {
        /// Judge with simulated annotators instead of stopping for humans.
        #[arg(long)]
        simulate: bool,
    },
}

#[derive(Args)]
struct PoolArgs {
    /// Seed instructions (JSONL with `text` and optional `answer`).
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long)]
    scenario: String,
    /// Directory of evolution templates.
    #[arg(long, default_value = "templates")]
    templates: PathBuf,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 1)]
    children_per_parent: usize,
    /// Evolve from the whole pool each round instead of only the seeds.
    #[arg(long)]
    cumulative: bool,
    /// Comma-separated model ids from the config used as generators.
    #[arg(long, value_delimiter = ',', required = true)]
    generators: Vec<String>,
    #[arg(long, default_value = "pool.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Static annotation UI to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<CompetitionConfig> {
    let mut cfg = if cli.config.exists() {
        CompetitionConfig::load(&cli.config)?
    } else {
        // An existing competition carries its own snapshot.
        let snapshot = cli.state.join(madeval::pipeline::CONFIG);
        let text = std::fs::read_to_string(&snapshot)
            .with_context(|| format!("no config at {} and no competition in {}", cli.config.display(), cli.state.display()))?;
        serde_json::from_str(&text).with_context(|| snapshot.display().to_string())?
    };
    let o = &cli.overrides;
    if let Some(k) = o.k {
        cfg.selection.k = k;
    }
    if let Some(l) = o.lambda {
        cfg.selection.lambda = l;
    }
    if let Some(m) = o.metric {
        cfg.similarity.metric = match m {
            Metric::Embedding => MetricKind::Embedding,
            Metric::Judge => MetricKind::Judge,
        };
    }
    if let Some(s) = o.strategy {
        cfg.selection.strategy = match s {
            Pick::Mad => Strategy::Mad,
            Pick::Random => Strategy::Random,
        };
    }
    if let Some(a) = o.aggregation {
        cfg.selection.aggregation = match a {
            Aggregate::Max => SetAggregation::Max,
            Aggregate::Mean => SetAggregation::Mean,
        };
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
        cfg.selection.seed = seed;
        cfg.elo.seed = seed;
        cfg.simulation.seed = seed;
    }
    if let Some(v) = o.eta {
        cfg.elo.eta = v;
    }
    if let Some(v) = o.tau {
        cfg.elo.tau = v;
    }
    if let Some(v) = o.s0 {
        cfg.elo.s0 = v;
    }
    if let Some(v) = o.replicates {
        cfg.elo.replicates = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn clock(fixed: bool) -> Arc<dyn Clock> {
    if fixed {
        Arc::new(ManualClock::new(DateTime::UNIX_EPOCH))
    } else {
        Arc::new(SystemClock)
    }
}

fn print_table(p: &Pipeline, table: &RatingTable) {
    let names: HashMap<ModelId, String> = p
        .config()
        .models
        .iter()
        .map(|m| (m.model.id.clone(), m.model.display_name.clone()))
        .collect();
    print!("{}", leaderboard(table, &names));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::Pool(args) = &cli.command {
        return build_pool(&cfg, args);
    }
    let p = Pipeline::new(&cli.state, cfg).with_clock(clock(cli.fixed_clock));
    match cli.command {
        Command::Pool(_) => unreachable!(),
        Command::Respond => {
            p.init_from_config_or_existing()?;
            p.collect_responses()?;
            println!("{} responses in {}", p.responses()?.len(), p.path(madeval::pipeline::RESPONSES).display());
        }
        Command::Select => {
            let state = p.select()?;
            for (pair, why) in &state.selection_failures {
                eprintln!("warning: {pair}: {why}");
            }
            println!("{} pairs selected", p.selections()?.len());
        }
        Command::Serve(args) => {
            let state = p.enqueue()?;
            let mut queue = p.open_queue(Arc::new(SystemClock))?;
            let progress = queue.progress();
            println!(
                "{} tasks, {} judgments so far; listening on http://{}:{}",
                state.tasks, progress.judgments, args.bind, args.port
            );
            let shared = Arc::new(Mutex::new(queue));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(madeval::server::serve(shared, args.ui_dir, SocketAddr::new(args.bind, args.port)))?;
        }
        Command::JudgeSim => {
            p.enqueue()?;
            println!("{} simulated judgments added", p.simulate_judging()?);
        }
        Command::Rank => {
            let table = p.rank()?;
            print_table(&p, &table);
        }
        Command::AddModel { id, simulate } => match p.add_model(&ModelId::from(id.as_str()), simulate)? {
            Some(table) => print_table(&p, &table),
            None => {
                let state = p.state()?.expect("state exists after add-model");
                let add = state.pending_addition.expect("addition pending");
                println!("{} new tasks for `{}` (ids from {})", add.tasks, add.model, add.first_task);
            }
        },
        Command::Report => {
            for f in p.report()? {
                println!("{}", f.display());
            }
        }
        Command::Run { simulate } => match p.run(simulate)? {
            Some(table) => {
                print_table(&p, &table);
                p.report()?;
            }
            None => {
                let stage = p.state()?.map(|s| s.stage);
                debug_assert_eq!(stage, Some(Stage::Judging));
                println!("tasks are ready; start `madeval serve` to collect judgments, then `madeval rank`");
            }
        },
    }
    Ok(())
}

fn build_pool(cfg: &CompetitionConfig, args: &PoolArgs) -> Result<()> {
    let scenario = Scenario::from(args.scenario.as_str());
    let seeds = load_seeds(&args.seeds, &scenario)?;
    for e in &seeds.line_errors {
        eprintln!("warning: skipped line {}: {}", e.line, e.message);
    }
    if seeds.instructions.is_empty() {
        bail!("{} holds no usable seed instructions", args.seeds.display());
    }
    let templates = TemplateSet::load_dir(&args.templates)?;
    let generators: Vec<Arc<dyn TextGenerator>> = args
        .generators
        .iter()
        .map(|id| {
            let m = cfg
                .model(&ModelId::from(id.as_str()))
                .with_context(|| format!("generator `{id}` is not a configured model"))?;
            Ok(Arc::from(generator_for(m)?))
        })
        .collect::<Result<_>>()?;
    let evolve_cfg = EvolveConfig {
        rounds: args.rounds,
        children_per_parent: args.children_per_parent,
        growth: if args.cumulative {
            GrowthPolicy::Cumulative
        } else {
            GrowthPolicy::SeedsOnly
        },
        seed: cfg.seed,
        ..EvolveConfig::default()
    };
    let (pool, log) = evolve(&seeds.instructions, &templates, &generators, &evolve_cfg)?;
    jsonl::write(&args.out, None, &pool)?;
    jsonl::write(&sibling(&args.out, "evolution.jsonl"), None, &log.records)?;
    if !log.dropped.is_empty() {
        jsonl::write(&sibling(&args.out, "dropped.jsonl"), None, &log.dropped)?;
    }
    println!("{}", serde_json::to_string_pretty(&pool_stats(&pool, Some(&log)))?);
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pool");
    path.with_file_name(format!("{stem}.{suffix}"))
}
