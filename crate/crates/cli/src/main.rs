mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pilot_whittle::sim::{ActiveReward, Dynamics, MyopicScore};
use serde::de::DeserializeOwned;

use config::{Config, GlobalArgs, GridArgs, InstanceArgs, KernelName, SystemArgs};

#[derive(Parser)]
#[command(name = "pilot-whittle", version, about = "Whittle index pilot allocation for Markov channels")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index table, per-state rewards and construction breakpoints of one user.
    Index {
        #[command(flatten)]
        instance: InstanceArgs,
        /// Cross-check against the brute-force envelope.
        #[arg(long = "check-envelope")]
        check_envelope: bool,
    },
    /// Average reward of every construction policy over a subsidy grid.
    Envelope {
        #[command(flatten)]
        instance: InstanceArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Solve the single-user subsidised problem over a subsidy grid.
    Solve {
        #[command(flatten)]
        instance: InstanceArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Discount factor; omit for the average-reward criterion.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum)]
        kernel: Option<KernelName>,
    },
    /// Upper and lower bounding models against the approximated problem.
    Bounds {
        #[command(flatten)]
        instance: InstanceArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Two-class fluid relaxation: fixed point, linearisation, trajectories.
    Fluid {
        #[command(flatten)]
        instance: InstanceArgs,
        /// Pilot budget as a fraction of the population.
        #[arg(long)]
        lambda: Option<f64>,
        /// Population share of the first class.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Random starting points near the fixed point.
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Monte Carlo comparison of allocation policies.
    Simulate {
        #[command(flatten)]
        instance: InstanceArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Exact gains of WIP, myopic and random against the optimum on random instances.
    Randsuite {
        #[command(flatten)]
        instance: InstanceArgs,
        #[command(flatten)]
        system: SystemArgs,
        /// Number of instances.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Args)]
struct SimArgs {
    /// Slots per replication.
    #[arg(long)]
    horizon: Option<usize>,
    /// Slots discarded before averaging; defaults to a tenth of the horizon.
    #[arg(long)]
    warmup: Option<usize>,
    /// Independent replications, each with its own random streams.
    #[arg(long)]
    replications: Option<usize>,
    /// original or approximated
    #[arg(long, value_parser = named::<Dynamics>)]
    dynamics: Option<Dynamics>,
    /// realized or mean
    #[arg(long = "active-reward", value_parser = named::<ActiveReward>)]
    active_reward: Option<ActiveReward>,
    /// gain or active
    #[arg(long, value_parser = named::<MyopicScore>)]
    myopic: Option<MyopicScore>,
    /// Comma separated subset of wip, myopic, random, rel, opt.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
}

fn named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

impl Command {
    fn flags(&self) -> Config {
        let none = Config::default();
        match self {
            Command::Index { instance, check_envelope } => Config {
                check_envelope: check_envelope.then_some(true),
                ..instance.config()
            },
            Command::Envelope { instance, grid } | Command::Bounds { instance, grid } => {
                instance.config().overlay(grid.config())
            }
            Command::Solve { instance, grid, beta, kernel } => instance.config().overlay(grid.config()).overlay(Config {
                beta: *beta,
                kernel: *kernel,
                ..none
            }),
            Command::Fluid { instance, lambda, delta, steps, starts } => instance.config().overlay(Config {
                lambda: *lambda,
                delta: *delta,
                steps: *steps,
                starts: *starts,
                ..none
            }),
            Command::Simulate { instance, system, sim } => instance.config().overlay(system.config()).overlay(Config {
                horizon: sim.horizon,
                warmup: sim.warmup,
                replications: sim.replications,
                dynamics: sim.dynamics,
                active_reward: sim.active_reward,
                myopic: sim.myopic,
                policies: (!sim.policies.is_empty()).then(|| sim.policies.clone()),
                ..none
            }),
            Command::Randsuite { instance, system, count } => instance.config().overlay(system.config()).overlay(Config {
                count: *count,
                ..none
            }),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Index { .. } => "index",
            Command::Envelope { .. } => "envelope",
            Command::Solve { .. } => "solve",
            Command::Bounds { .. } => "bounds",
            Command::Fluid { .. } => "fluid",
            Command::Simulate { .. } => "simulate",
            Command::Randsuite { .. } => "randsuite",
        }
    }
}

fn resolve(cli: &Cli) -> Result<Config> {
    let file = match &cli.global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut cfg = file.overlay(cli.global.config()).overlay(cli.command.flags());
    cfg.validate()?;
    // Record the values actually used so the metadata stands on its own.
    cfg.seed = Some(cfg.seed());
    cfg.tol = Some(cfg.tol());
    cfg.tau_bar = Some(cfg.tau_bar());
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out: PathBuf = cfg.out();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let name = cli.command.name();
    match name {
        "index" => commands::index(&cfg),
        "envelope" => commands::envelope(&cfg),
        "solve" => commands::solve(&cfg),
        "bounds" => commands::bounds(&cfg),
        "fluid" => commands::fluid(&cfg),
        "simulate" => commands::simulate(&cfg),
        _ => commands::randsuite(&cfg),
    }
    .with_context(|| format!("{name} failed"))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
