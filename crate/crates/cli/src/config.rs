//! Experiment configuration: a TOML file merged with command line flags.
//!
//! Precedence is flag, then config file, then built-in default. The resolved
//! configuration is written next to the results, so feeding it back through
//! `--config` repeats the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use pilot_whittle::oracle::Kernel;
use pilot_whittle::sim::{ActiveReward, Dynamics, MyopicScore};
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT: &str = "out";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub tau_bar: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,

    /// Channel files, one per user or class.
    pub channels: Option<Vec<PathBuf>>,
    /// Channel states of generated instances.
    pub k: Option<usize>,
    pub concentration: Option<f64>,

    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    pub w_points: Option<usize>,
    pub beta: Option<f64>,
    pub kernel: Option<KernelName>,
    pub check_envelope: Option<bool>,

    pub users: Option<usize>,
    pub pilots: Option<usize>,
    pub horizon: Option<usize>,
    pub warmup: Option<usize>,
    pub replications: Option<usize>,
    pub dynamics: Option<Dynamics>,
    pub active_reward: Option<ActiveReward>,
    pub myopic: Option<MyopicScore>,
    pub policies: Option<Vec<String>>,
    pub joint_budget: Option<u64>,

    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub steps: Option<usize>,
    pub starts: Option<usize>,

    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Approximated,
    Original,
}

impl From<KernelName> for Kernel {
    fn from(k: KernelName) -> Self {
        match k {
            KernelName::Approximated => Kernel::Approximated,
            KernelName::Original => Kernel::Original,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: Config) -> Config {
        macro_rules! pick {
            ($($f:ident),*) => { Config { $($f: over.$f.or(self.$f),)* } };
        }
        pick!(
            seed, tol, tau_bar, threads, out, channels, k, concentration, w_min, w_max, w_points, beta, kernel,
            check_envelope, users, pilots, horizon, warmup, replications, dynamics, active_reward, myopic, policies,
            joint_budget, lambda, delta, steps, starts, count
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn tol(&self) -> f64 {
        self.tol.unwrap_or(1e-10)
    }

    pub fn tau_bar(&self) -> usize {
        self.tau_bar.unwrap_or(12)
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(3)
    }

    pub fn concentration(&self) -> f64 {
        self.concentration.unwrap_or(pilot_whittle::channel::DEFAULT_CONCENTRATION)
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn w_points(&self) -> usize {
        self.w_points.unwrap_or(50)
    }

    pub fn pilots(&self) -> usize {
        self.pilots.unwrap_or(1)
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(100_000)
    }

    pub fn replications(&self) -> usize {
        self.replications.unwrap_or(10)
    }

    pub fn joint_budget(&self) -> u128 {
        self.joint_budget.map_or(pilot_whittle::oracle::DEFAULT_JOINT_BUDGET, u128::from)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                bail!("tol must be positive, got {t}");
            }
        }
        if self.tau_bar == Some(0) {
            bail!("tau-bar must be at least 1");
        }
        if let Some(b) = self.beta {
            if !(0.0..1.0).contains(&b) {
                bail!("beta must lie in [0, 1), got {b}");
            }
        }
        if let (Some(a), Some(b)) = (self.w_min, self.w_max) {
            if a > b {
                bail!("w-min {a} exceeds w-max {b}");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct GlobalArgs {
    /// Master seed for generated instances and simulation streams.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Convergence tolerance of the value iterations.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Truncation age of the belief chain.
    #[arg(long = "tau-bar", global = true)]
    pub tau_bar: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML experiment file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "PILOT_WHITTLE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct InstanceArgs {
    /// Channel file (TOML); repeat for several users or classes.
    #[arg(long = "channel")]
    pub channels: Vec<PathBuf>,
    /// Channel states of generated doubly stochastic instances.
    #[arg(long)]
    pub k: Option<usize>,
    /// Dirichlet concentration of the instance generator.
    #[arg(long)]
    pub concentration: Option<f64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct GridArgs {
    #[arg(long = "w-min", allow_hyphen_values = true)]
    pub w_min: Option<f64>,
    #[arg(long = "w-max", allow_hyphen_values = true)]
    pub w_max: Option<f64>,
    #[arg(long = "w-points")]
    pub w_points: Option<usize>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct SystemArgs {
    /// Number of users.
    #[arg(long)]
    pub users: Option<usize>,
    /// Pilots per slot.
    #[arg(long)]
    pub pilots: Option<usize>,
    /// Largest joint state-action count the exact solver accepts.
    #[arg(long = "joint-budget")]
    pub joint_budget: Option<u64>,
}

impl GlobalArgs {
    pub fn config(&self) -> Config {
        Config {
            seed: self.seed,
            tol: self.tol,
            tau_bar: self.tau_bar,
            threads: self.threads,
            out: self.out.clone(),
            ..Config::default()
        }
    }
}

impl InstanceArgs {
    pub fn config(&self) -> Config {
        Config {
            channels: (!self.channels.is_empty()).then(|| self.channels.clone()),
            k: self.k,
            concentration: self.concentration,
            ..Config::default()
        }
    }
}

impl GridArgs {
    pub fn config(&self) -> Config {
        Config {
            w_min: self.w_min,
            w_max: self.w_max,
            w_points: self.w_points,
            ..Config::default()
        }
    }
}

impl SystemArgs {
    pub fn config(&self) -> Config {
        Config {
            users: self.users,
            pilots: self.pilots,
            joint_budget: self.joint_budget,
            ..Config::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<Config>("seed = 1\npilot = 2\n").unwrap_err();
        assert!(err.to_string().contains("pilot"));
    }

    #[test]
    fn flags_win_over_file() {
        let file: Config = toml::from_str("seed = 1\npilots = 2\n").unwrap();
        let flags = Config {
            seed: Some(5),
            ..Config::default()
        };
        let c = file.overlay(flags);
        assert_eq!(c.seed, Some(5));
        assert_eq!(c.pilots, Some(2));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = Config {
            seed: Some(3),
            tol: Some(1e-9),
            dynamics: Some(Dynamics::Approximated),
            policies: Some(vec!["wip".into()]),
            ..Config::default()
        };
        assert_eq!(toml::from_str::<Config>(&c.to_toml()).unwrap(), c);
    }
}
