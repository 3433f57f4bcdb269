use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use pilot_whittle::arm::Arm;
use pilot_whittle::bounds::{bound_sweep, BoundReport};
use pilot_whittle::channel::{BeliefLabel, ChannelModel};
use pilot_whittle::fluid::{FluidConfig, FluidSystem};
use pilot_whittle::index::{avg_reward_for_threshold, whittle_envelope_oracle, ThresholdPolicy, DEFAULT_ENVELOPE_BUDGET};
use pilot_whittle::io::{fmt_f64, write_csv, write_json};
use pilot_whittle::oracle::{extract_threshold, vi_average, vi_discounted, RviOptions, SingleArmMdp};
use pilot_whittle::sim::{exact_gains, random_users, run, ExactGains, OptimalPolicy, PolicySpec, SimConfig, SimResult};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{Config, KernelName};

/// Collects output files and writes the metadata record last.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    tol: f64,
    tau_bar: usize,
    threads: usize,
    outputs: &'a [String],
    config: &'a Config,
    summary: serde_json::Value,
}

impl Output {
    pub fn new(cfg: &Config) -> Self {
        Self {
            dir: cfg.out(),
            files: Vec::new(),
        }
    }

    fn csv<R, I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
        I: IntoIterator<Item = R>,
    {
        let path = self.dir.join(name);
        write_csv(&path, header, rows).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &Config, summary: serde_json::Value) -> Result<()> {
        let resolved = self.dir.join("config.toml");
        pilot_whittle::io::write_atomic(&resolved, cfg.to_toml().as_bytes())?;
        self.files.push("config.toml".into());
        let meta = Metadata {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed(),
            tol: cfg.tol(),
            tau_bar: cfg.tau_bar(),
            threads: rayon::current_num_threads(),
            outputs: &self.files,
            config: cfg,
            summary,
        };
        write_json(&self.dir.join("metadata.json"), &meta)?;
        Ok(())
    }
}

fn load_channel(path: &PathBuf) -> Result<ChannelModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ChannelModel::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `n` users from the channel files (a single file is shared by everyone)
/// or from the generator.
fn arms(cfg: &Config, n: usize) -> Result<Vec<Arm>> {
    let tb = cfg.tau_bar();
    match &cfg.channels {
        Some(paths) => {
            let models = paths.iter().map(load_channel).collect::<Result<Vec<_>>>()?;
            let models = match models.len() {
                1 => vec![models[0].clone(); n],
                m if m == n => models,
                m => bail!("{m} channel files for {n} users"),
            };
            models
                .into_iter()
                .map(|m| Arm::max_belief(m, tb).map_err(|e| anyhow!(e)))
                .collect()
        }
        None => Ok(random_users(n, cfg.k(), tb, cfg.seed(), cfg.concentration())),
    }
}

fn single_arm(cfg: &Config) -> Result<Arm> {
    Ok(arms(cfg, 1)?.remove(0))
}

fn grid(cfg: &Config, arm: &Arm) -> Vec<f64> {
    let flat = arm.index.flat();
    let pad = 0.1 * arm.rewards.r1();
    let lo = cfg.w_min.unwrap_or_else(|| flat.iter().copied().fold(f64::INFINITY, f64::min) - pad);
    let hi = cfg.w_max.unwrap_or_else(|| flat.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad);
    let n = cfg.w_points().max(1);
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn rvi(cfg: &Config) -> RviOptions {
    RviOptions {
        tol: cfg.tol(),
        ..RviOptions::default()
    }
}

fn label(l: BeliefLabel) -> (String, String) {
    match l {
        BeliefLabel::Observed { channel, age } => ((channel + 1).to_string(), age.to_string()),
        BeliefLabel::Steady => ("s".into(), "s".into()),
    }
}

fn breakpoint_rows(arm: &Arm) -> Vec<[String; 5]> {
    arm.index
        .construction
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (j, t) = label(s.state);
            [i.to_string(), j, t, fmt_f64(s.value), ThresholdPolicy::new(s.gamma.clone()).to_string()]
        })
        .collect()
}

const BREAKPOINT_HEADER: [&str; 5] = ["step", "j", "tau", "W", "gamma"];

pub fn index(cfg: &Config) -> Result<()> {
    let arm = single_arm(cfg)?;
    let mut out = Output::new(cfg);
    out.csv("index.csv", &["j", "tau", "W"], arm.index.csv_rows())?;
    out.csv("rewards.csv", &["j", "tau", "R"], arm.rewards.csv_rows())?;
    out.csv("breakpoints.csv", &BREAKPOINT_HEADER, breakpoint_rows(&arm))?;
    let envelope_diff = if cfg.check_envelope.unwrap_or(false) {
        let env = whittle_envelope_oracle(&arm.rewards, &arm.omega, arm.tau_bar(), DEFAULT_ENVELOPE_BUDGET)?;
        Some(arm.index.max_abs_diff(&env))
    } else {
        None
    };
    let construction: Vec<_> = arm
        .index
        .construction
        .iter()
        .map(|s| {
            let (j, t) = label(s.state);
            json!({"j": j, "tau": t, "W": s.value, "gamma": s.gamma})
        })
        .collect();
    let table: Vec<_> = (0..arm.k())
        .map(|j| (1..=arm.tau_bar()).map(|t| arm.index.index(j, t)).collect::<Vec<_>>())
        .collect();
    let doc = json!({
        "K": arm.k(),
        "tau_bar": arm.tau_bar(),
        "index": table,
        "steady_index": arm.index.steady_index(),
        "construction": construction,
    });
    write_json(&out.dir.join("index.json"), &doc)?;
    out.files.push("index.json".into());
    let ties: Vec<_> = arm.index.tie_warnings.iter().map(|t| json!({"step": t.step, "channels": t.channels})).collect();
    out.finish(
        "index",
        cfg,
        json!({
            "r1": arm.rewards.r1(),
            "steady_index": arm.index.steady_index(),
            "tie_warnings": ties,
            "envelope_max_abs_diff": envelope_diff,
            "closeness_warning": arm.table.closeness_warning(pilot_whittle::channel::Tolerances::default().closeness),
        }),
    )
}

pub fn envelope(cfg: &Config) -> Result<()> {
    let arm = single_arm(cfg)?;
    let w = grid(cfg, &arm);
    let mut candidates = arm.index.construction_policies();
    candidates.push(ThresholdPolicy::never(arm.k()));
    candidates.dedup();
    let mut lines = Vec::new();
    for (i, g) in candidates.iter().enumerate() {
        for &x in &w {
            let v = avg_reward_for_threshold(g, x, &arm.rewards, &arm.omega);
            lines.push([fmt_f64(x), i.to_string(), g.to_string(), fmt_f64(v)]);
        }
    }
    let opts = rvi(cfg);
    let upper: Vec<[String; 3]> = w
        .par_iter()
        .map(|&x| -> Result<[String; 3]> {
            let env = candidates
                .iter()
                .map(|g| avg_reward_for_threshold(g, x, &arm.rewards, &arm.omega))
                .fold(f64::NEG_INFINITY, f64::max);
            let mdp = SingleArmMdp::from_table(&arm.table, &arm.rewards, pilot_whittle::oracle::Kernel::Approximated, x);
            let g = vi_average(&mdp, &opts)?.gain;
            Ok([fmt_f64(x), fmt_f64(env), fmt_f64(g)])
        })
        .collect::<Result<_>>()?;
    let mut out = Output::new(cfg);
    out.csv("envelope.csv", &["W", "policy", "gamma", "g"], lines)?;
    out.csv("envelope_max.csv", &["W", "g_envelope", "g_vi"], upper)?;
    out.csv("breakpoints.csv", &BREAKPOINT_HEADER, breakpoint_rows(&arm))?;
    out.finish("envelope", cfg, json!({"candidates": candidates.len(), "points": w.len()}))
}

pub fn solve(cfg: &Config) -> Result<()> {
    let arm = single_arm(cfg)?;
    let w = grid(cfg, &arm);
    let kernel = cfg.kernel.unwrap_or(KernelName::Approximated);
    let (k, tb) = (arm.k(), arm.tau_bar());
    let mut out = Output::new(cfg);
    let threshold = |p: &[pilot_whittle::oracle::Action]| {
        extract_threshold(p, k, tb).map_or_else(|| "none".to_string(), |g| g.to_string())
    };
    match cfg.beta {
        None => {
            let opts = rvi(cfg);
            let rows = w
                .par_iter()
                .map(|&x| -> Result<[String; 4]> {
                    let s = vi_average(&SingleArmMdp::from_table(&arm.table, &arm.rewards, kernel.into(), x), &opts)?;
                    Ok([fmt_f64(x), fmt_f64(s.gain), threshold(&s.policy), s.iterations.to_string()])
                })
                .collect::<Result<Vec<_>>>()?;
            out.csv("solve.csv", &["W", "gain", "threshold", "iterations"], rows)?;
        }
        Some(beta) => {
            let sols = w
                .par_iter()
                .map(|&x| vi_discounted(&SingleArmMdp::from_table(&arm.table, &arm.rewards, kernel.into(), x), beta, cfg.tol()))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = w.iter().zip(&sols).map(|(x, s)| [fmt_f64(*x), threshold(&s.policy), s.iterations.to_string()]);
            out.csv("solve.csv", &["W", "threshold", "iterations"], rows)?;
            let table = &arm.table;
            let values = w.iter().zip(&sols).flat_map(|(x, s)| {
                s.values.iter().enumerate().map(move |(i, v)| {
                    let (j, t) = label(table.label(i));
                    [fmt_f64(*x), j, t, fmt_f64(*v)]
                })
            });
            out.csv("values.csv", &["W", "j", "tau", "V"], values.collect::<Vec<_>>())?;
        }
    }
    out.finish("solve", cfg, json!({"kernel": kernel, "beta": cfg.beta, "points": w.len()}))
}

pub fn bounds(cfg: &Config) -> Result<()> {
    let arm = single_arm(cfg)?;
    let w = grid(cfg, &arm);
    let reports = bound_sweep(&arm.model, &arm.rewards, &w, &rvi(cfg))?;
    let worst = reports.iter().map(|r| r.rel_err - r.d).fold(f64::NEG_INFINITY, f64::max);
    let mut out = Output::new(cfg);
    out.csv("bounds.csv", &BoundReport::CSV_HEADER, reports.iter().map(|r| r.csv_row()))?;
    out.finish("bounds", cfg, json!({"points": w.len(), "max_rel_err_minus_bound": worst}))
}

pub fn fluid(cfg: &Config) -> Result<()> {
    let mut classes = arms(cfg, 2)?;
    let b = classes.pop().expect("two classes");
    let a = classes.pop().expect("two classes");
    let delta = cfg.delta.unwrap_or(0.5);
    let lambda = cfg.lambda.unwrap_or(0.3);
    let fc = FluidConfig::new(FluidSystem::new(a, b, [delta, 1.0 - delta], lambda)?)?;
    let lin = fc.linearize()?;
    let spec = lin.spectrum(cfg.tol());
    let assembled = fc.theta_assembly();
    let pc = fc.system.per_class();
    let theta: Vec<f64> = lin.theta.iter().copied().collect();
    let mut out = Output::new(cfg);
    let rows = (0..fc.system.dim()).map(|g| {
        let (j, t) = label(fc.system.arms()[g / pc].table.label(g % pc));
        [(g / pc + 1).to_string(), j, t, fmt_f64(theta[g]), fmt_f64(assembled[g])]
    });
    out.csv("fluid_theta.csv", &["class", "j", "tau", "theta", "assembly"], rows.collect::<Vec<_>>())?;
    out.csv(
        "fluid_spectrum.csv",
        &["re", "im"],
        spec.eigenvalues.iter().map(|(re, im)| [fmt_f64(*re), fmt_f64(*im)]),
    )?;
    let steps = cfg.steps.unwrap_or(4 * pc);
    let starts = fc.random_region_points(&theta, cfg.starts.unwrap_or(10), cfg.seed(), 0.05);
    let mut traj = Vec::new();
    for (i, y0) in starts.iter().enumerate() {
        for (t, d) in fc.system.integrate(y0, steps, &theta).dist.iter().enumerate() {
            traj.push([i.to_string(), t.to_string(), fmt_f64(*d)]);
        }
    }
    out.csv("fluid_trajectories.csv", &["start", "step", "dist"], traj)?;
    let theta_diff = theta.iter().zip(&assembled).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    out.finish(
        "fluid",
        cfg,
        json!({
            "wstar": fc.wstar,
            "rho": fc.rho,
            "lambda": fc.lambda,
            "critical": fc.critical,
            "fixed_point_residual": lin.residual(),
            "theta_vs_assembly": theta_diff,
            "nilpotency_residual": spec.nilpotency_residual,
            "critical_block_residual": spec.critical_block_residual,
            "other_block_radius": spec.other_block_radius,
            "all_minus_one": spec.all_minus_one,
            "starts": starts.len(),
        }),
    )
}

fn policy_list(cfg: &Config, sim: &SimConfig) -> Result<Vec<PolicySpec>> {
    let names = cfg
        .policies
        .clone()
        .unwrap_or_else(|| ["wip", "myopic", "random", "rel"].map(String::from).to_vec());
    names
        .iter()
        .map(|n| {
            Ok(match n.to_ascii_lowercase().as_str() {
                "wip" => PolicySpec::Wip,
                "myopic" => PolicySpec::Myopic,
                "random" => PolicySpec::Random,
                "rel" => PolicySpec::Rel(Arc::new(sim.relaxation()?)),
                "opt" => {
                    let opts = RviOptions {
                        tol: cfg.tol.unwrap_or(RviOptions::joint().tol),
                        ..RviOptions::joint()
                    };
                    PolicySpec::Optimal(Arc::new(OptimalPolicy::solve(sim, cfg.joint_budget(), &opts)?))
                }
                other => bail!("unknown policy '{other}' (wip, myopic, random, rel, opt)"),
            })
        })
        .collect()
}

pub fn simulate(cfg: &Config) -> Result<()> {
    let n = cfg.users.or(cfg.channels.as_ref().map(|c| c.len())).unwrap_or(4);
    let users = arms(cfg, n)?;
    let horizon = cfg.horizon();
    let mut sim = SimConfig::new(users, cfg.pilots(), horizon, cfg.seed(), cfg.replications());
    sim.warmup = cfg.warmup.unwrap_or(horizon / 10);
    sim.dynamics = cfg.dynamics.unwrap_or(sim.dynamics);
    sim.active_reward = cfg.active_reward.unwrap_or(sim.active_reward);
    sim.myopic = cfg.myopic.unwrap_or(sim.myopic);
    sim.validate()?;
    let policies = policy_list(cfg, &sim)?;
    let res: SimResult = run(&sim, &policies)?;
    let mut out = Output::new(cfg);
    out.csv("results.csv", &SimResult::CSV_HEADER, res.csv_rows("0"))?;
    let per: Vec<_> = res
        .per_policy
        .iter()
        .map(|p| json!({"policy": p.policy, "max_selected": p.max_selected, "over_budget_slots": p.over_budget_slots, "belief_mismatches": p.belief_mismatches}))
        .collect();
    out.finish(
        "simulate",
        cfg,
        json!({"users": n, "pilots": sim.pilots, "warmup": sim.warmup, "baseline": res.baseline, "policies": per}),
    )
}

pub fn randsuite(cfg: &Config) -> Result<()> {
    let count = cfg.count.unwrap_or(40);
    let users = cfg.users.unwrap_or(2);
    let pilots = cfg.pilots();
    let opts = RviOptions {
        tol: cfg.tol.unwrap_or(RviOptions::joint().tol),
        ..RviOptions::joint()
    };
    let base = cfg.seed().wrapping_mul(1_000_003);
    let gains: Vec<ExactGains> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let arms = random_users(users, cfg.k(), cfg.tau_bar(), base.wrapping_add(i), cfg.concentration());
            let sim = SimConfig::new(arms, pilots, 2, 0, 1);
            exact_gains(&sim, cfg.joint_budget(), &opts)
        })
        .collect::<Result<_, _>>()?;
    let mut out = Output::new(cfg);
    out.csv("gains.csv", &ExactGains::CSV_HEADER, gains.iter().enumerate().map(|(i, g)| g.csv_row(&i.to_string())))?;
    let boxplot = gains.iter().enumerate().map(|(i, g)| {
        [i.to_string(), fmt_f64(g.gap_pct(g.wip)), fmt_f64(g.gap_pct(g.myopic)), fmt_f64(g.gap_pct(g.random))]
    });
    out.csv("boxplot.csv", &["instance_id", "WIP", "myopic", "random"], boxplot)?;
    let stats = |f: fn(&ExactGains) -> f64| {
        let v: Vec<f64> = gains.iter().map(|g| g.gap_pct(f(g))).collect();
        json!({"mean": v.iter().sum::<f64>() / v.len().max(1) as f64, "max": v.iter().copied().fold(f64::NEG_INFINITY, f64::max)})
    };
    out.finish(
        "randsuite",
        cfg,
        json!({
            "instances": count,
            "users": users,
            "pilots": pilots,
            "gap_pct": {"WIP": stats(|g| g.wip), "myopic": stats(|g| g.myopic), "random": stats(|g| g.random)},
        }),
    )
}
