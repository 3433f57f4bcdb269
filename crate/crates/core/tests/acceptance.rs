//! Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any
//! criterion fails. Run with `cargo test -p pilot-whittle --test acceptance`.

mod common;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use pilot_whittle::arm::Arm;
use pilot_whittle::bounds::{error_bound, error_bound_with, g_app_closed_form};
use pilot_whittle::channel::{check_a1, ChannelModel};
use pilot_whittle::index::{indexability_check, whittle_envelope_oracle, DEFAULT_ENVELOPE_BUDGET};
use pilot_whittle::oracle::{
    closed_form_value, evaluate_joint, extract_threshold, optimal_threshold, vi_average, vi_discounted,
    vi_joint_average, JointPolicy, Kernel, RviOptions, SingleArmMdp, DEFAULT_JOINT_BUDGET,
};
use pilot_whittle::reward::{check_a2, max_belief_reward};
use pilot_whittle::sim::{
    exact_gains, random_users, run, simulate, ActiveReward, Dynamics, OptimalPolicy, PolicySpec, SimConfig,
};
use rayon::prelude::*;

use common::{linspace, reference_arms, random_arm, random_fluid, small_arm, subsidy_grid};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn c1_oracle_equivalence() -> Verdict {
    let diffs: Vec<(u64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let arm = small_arm(seed);
            assert!(check_a1(&arm.model, arm.tau_bar()).passed && check_a2(&arm.rewards).passed);
            let env = whittle_envelope_oracle(&arm.rewards, &arm.omega, arm.tau_bar(), DEFAULT_ENVELOPE_BUDGET)
                .expect("envelope fits the budget");
            (seed, arm.index.max_abs_diff(&env))
        })
        .collect();
    let worst = diffs.iter().copied().fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        worst.1 <= 1e-9,
        format!("50 instances, max |closed form - envelope| = {:.2e} (seed {}), tol 1e-9", worst.1, worst.0),
    )
}

fn c2_monotonicity() -> Verdict {
    let arms: Vec<Arm> = (0..50u64)
        .map(small_arm)
        .chain((0..200u64).map(|s| random_arm(2 + (s % 4) as usize, 6 + (s % 15) as usize, 10_000 + s)))
        .collect();
    let mut violations = 0;
    for arm in &arms {
        for j in 0..arm.k() {
            for age in 1..=arm.tau_bar() {
                if arm.index.index(j, age + 1) < arm.index.index(j, age) {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        violations == 0,
        format!("{} instances (K 2..5, truncation 4..20), {violations} violations", arms.len()),
    )
}

fn c3_indexability() -> Verdict {
    let opts = RviOptions::default();
    let reports: Vec<(u64, bool)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let arm = random_arm(2 + (s % 2) as usize, 8, 100 + s);
            let grid = subsidy_grid(&arm, 50);
            let r = indexability_check(|w| optimal_threshold(&arm.model, &arm.rewards, w, &opts), &grid, 8)
                .expect("value iteration converges");
            (s, r.monotone)
        })
        .collect();
    let bad: Vec<u64> = reports.iter().filter(|r| !r.1).map(|r| r.0).collect();
    verdict(bad.is_empty(), format!("20 instances x 50 subsidies, non-monotone: {bad:?}"))
}

fn c4_threshold_structure() -> Verdict {
    let tol = 1e-10;
    let results: Vec<(usize, usize, f64)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let arm = random_arm(2 + (s % 2) as usize, 8, 100 + s);
            let (k, tb) = (arm.k(), arm.tau_bar());
            let mut non_threshold = 0;
            let mut checked = 0;
            let mut worst: f64 = 0.0;
            for w in subsidy_grid(&arm, 7) {
                let mdp = SingleArmMdp::from_table(&arm.table, &arm.rewards, Kernel::Approximated, w);
                for beta in [0.9, 0.99] {
                    let sol = vi_discounted(&mdp, beta, tol).expect("discounted iteration converges");
                    checked += 1;
                    match extract_threshold(&sol.policy, k, tb) {
                        Some(g) => {
                            let v = closed_form_value(&g, w, beta, &arm.rewards, &arm.omega).unwrap();
                            let d = (0..k).map(|j| (v[j] - sol.values[j * tb]).abs()).fold(0.0, f64::max);
                            worst = worst.max(d);
                        }
                        None => non_threshold += 1,
                    }
                }
                let avg = vi_average(&mdp, &RviOptions::default()).expect("average iteration converges");
                checked += 1;
                if extract_threshold(&avg.policy, k, tb).is_none() {
                    non_threshold += 1;
                }
            }
            (checked, non_threshold, worst)
        })
        .collect();
    let checked: usize = results.iter().map(|r| r.0).sum();
    let bad: usize = results.iter().map(|r| r.1).sum();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    verdict(
        bad == 0 && worst <= 10.0 * tol,
        format!("{checked} solved policies, {bad} not threshold; max |closed-form V - VI| at fresh beliefs = {worst:.2e}, tol {:.0e}", 10.0 * tol),
    )
}

fn c5_gain_consistency() -> Verdict {
    let beta = 0.999;
    let results: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let arm = random_arm(2 + (s % 2) as usize, 8, 100 + s);
            let mut gain_err: f64 = 0.0;
            let mut disc_err: f64 = 0.0;
            for w in subsidy_grid(&arm, 10) {
                let mdp = SingleArmMdp::from_table(&arm.table, &arm.rewards, Kernel::Approximated, w);
                let g = vi_average(&mdp, &RviOptions::default()).unwrap().gain;
                let closed = g_app_closed_form(w, &arm.rewards, &arm.omega, &arm.index.threshold_at(w));
                gain_err = gain_err.max((closed - g).abs());
                let v = vi_discounted(&mdp, beta, 1e-8).unwrap().values;
                disc_err = v.iter().map(|x| ((1.0 - beta) * x - g).abs()).fold(disc_err, f64::max);
            }
            (gain_err, disc_err)
        })
        .collect();
    let gain_err = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let disc_err = results.iter().map(|r| r.1).fold(0.0, f64::max);
    verdict(
        gain_err <= 1e-6 && disc_err <= 1e-2,
        format!("max |closed-form gain - RVI| = {gain_err:.2e} (tol 1e-6); max |(1-b)V_b - g| at b=0.999 = {disc_err:.2e} (tol 1e-2)"),
    )
}

fn c6_error_bound() -> Verdict {
    let opts = RviOptions::default();
    let results: Vec<(usize, f64)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let arm = random_arm(3, 8, 300 + s);
            let mut bad = 0;
            let mut slack = f64::NEG_INFINITY;
            for w in subsidy_grid(&arm, 20) {
                let r = error_bound_with(&arm.table, &arm.rewards, &arm.omega, &arm.index, w, &opts).unwrap();
                let sandwich = r.g_min <= r.g_orig + 1e-9 && r.g_orig <= r.g_max + 1e-9;
                if !sandwich || r.rel_err > r.d + 2e-6 {
                    bad += 1;
                }
                slack = slack.max(r.rel_err - r.d);
            }
            (bad, slack)
        })
        .collect();
    let bad: usize = results.iter().map(|r| r.0).sum();
    let slack = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.2, 0.5, 0.3, 0.2, 0.5, 0.3]);
    let m = ChannelModel::new(p, vec![0.7, 1.6, 2.4]).unwrap();
    let rm = max_belief_reward(&m, &pilot_whittle::channel::BeliefTable::build(&m, 8)).unwrap();
    let steady_err = linspace(0.0, 2.0, 9)
        .iter()
        .map(|&w| error_bound(&m, &rm, w, &opts).unwrap().rel_err)
        .fold(0.0, f64::max);
    verdict(
        bad == 0 && steady_err <= 1e-9,
        format!("400 points, {bad} violations, max relErr - D = {slack:.2e}; steady-rowed relErr = {steady_err:.2e}"),
    )
}

fn c7_system_accuracy() -> Verdict {
    let (n, tau_bar) = (4, 7);
    let opts = RviOptions::joint();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for seed in [7u64, 8, 9] {
        for m in [1, 3] {
            let cfg = SimConfig::new(random_users(n, 3, tau_bar, seed, 1.0), m, 100, 0, 1);
            let orig = cfg.joint_mdp(DEFAULT_JOINT_BUDGET).expect("fits the joint budget");
            let apx = cfg.clone().dynamics(Dynamics::Approximated).joint_mdp(DEFAULT_JOINT_BUDGET).unwrap();
            let best = vi_joint_average(&orig, &opts).unwrap().gain;
            let apx_policy = vi_joint_average(&apx, &opts).unwrap().policy;
            let g = evaluate_joint(&orig, &JointPolicy::Deterministic(apx_policy), &opts).unwrap();
            let gap = 100.0 * (best - g) / best;
            worst = worst.max(gap);
            lines.push(format!("s{seed}/M{m}:{gap:.4}%"));
        }
    }
    verdict(
        worst <= 0.5,
        format!("N={n}, K=3, truncation {tau_bar} (N=4 at 8 exceeds the joint budget); gaps {}; max {worst:.4}% (tol 0.5%)", lines.join(" ")),
    )
}

fn suite_gaps(users: usize, count: u64, base_seed: u64) -> Vec<pilot_whittle::sim::ExactGains> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = SimConfig::new(random_users(users, 3, 12, base_seed + i, 1.0), 1, 100, 0, 1);
            exact_gains(&cfg, DEFAULT_JOINT_BUDGET, &RviOptions::joint()).unwrap()
        })
        .collect()
}

fn c8_policy_comparison() -> Verdict {
    let two = suite_gaps(2, 40, 20_000);
    let three = suite_gaps(3, 20, 30_000);
    let gaps = |v: &[pilot_whittle::sim::ExactGains], f: fn(&pilot_whittle::sim::ExactGains) -> f64| {
        v.iter().map(|g| g.gap_pct(f(g))).collect::<Vec<f64>>()
    };
    let (w2, r2, m2) = (gaps(&two, |g| g.wip), gaps(&two, |g| g.random), gaps(&two, |g| g.myopic));
    let (w3, m3) = (gaps(&three, |g| g.wip), gaps(&three, |g| g.myopic));
    let pass = mean(&w2) < 2.0 && mean(&r2) > mean(&w2) && max(&r2) >= 10.0 && mean(&m3) > mean(&w3);
    verdict(
        pass,
        format!(
            "two users: WIP mean {:.3}%, random mean {:.3}% max {:.3}%, myopic mean {:.3}%; three users: WIP mean {:.3}%, myopic mean {:.3}%",
            mean(&w2),
            mean(&r2),
            max(&r2),
            mean(&m2),
            mean(&w3),
            mean(&m3)
        ),
    )
}

fn fluid_configs() -> Vec<(u64, pilot_whittle::fluid::FluidConfig)> {
    (0..200u64).filter_map(|s| random_fluid(s, 6, 0.3).map(|c| (s, c))).take(10).collect()
}

fn c9_fluid_spectrum() -> Verdict {
    let mut worst_eig: f64 = 0.0;
    let mut worst_nil: f64 = 0.0;
    let mut worst_crit: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    let mut periodic = 0;
    let configs = fluid_configs();
    for (_, cfg) in &configs {
        let lin = cfg.linearize().unwrap();
        let spec = lin.spectrum(1e-8);
        worst_nil = worst_nil.max(spec.nilpotency_residual);
        worst_crit = worst_crit.max(spec.critical_block_residual);
        worst_radius = worst_radius.max(spec.other_block_radius);
        if spec.other_block_radius > 1.0 - 1e-9 {
            periodic += 1;
        }
        for (re, im) in &spec.eigenvalues {
            worst_eig = worst_eig.max(((re + 1.0).powi(2) + im * im).sqrt());
        }
    }
    verdict(
        worst_nil <= 1e-8,
        format!(
            "{} configs: max |(Qhat+I)^n| = {worst_nil:.2e} (tol 1e-8), max |eig + 1| = {worst_eig:.2e}; \
             critical-class block residual {worst_crit:.2e}, other-class spectral radius of Qhat+I up to {worst_radius:.3} \
             ({periodic} configs with a unit-modulus root)",
            configs.len()
        ),
    )
}

fn c10_fixed_point() -> Verdict {
    let mut residual: f64 = 0.0;
    let mut theta_diff: f64 = 0.0;
    let mut reached = 0;
    let mut starts = 0;
    let mut slowest = 0usize;
    let mut limit = 0;
    for (seed, cfg) in fluid_configs() {
        let lin = cfg.linearize().unwrap();
        residual = residual.max(lin.residual());
        let assembled = cfg.theta_assembly();
        theta_diff = lin.theta.iter().zip(&assembled).map(|(a, b)| (a - b).abs()).fold(theta_diff, f64::max);
        let theta: Vec<f64> = lin.theta.iter().copied().collect();
        limit = 2 * cfg.system.per_class();
        for y0 in cfg.random_region_points(&theta, 10, seed, 0.05) {
            starts += 1;
            let traj = cfg.system.integrate(&y0, 50 * limit, &theta);
            if traj.dist[..=limit].iter().any(|&d| d < 1e-8) {
                reached += 1;
            }
            slowest = slowest.max(traj.dist.iter().position(|&d| d < 1e-8).unwrap_or(usize::MAX));
        }
    }
    let slowest = if slowest == usize::MAX { "never".to_string() } else { slowest.to_string() };
    verdict(
        residual <= 1e-9 && theta_diff <= 1e-9 && reached == starts && starts > 0,
        format!(
            "max |Qbar theta + dbar| = {residual:.2e}, max |theta - assembly| = {theta_diff:.2e}; \
             {reached}/{starts} starts within 1e-8 by step {limit}, slowest needs {slowest} steps"
        ),
    )
}

fn c11_many_users() -> Verdict {
    let (a, b) = reference_arms(20);
    let mut diffs = Vec::new();
    let mut lines = Vec::new();
    let mut within = false;
    for (n, horizon) in [(10usize, 400_000usize), (100, 100_000), (1000, 40_000)] {
        // The mean active reward has the same expectation as the realized
        // rate and a much smaller variance.
        let cfg = SimConfig::with_classes(vec![a.clone(), b.clone()], &[n / 2, n / 2], n / 5, horizon, 11, 8)
            .dynamics(Dynamics::Approximated)
            .active_reward(ActiveReward::Mean);
        let rel = cfg.relaxation().unwrap().reward / n as f64;
        let s = simulate(&cfg, &PolicySpec::Wip).unwrap();
        let (g, se) = (s.mean / n as f64, s.stderr / n as f64);
        let d = (g - rel).abs();
        diffs.push(d);
        within = d <= 3.0 * se;
        lines.push(format!("N={n}: |g/N - R| = {d:.2e} (se {se:.1e})"));
    }
    let decreasing = diffs.windows(2).all(|w| w[1] < w[0]);
    verdict(decreasing && within, format!("lambda 0.2, {}", lines.join(", ")))
}

fn c12_ordering() -> Verdict {
    let mut bad = Vec::new();
    let mut max_over = 0;
    let mut lines = Vec::new();
    for (users, seed) in [(2usize, 40_000u64), (2, 40_001), (2, 40_002), (3, 40_003), (3, 40_004)] {
        let cfg = SimConfig::new(random_users(users, 3, 8, seed, 1.0), 1, 40_000, seed, 8)
            .dynamics(Dynamics::Approximated)
            .active_reward(ActiveReward::Mean);
        let opt = Arc::new(OptimalPolicy::solve(&cfg, DEFAULT_JOINT_BUDGET, &RviOptions::joint()).unwrap());
        let rel = cfg.relaxation().unwrap();
        let opt_gain = opt.gain;
        let res = run(
            &cfg,
            &[PolicySpec::Wip, PolicySpec::Myopic, PolicySpec::Random, PolicySpec::Optimal(opt)],
        )
        .unwrap();
        for p in &res.per_policy {
            if p.max_selected > cfg.pilots || p.over_budget_slots > 0 {
                max_over += 1;
            }
        }
        let (w, o) = (res.get("WIP").unwrap(), res.get("OPT").unwrap());
        // Deterministic policies can have zero spread; leave room for the
        // joint solver tolerance.
        let slack = RviOptions::joint().tol;
        let ok = w.mean <= o.mean + 3.0 * (w.stderr.powi(2) + o.stderr.powi(2)).sqrt() + slack
            && o.mean <= rel.reward + 3.0 * o.stderr + slack
            && opt_gain <= rel.reward + slack;
        if !ok {
            bad.push(seed);
        }
        lines.push(format!("{:.4}<={:.4}<={:.4}", w.mean, o.mean, rel.reward));
    }
    verdict(
        bad.is_empty() && max_over == 0,
        format!("5 instances, cap violations {max_over}, WIP<=OPT<=REL: {}; failing {bad:?}", lines.join(" ")),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 12] = [
        ("index oracle equivalence", c1_oracle_equivalence),
        ("index monotone in age", c2_monotonicity),
        ("indexability", c3_indexability),
        ("threshold structure", c4_threshold_structure),
        ("gain consistency", c5_gain_consistency),
        ("approximation error bound", c6_error_bound),
        ("system-level approximation accuracy", c7_system_accuracy),
        ("policy comparison", c8_policy_comparison),
        ("fluid spectrum", c9_fluid_spectrum),
        ("fluid fixed point", c10_fixed_point),
        ("many-users trend", c11_many_users),
        ("simulator feasibility and ordering", c12_ordering),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("C{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {id:>3} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
