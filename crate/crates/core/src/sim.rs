//! N-user Monte Carlo of the pilot allocation system.
//!
//! Every user carries a belief label; users that get a pilot observe their
//! channel and restart at age one, the others age. Replications run in
//! parallel but each one draws from its own seeded streams, so results do not
//! depend on the schedule.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::arm::Arm;
use crate::channel::{generate_doubly_stochastic_with, BeliefLabel, ChannelModel};
use crate::fluid::{solve_relaxation, RelSolution};
use crate::fluid::FluidError;
use crate::index::ThresholdPolicy;
use crate::oracle::{evaluate_joint, vi_joint_average, JointArm, JointMdp, JointPolicy};
use crate::oracle::{Kernel, OracleError, RviOptions, SingleArmMdp};

const BELIEF_CHECK_EVERY: usize = 1000;
const BELIEF_CHECK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("optimal policy unavailable: {0}")]
    OptimalUnavailable(OracleError),
    #[error(transparent)]
    Relaxation(#[from] FluidError),
}

/// How fresh observations are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    /// True channels follow their Markov chains; a pilot reveals the current one.
    Original,
    /// A pilot reveals a channel drawn from the stationary law, as in the
    /// approximated arm.
    Approximated,
}

/// What a user with a pilot earns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActiveReward {
    /// Rate of the observed channel.
    Realized,
    /// Stationary mean rate, the arm model's active reward.
    Mean,
}

/// Score used by the myopic policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MyopicScore {
    /// Active reward minus passive reward of the current belief.
    Gain,
    /// Active reward alone.
    Active,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Distinct user types.
    pub classes: Vec<Arc<Arm>>,
    /// Class of each user.
    pub users: Vec<usize>,
    pub pilots: usize,
    pub horizon: usize,
    pub warmup: usize,
    pub seed: u64,
    pub replications: usize,
    pub dynamics: Dynamics,
    pub active_reward: ActiveReward,
    pub myopic: MyopicScore,
}

impl SimConfig {
    /// One class per user, warmup at 10% of the horizon.
    pub fn new(users: Vec<Arm>, pilots: usize, horizon: usize, seed: u64, replications: usize) -> Self {
        let users_idx = (0..users.len()).collect();
        Self {
            classes: users.into_iter().map(Arc::new).collect(),
            users: users_idx,
            pilots,
            horizon,
            warmup: horizon / 10,
            seed,
            replications,
            dynamics: Dynamics::Original,
            active_reward: ActiveReward::Realized,
            myopic: MyopicScore::Gain,
        }
    }

    /// `counts[c]` users of class `c`, numbered class by class.
    pub fn with_classes(
        classes: Vec<Arm>,
        counts: &[usize],
        pilots: usize,
        horizon: usize,
        seed: u64,
        replications: usize,
    ) -> Self {
        let users = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        Self {
            classes: classes.into_iter().map(Arc::new).collect(),
            users,
            ..Self::new(Vec::new(), pilots, horizon, seed, replications)
        }
    }

    pub fn dynamics(mut self, d: Dynamics) -> Self {
        self.dynamics = d;
        self
    }

    pub fn active_reward(mut self, r: ActiveReward) -> Self {
        self.active_reward = r;
        self
    }

    pub fn myopic_score(mut self, s: MyopicScore) -> Self {
        self.myopic = s;
        self
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        if self.users.is_empty() {
            return bad("no users");
        }
        if self.users.iter().any(|&c| c >= self.classes.len()) {
            return bad("user refers to a missing class");
        }
        if self.pilots > self.n_users() {
            return bad("more pilots than users");
        }
        if self.horizon <= self.warmup {
            return bad("horizon must exceed warmup");
        }
        if self.replications == 0 {
            return bad("need at least one replication");
        }
        Ok(())
    }

    /// User counts per class.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for &u in &self.users {
            c[u] += 1;
        }
        c
    }

    /// Relaxed problem for this population: each class weighted by its head
    /// count, budget `M` activations per slot.
    pub fn relaxation(&self) -> Result<RelSolution, SimError> {
        let arms: Vec<&Arm> = self.classes.iter().map(|a| a.as_ref()).collect();
        let w: Vec<f64> = self.counts().iter().map(|&c| c as f64).collect();
        if self.pilots == 0 {
            return Err(SimError::Invalid("relaxation needs at least one pilot".into()));
        }
        Ok(solve_relaxation(&arms, &w, self.pilots as f64)?)
    }

    fn kernel(&self) -> Kernel {
        match self.dynamics {
            Dynamics::Original => Kernel::Original,
            Dynamics::Approximated => Kernel::Approximated,
        }
    }

    /// Joint model of all users, on the kernel matching the dynamics.
    pub fn joint_mdp(&self, budget: u128) -> Result<JointMdp, SimError> {
        let kernel = self.kernel();
        let arms = self
            .users
            .iter()
            .map(|&c| {
                let a = &self.classes[c];
                JointArm::from_mdp(&SingleArmMdp::from_table(&a.table, &a.rewards, kernel, 0.0))
            })
            .collect();
        JointMdp::new(arms, self.pilots, budget).map_err(SimError::OptimalUnavailable)
    }
}

/// Exact optimum of the joint problem and its policy map.
#[derive(Debug, Clone)]
pub struct OptimalPolicy {
    pub gain: f64,
    jm: JointMdp,
    map: Vec<u32>,
}

impl OptimalPolicy {
    pub fn solve(cfg: &SimConfig, budget: u128, opts: &RviOptions) -> Result<Self, SimError> {
        let jm = cfg.joint_mdp(budget)?;
        let sol = vi_joint_average(&jm, opts).map_err(SimError::OptimalUnavailable)?;
        Ok(Self {
            gain: sol.gain,
            jm,
            map: sol.policy,
        })
    }

    pub fn joint(&self) -> &JointMdp {
        &self.jm
    }

    pub fn map(&self) -> &[u32] {
        &self.map
    }

    fn mask(&self, states: &[usize]) -> u32 {
        self.map[self.jm.state_of(states)]
    }
}

#[derive(Debug, Clone)]
pub enum PolicySpec {
    Wip,
    Myopic,
    Random,
    /// Relaxed policy; may exceed `M` in a slot, so only an upper-bound estimate.
    Rel(Arc<RelSolution>),
    Optimal(Arc<OptimalPolicy>),
    /// The same threshold for every user, capped at `M` by user id.
    Threshold(ThresholdPolicy),
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Wip => "WIP",
            Self::Myopic => "myopic",
            Self::Random => "random",
            Self::Rel(_) => "REL",
            Self::Optimal(_) => "OPT",
            Self::Threshold(_) => "threshold",
        }
    }

    /// Only REL may break the per-slot cap.
    pub fn is_feasible(&self) -> bool {
        !matches!(self, Self::Rel(_))
    }
}

/// Top `m` users by score, ties to the lower user id.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if m == 0 {
        return Vec::new();
    }
    if m < ids.len() {
        ids.select_nth_unstable_by(m - 1, cmp);
        ids.truncate(m);
    }
    ids.sort_unstable();
    ids
}

/// Selection of the index policy for users in flat states `states`.
pub fn select_wip(cfg: &SimConfig, states: &[usize]) -> Vec<usize> {
    let scores: Vec<f64> =
        cfg.users.iter().zip(states).map(|(&c, &s)| cfg.classes[c].index_at(s)).collect();
    top_m(&scores, cfg.pilots)
}

pub fn select_myopic(cfg: &SimConfig, states: &[usize]) -> Vec<usize> {
    let scores: Vec<f64> = cfg
        .users
        .iter()
        .zip(states)
        .map(|(&c, &s)| {
            let rm = &cfg.classes[c].rewards;
            match cfg.myopic {
                MyopicScore::Gain => rm.r1() - rm.passive_label(cfg.classes[c].table.label(s)),
                MyopicScore::Active => rm.r1(),
            }
        })
        .collect();
    top_m(&scores, cfg.pilots)
}

/// Deterministic policy map for the joint model, one mask per joint state.
pub fn joint_policy_map(cfg: &SimConfig, jm: &JointMdp, select: fn(&SimConfig, &[usize]) -> Vec<usize>) -> JointPolicy {
    JointPolicy::Deterministic(jm.policy_from(|l| select(cfg, l).iter().fold(0u32, |m, &u| m | 1 << u)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyStats {
    pub policy: String,
    /// Mean total reward per slot over replications.
    pub mean: f64,
    pub stderr: f64,
    pub replicates: Vec<f64>,
    /// Largest number of pilots used in any slot.
    pub max_selected: usize,
    /// Slots that used more than `M` pilots.
    pub over_budget_slots: u64,
    pub belief_mismatches: u64,
    /// Relative suboptimality against the baseline, in percent.
    pub gap_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub per_policy: Vec<PolicyStats>,
    /// `(name, value)` of the gap baseline: the exact optimum when an
    /// optimal policy was simulated, otherwise the relaxation bound.
    pub baseline: Option<(String, f64)>,
}

impl SimResult {
    pub const CSV_HEADER: [&'static str; 5] = ["instance_id", "policy", "mean", "stderr", "gap_pct"];

    pub fn get(&self, policy: &str) -> Option<&PolicyStats> {
        self.per_policy.iter().find(|p| p.policy == policy)
    }

    pub fn csv_rows(&self, instance: &str) -> Vec<[String; 5]> {
        use crate::io::fmt_f64;
        self.per_policy
            .iter()
            .map(|p| {
                [
                    instance.to_string(),
                    p.policy.clone(),
                    fmt_f64(p.mean),
                    fmt_f64(p.stderr),
                    p.gap_pct.map(fmt_f64).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

/// Pairwise sum with a fixed split, independent of any thread schedule.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Mean and standard error of independent replicate means.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0) / n).sqrt())
}

/// Per-class lookup tables used in the slot loop.
struct ClassTables {
    passive_next: Vec<usize>,
    passive_reward: Vec<f64>,
    tau_bar: usize,
    r1: f64,
    rates: Vec<f64>,
    steady_cdf: Vec<f64>,
    row_cdf: Vec<Vec<f64>>,
}

fn cdf(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut c: Vec<f64> = p.iter().map(|x| {
        acc += x;
        acc
    })
    .collect();
    if let Some(last) = c.last_mut() {
        *last = f64::INFINITY;
    }
    c
}

fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

impl ClassTables {
    fn new(arm: &Arm) -> Self {
        let t = &arm.table;
        let tau_bar = t.tau_bar();
        Self {
            passive_next: (0..t.len()).map(|s| t.index(t.label(s).aged(tau_bar))).collect(),
            passive_reward: arm.rewards.passive_flat(),
            tau_bar,
            r1: arm.rewards.r1(),
            rates: arm.model.rates().to_vec(),
            steady_cdf: cdf(arm.model.steady()),
            row_cdf: (0..arm.k()).map(|j| cdf(&arm.model.row(j))).collect(),
        }
    }
}

fn replication_rng(seed: u64, replication: usize, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(replication as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// `e_j P^age` against the stored table entry.
fn belief_consistent(arm: &Arm, label: BeliefLabel) -> bool {
    let BeliefLabel::Observed { channel, age } = label else {
        return true;
    };
    let mut v = vec![0.0; arm.k()];
    v[channel] = 1.0;
    for _ in 0..age {
        v = arm.model.step(&v);
    }
    v.iter().zip(arm.table.entry(channel, age)).all(|(a, b)| (a - b).abs() <= BELIEF_CHECK_TOL)
}

struct Outcome {
    mean: f64,
    max_selected: usize,
    over_budget: u64,
    mismatches: u64,
}

fn replicate(cfg: &SimConfig, tables: &[ClassTables], policy: &PolicySpec, rep: usize) -> Outcome {
    let n = cfg.n_users();
    // Stream 0 drives the policy; user u draws from stream u + 1.
    let mut policy_rng = replication_rng(cfg.seed, rep, 0);
    let mut user_rng: Vec<ChaCha8Rng> = (0..n).map(|u| replication_rng(cfg.seed, rep, u as u64 + 1)).collect();
    let mut channel: Vec<usize> = (0..n)
        .map(|u| draw(&tables[cfg.users[u]].steady_cdf, &mut user_rng[u]))
        .collect();
    let mut states: Vec<usize> = cfg.users.iter().map(|&c| cfg.classes[c].table.steady_index()).collect();
    let mut active = vec![false; n];
    let mut slot_rewards = Vec::with_capacity(cfg.horizon - cfg.warmup);
    let mut out = Outcome {
        mean: 0.0,
        max_selected: 0,
        over_budget: 0,
        mismatches: 0,
    };
    for t in 0..cfg.horizon {
        active.iter_mut().for_each(|a| *a = false);
        let chosen: Vec<usize> = match policy {
            PolicySpec::Wip => select_wip(cfg, &states),
            PolicySpec::Myopic => select_myopic(cfg, &states),
            PolicySpec::Random => sample(&mut policy_rng, n, cfg.pilots).into_vec(),
            PolicySpec::Optimal(opt) => {
                let mask = opt.mask(&states);
                (0..n).filter(|u| mask >> u & 1 == 1).collect()
            }
            PolicySpec::Rel(rel) => (0..n)
                .filter(|&u| {
                    let a = rel.classes[cfg.users[u]].activation[states[u]];
                    a >= 1.0 || (a > 0.0 && policy_rng.random::<f64>() < a)
                })
                .collect(),
            PolicySpec::Threshold(g) => (0..n)
                .filter(|&u| g.is_active(cfg.classes[cfg.users[u]].table.label(states[u])))
                .take(cfg.pilots)
                .collect(),
        };
        out.max_selected = out.max_selected.max(chosen.len());
        if chosen.len() > cfg.pilots {
            debug_assert!(!policy.is_feasible(), "{} used {} pilots", policy.name(), chosen.len());
            out.over_budget += 1;
        }
        for &u in &chosen {
            active[u] = true;
        }
        let mut reward = 0.0;
        for u in 0..n {
            let c = cfg.users[u];
            let tb = &tables[c];
            let rng = &mut user_rng[u];
            if active[u] {
                let seen = match cfg.dynamics {
                    Dynamics::Original => channel[u],
                    Dynamics::Approximated => draw(&tb.steady_cdf, rng),
                };
                reward += match cfg.active_reward {
                    ActiveReward::Realized => tb.rates[seen],
                    ActiveReward::Mean => tb.r1,
                };
                states[u] = seen * tb.tau_bar;
            } else {
                reward += tb.passive_reward[states[u]];
                states[u] = tb.passive_next[states[u]];
            }
            if cfg.dynamics == Dynamics::Original {
                channel[u] = draw(&tb.row_cdf[channel[u]], rng);
            }
        }
        if t >= cfg.warmup {
            slot_rewards.push(reward);
        }
        if t % BELIEF_CHECK_EVERY == 0 {
            for u in 0..n {
                let arm = &cfg.classes[cfg.users[u]];
                if !belief_consistent(arm, arm.table.label(states[u])) {
                    out.mismatches += 1;
                }
            }
            debug_assert_eq!(out.mismatches, 0, "belief table drifted from e_j P^age");
        }
    }
    out.mean = pairwise_sum(&slot_rewards) / slot_rewards.len() as f64;
    out
}

/// Simulates one policy over all replications.
pub fn simulate(cfg: &SimConfig, policy: &PolicySpec) -> Result<PolicyStats, SimError> {
    cfg.validate()?;
    if let PolicySpec::Optimal(opt) = policy {
        if opt.jm.n_users() != cfg.n_users() || opt.jm.pilots() != cfg.pilots {
            return Err(SimError::Invalid("optimal policy built for another system".into()));
        }
    }
    if let PolicySpec::Rel(rel) = policy {
        if rel.classes.len() != cfg.classes.len() {
            return Err(SimError::Invalid("relaxation built for another system".into()));
        }
    }
    if let PolicySpec::Threshold(g) = policy {
        if cfg.classes.iter().any(|a| a.k() != g.k()) {
            return Err(SimError::Invalid("threshold length differs from channel count".into()));
        }
    }
    let tables: Vec<ClassTables> = cfg.classes.iter().map(|a| ClassTables::new(a)).collect();
    let outcomes: Vec<Outcome> =
        (0..cfg.replications).into_par_iter().map(|r| replicate(cfg, &tables, policy, r)).collect();
    let replicates: Vec<f64> = outcomes.iter().map(|o| o.mean).collect();
    let (mean, stderr) = mean_stderr(&replicates);
    Ok(PolicyStats {
        policy: policy.name().to_string(),
        mean,
        stderr,
        replicates,
        max_selected: outcomes.iter().map(|o| o.max_selected).max().unwrap_or(0),
        over_budget_slots: outcomes.iter().map(|o| o.over_budget).sum(),
        belief_mismatches: outcomes.iter().map(|o| o.mismatches).sum(),
        gap_pct: None,
    })
}

/// Simulates every policy and fills in gaps against the exact optimum if
/// one is among the policies, else against the relaxation bound.
pub fn run(cfg: &SimConfig, policies: &[PolicySpec]) -> Result<SimResult, SimError> {
    let mut per_policy = policies.iter().map(|p| simulate(cfg, p)).collect::<Result<Vec<_>, _>>()?;
    let baseline = policies
        .iter()
        .find_map(|p| match p {
            PolicySpec::Optimal(o) => Some(("OPT".to_string(), o.gain)),
            _ => None,
        })
        .or_else(|| {
            policies.iter().find_map(|p| match p {
                PolicySpec::Rel(r) => Some(("REL".to_string(), r.reward)),
                _ => None,
            })
        });
    if let Some((_, g)) = &baseline {
        for p in &mut per_policy {
            p.gap_pct = Some(100.0 * (g - p.mean) / g);
        }
    }
    Ok(SimResult { per_policy, baseline })
}

/// Rates `log2(1 + |h|^2)` with `h` standard complex Gaussian.
pub fn random_rates(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let re: f64 = rng.sample(rand_distr::StandardNormal);
            let im: f64 = rng.sample(rand_distr::StandardNormal);
            (1.0 + 0.5 * (re * re + im * im)).log2()
        })
        .collect()
}

/// Users with random doubly stochastic channels and Gaussian-fading rates,
/// max-belief rewards at truncation `tau_bar`.
pub fn random_users(n: usize, k: usize, tau_bar: usize, seed: u64, concentration: f64) -> Vec<Arm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = generate_doubly_stochastic_with(k, rng.random(), concentration);
            let model = ChannelModel::new(p, random_rates(k, &mut rng)).expect("doubly stochastic is ergodic");
            Arm::max_belief(model, tau_bar).expect("doubly stochastic rows satisfy the reward ordering")
        })
        .collect()
}

/// Long-run rewards of the benchmark policies computed on the joint model
/// rather than simulated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactGains {
    pub opt: f64,
    pub wip: f64,
    pub myopic: f64,
    pub random: f64,
}

impl ExactGains {
    pub const CSV_HEADER: [&'static str; 8] =
        ["instance_id", "opt", "wip", "myopic", "random", "gap_wip_pct", "gap_myopic_pct", "gap_random_pct"];

    /// Gap in percent relative to the optimum.
    pub fn gap_pct(&self, g: f64) -> f64 {
        100.0 * (self.opt - g) / self.opt
    }

    pub fn csv_row(&self, instance: &str) -> [String; 8] {
        use crate::io::fmt_f64;
        [
            instance.to_string(),
            fmt_f64(self.opt),
            fmt_f64(self.wip),
            fmt_f64(self.myopic),
            fmt_f64(self.random),
            fmt_f64(self.gap_pct(self.wip)),
            fmt_f64(self.gap_pct(self.myopic)),
            fmt_f64(self.gap_pct(self.random)),
        ]
    }
}

pub fn exact_gains(cfg: &SimConfig, budget: u128, opts: &RviOptions) -> Result<ExactGains, SimError> {
    cfg.validate()?;
    let jm = cfg.joint_mdp(budget)?;
    let eval = |p: &JointPolicy| evaluate_joint(&jm, p, opts).map_err(SimError::OptimalUnavailable);
    let opt = vi_joint_average(&jm, opts).map_err(SimError::OptimalUnavailable)?.gain;
    Ok(ExactGains {
        opt,
        wip: eval(&joint_policy_map(cfg, &jm, select_wip))?,
        myopic: eval(&joint_policy_map(cfg, &jm, select_myopic))?,
        random: eval(&JointPolicy::UniformSubsets)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_doubly_stochastic;
    use crate::index::avg_reward_for_threshold;

    fn arm(seed: u64, tau_bar: usize) -> Arm {
        let m = ChannelModel::new(generate_doubly_stochastic(3, seed), vec![0.4, 1.3, 2.7]).unwrap();
        Arm::max_belief(m, tau_bar).unwrap()
    }

    fn reference_arm(tau_bar: usize) -> Arm {
        let m = ChannelModel::from_rows(
            &[vec![0.3, 0.4, 0.3], vec![0.2, 0.2, 0.6], vec![0.5, 0.4, 0.1]],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        Arm::max_belief(m, tau_bar).unwrap()
    }

    #[test]
    fn top_m_breaks_ties_by_id() {
        assert_eq!(top_m(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_m(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert!(top_m(&[1.0], 0).is_empty());
    }

    #[test]
    fn pairwise_sum_is_exact_on_small_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn all_active_earns_mean_rate() {
        let a = arm(1, 8);
        let target: f64 = 2.0 * a.rewards.r1();
        let cfg = SimConfig::with_classes(vec![a], &[2], 2, 40_000, 3, 4);
        let s = simulate(&cfg, &PolicySpec::Wip).unwrap();
        assert!((s.mean - target).abs() < 4.0 * s.stderr + 1e-3, "{} vs {target}", s.mean);
        assert_eq!(s.max_selected, 2);
    }

    #[test]
    fn no_pilots_earn_steady_reward_exactly() {
        let a = arm(2, 8);
        let target = 3.0 * a.rewards.steady();
        let cfg = SimConfig::with_classes(vec![a], &[3], 0, 2000, 1, 2);
        let s = simulate(&cfg, &PolicySpec::Random).unwrap();
        assert!((s.mean - target).abs() < 1e-12);
        assert_eq!(s.stderr, 0.0);
    }

    #[test]
    fn period_two_matches_occupancy() {
        let a = reference_arm(8);
        let g = ThresholdPolicy::new(vec![1; 3]);
        let target = avg_reward_for_threshold(&g, 0.0, &a.rewards, &a.omega);
        let cfg = SimConfig::with_classes(vec![a], &[1], 1, 50_000, 7, 8).dynamics(Dynamics::Approximated);
        let s = simulate(&cfg, &PolicySpec::Threshold(g)).unwrap();
        assert!((s.mean - target).abs() < 4.0 * s.stderr, "{} vs {target} ({})", s.mean, s.stderr);
    }

    #[test]
    fn same_seed_same_result() {
        let cfg = SimConfig::new(vec![arm(1, 6), arm(2, 6), arm(3, 6)], 1, 3000, 11, 3);
        let rel = Arc::new(cfg.relaxation().unwrap());
        let pols = [PolicySpec::Wip, PolicySpec::Myopic, PolicySpec::Random, PolicySpec::Rel(rel)];
        let a = run(&cfg, &pols).unwrap();
        let b = run(&cfg, &pols).unwrap();
        assert_eq!(a, b);
        let c = run(&SimConfig { seed: 12, ..cfg }, &pols).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn feasible_policies_respect_the_cap() {
        let cfg = SimConfig::new(vec![arm(4, 6), arm(5, 6), arm(6, 6), arm(7, 6)], 2, 2000, 3, 2);
        for p in [PolicySpec::Wip, PolicySpec::Myopic, PolicySpec::Random] {
            let s = simulate(&cfg, &p).unwrap();
            assert!(s.max_selected <= 2);
            assert_eq!(s.over_budget_slots, 0);
            assert_eq!(s.belief_mismatches, 0);
        }
    }

    #[test]
    fn rel_meets_budget_on_average_and_its_bound() {
        let cfg = SimConfig::with_classes(vec![reference_arm(10)], &[20], 4, 20_000, 5, 4).dynamics(Dynamics::Approximated);
        let rel = cfg.relaxation().unwrap();
        let s = simulate(&cfg, &PolicySpec::Rel(Arc::new(rel.clone()))).unwrap();
        assert!((s.mean - rel.reward).abs() < 4.0 * s.stderr + 1e-3, "{} vs {}", s.mean, rel.reward);
    }

    #[test]
    fn wip_with_many_users_is_near_the_relaxation() {
        let cfg =
            SimConfig::with_classes(vec![reference_arm(12)], &[50], 5, 20_000, 9, 6).dynamics(Dynamics::Approximated);
        let rel = cfg.relaxation().unwrap();
        let s = simulate(&cfg, &PolicySpec::Wip).unwrap();
        let per_user = s.mean / 50.0;
        let bound = rel.reward / 50.0;
        assert!(per_user <= bound + 3.0 * s.stderr / 50.0);
        assert!((per_user - bound).abs() < 0.02 * bound, "{per_user} vs {bound}");
    }

    #[test]
    fn stderr_shrinks_with_horizon() {
        let cfg = SimConfig::new(vec![arm(8, 6), arm(9, 6)], 1, 4000, 21, 24);
        let short = simulate(&cfg, &PolicySpec::Wip).unwrap();
        let long = simulate(&SimConfig { horizon: 8000, warmup: 800, ..cfg }, &PolicySpec::Wip).unwrap();
        let ratio = long.stderr / short.stderr;
        let expect = std::f64::consts::FRAC_1_SQRT_2;
        assert!(ratio > expect / 2.0 && ratio < expect * 2.0, "ratio {ratio}");
    }

    #[test]
    fn wip_below_optimal_below_relaxation() {
        let cfg = SimConfig::new(vec![arm(10, 5), arm(11, 5)], 1, 20_000, 4, 8)
            .dynamics(Dynamics::Approximated)
            .active_reward(ActiveReward::Mean);
        let opt = Arc::new(OptimalPolicy::solve(&cfg, 5_000_000, &RviOptions::joint()).unwrap());
        let rel = Arc::new(cfg.relaxation().unwrap());
        assert!(opt.gain <= rel.reward + 1e-9);
        let res = run(&cfg, &[PolicySpec::Wip, PolicySpec::Optimal(opt.clone())]).unwrap();
        let wip = res.get("WIP").unwrap();
        let o = res.get("OPT").unwrap();
        assert!((o.mean - opt.gain).abs() < 4.0 * o.stderr + 1e-3);
        assert!(wip.mean <= o.mean + 3.0 * (wip.stderr + o.stderr));
        assert_eq!(res.baseline.as_ref().unwrap().0, "OPT");
    }

    #[test]
    fn exact_gains_are_ordered() {
        let cfg = SimConfig::new(random_users(2, 3, 6, 3, 1.0), 1, 100, 0, 1);
        let g = exact_gains(&cfg, 5_000_000, &RviOptions::joint()).unwrap();
        for x in [g.wip, g.myopic, g.random] {
            assert!(x <= g.opt + 1e-8);
        }
        assert!(g.gap_pct(g.opt).abs() < 1e-12);
    }
}
