//! Exact dynamic-programming baselines for the subsidised single arm and for
//! small multi-user systems.

mod joint;

pub use joint::{
    evaluate_joint, vi_joint_average, JointArm, JointMdp, JointPolicy, JointSolution,
    DEFAULT_JOINT_BUDGET, DEFAULT_JOINT_SWEEPS,
};

use serde::Serialize;
use thiserror::Error;

use crate::channel::{BeliefTable, ChannelModel};
use crate::index::{ThresholdPolicy, NEVER};
use crate::reward::RewardModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("closed-form value has vanishing denominator")]
    DegenerateBelief,
    #[error("joint model needs {needed} state-actions, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Passive,
    Active,
}

/// Where an activated arm lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Fresh belief drawn from the steady state.
    Approximated,
    /// Fresh belief drawn from the current belief vector.
    Original,
}

/// Continuation after the active action. The two extreme variants give the
/// bounding models: the arm lands in the fresh belief with the largest
/// (smallest) relative value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActiveBackup {
    Expected,
    MaxFresh,
    MinFresh,
}

/// Subsidised single arm on the truncated belief space. States use the flat
/// belief-table order `j * tau_bar + (tau - 1)` with the steady entry last.
#[derive(Debug, Clone)]
pub struct SingleArmMdp {
    k: usize,
    tau_bar: usize,
    passive_next: Vec<usize>,
    active: Vec<Vec<(usize, f64)>>,
    passive_reward: Vec<f64>,
    r1: f64,
    w: f64,
    backup: ActiveBackup,
}

impl SingleArmMdp {
    pub fn new(model: &ChannelModel, rm: &RewardModel, kernel: Kernel, w: f64) -> Self {
        let table = BeliefTable::build(model, rm.tau_bar());
        Self::from_table(&table, rm, kernel, w)
    }

    pub fn from_table(table: &BeliefTable, rm: &RewardModel, kernel: Kernel, w: f64) -> Self {
        let k = table.k();
        let tau_bar = table.tau_bar();
        let n = table.len();
        let steady = table.steady_index();
        let passive_next = (0..n)
            .map(|s| table.index(table.label(s).aged(tau_bar)))
            .collect();
        let active = (0..n)
            .map(|s| {
                let dist = match kernel {
                    Kernel::Approximated => table.steady(),
                    Kernel::Original => table.vector(s),
                };
                dist.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(i, &p)| (i * tau_bar, p))
                    .collect()
            })
            .collect();
        debug_assert_eq!(steady, n - 1);
        Self {
            k,
            tau_bar,
            passive_next,
            active,
            passive_reward: rm.passive_flat(),
            r1: rm.r1(),
            w,
            backup: ActiveBackup::Expected,
        }
    }

    pub fn with_backup(mut self, backup: ActiveBackup) -> Self {
        self.backup = backup;
        self
    }

    pub fn with_subsidy(mut self, w: f64) -> Self {
        self.w = w;
        self
    }

    pub fn n_states(&self) -> usize {
        self.passive_next.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau_bar(&self) -> usize {
        self.tau_bar
    }

    pub fn subsidy(&self) -> f64 {
        self.w
    }

    pub fn passive_next(&self, s: usize) -> usize {
        self.passive_next[s]
    }

    pub fn active_successors(&self, s: usize) -> &[(usize, f64)] {
        &self.active[s]
    }

    pub fn passive_reward(&self, s: usize) -> f64 {
        self.passive_reward[s]
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    fn fresh_extreme(&self, v: &[f64], max: bool) -> f64 {
        let it = (0..self.k).map(|i| v[i * self.tau_bar]);
        if max {
            it.fold(f64::NEG_INFINITY, f64::max)
        } else {
            it.fold(f64::INFINITY, f64::min)
        }
    }

    /// Passive and active one-step values with continuation `beta * v`.
    fn q_values(&self, v: &[f64], s: usize, beta: f64) -> (f64, f64) {
        let q0 = self.passive_reward[s] + self.w + beta * v[self.passive_next[s]];
        let cont = match self.backup {
            ActiveBackup::Expected => self.active[s].iter().map(|&(t, p)| p * v[t]).sum(),
            ActiveBackup::MaxFresh => self.fresh_extreme(v, true),
            ActiveBackup::MinFresh => self.fresh_extreme(v, false),
        };
        (q0, self.r1 + beta * cont)
    }

    fn greedy(&self, v: &[f64], beta: f64, tie: f64) -> Vec<Action> {
        (0..self.n_states())
            .map(|s| {
                let (q0, q1) = self.q_values(v, s, beta);
                if q0 >= q1 - tie {
                    Action::Passive
                } else {
                    Action::Active
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedSolution {
    pub values: Vec<f64>,
    pub policy: Vec<Action>,
    pub iterations: usize,
}

pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Q-value gap under which the passive action wins.
pub const DEFAULT_TIE: f64 = 1e-9;

/// Value iteration until successive iterates differ by less than
/// `tol (1 - beta) / (2 beta)`, which puts the result within `tol / 2` of the
/// fixed point.
pub fn vi_discounted(mdp: &SingleArmMdp, beta: f64, tol: f64) -> Result<DiscountedSolution, OracleError> {
    assert!((0.0..1.0).contains(&beta), "discount must lie in [0,1)");
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let stop = if beta == 0.0 { f64::INFINITY } else { tol * (1.0 - beta) / (2.0 * beta) };
    let mut next = vec![0.0; n];
    for it in 1..=DEFAULT_MAX_ITER {
        for (s, slot) in next.iter_mut().enumerate() {
            let (q0, q1) = mdp.q_values(&v, s, beta);
            *slot = q0.max(q1);
        }
        let diff = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        if diff < stop || beta == 0.0 {
            return Ok(DiscountedSolution {
                policy: mdp.greedy(&v, beta, DEFAULT_TIE * (1.0 + v[0].abs())),
                values: v,
                iterations: it,
            });
        }
    }
    Err(OracleError::NoConvergence {
        iterations: DEFAULT_MAX_ITER,
        residual: sup_diff(&next, &v),
    })
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RviOptions {
    /// Bound on the gain error; iteration stops once the span of the
    /// increment, divided by `kappa`, drops below it.
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the Bellman step in `h <- (1 - kappa) h + kappa T h`; any
    /// value below one makes the iteration converge on periodic chains.
    pub kappa: f64,
    pub reference: usize,
    pub tie: f64,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: DEFAULT_MAX_ITER,
            kappa: 0.5,
            reference: 0,
            tie: DEFAULT_TIE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageSolution {
    pub gain: f64,
    pub bias: Vec<f64>,
    pub policy: Vec<Action>,
    pub iterations: usize,
}

/// Relative value iteration with a fixed reference state (default: channel 0
/// observed one slot ago).
pub fn vi_average(mdp: &SingleArmMdp, opts: &RviOptions) -> Result<AverageSolution, OracleError> {
    let n = mdp.n_states();
    let mut h = vec![0.0; n];
    let mut next = vec![0.0; n];
    let kappa = opts.kappa;
    let mut span = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (s, slot) in next.iter_mut().enumerate() {
            let (q0, q1) = mdp.q_values(&h, s, 1.0);
            let t = (1.0 - kappa) * h[s] + kappa * q0.max(q1);
            let d = t - h[s];
            lo = lo.min(d);
            hi = hi.max(d);
            *slot = t;
        }
        let r = next[opts.reference];
        for (dst, src) in h.iter_mut().zip(&next) {
            *dst = src - r;
        }
        span = (hi - lo) / kappa;
        if span < opts.tol {
            let gain = 0.5 * (hi + lo) / kappa;
            let tie = opts.tie * (1.0 + gain.abs());
            return Ok(AverageSolution {
                policy: mdp.greedy(&h, 1.0, tie),
                bias: h,
                gain,
                iterations: it,
            });
        }
    }
    Err(OracleError::NoConvergence {
        iterations: opts.max_iter,
        residual: span,
    })
}

/// Reads a threshold vector off a greedy policy. Each channel must be passive
/// on a prefix of ages and active afterwards; a passive steady entry
/// requires every channel to be passive throughout and yields the
/// all-passive policy.
pub fn extract_threshold(policy: &[Action], k: usize, tau_bar: usize) -> Option<ThresholdPolicy> {
    let mut gamma = Vec::with_capacity(k);
    for j in 0..k {
        let acts = &policy[j * tau_bar..(j + 1) * tau_bar];
        let g = acts.iter().take_while(|&&a| a == Action::Passive).count();
        if acts[g..].contains(&Action::Passive) {
            return None;
        }
        gamma.push(g);
    }
    if policy[k * tau_bar] == Action::Passive {
        return gamma
            .iter()
            .all(|&g| g == tau_bar)
            .then(|| ThresholdPolicy::never(k));
    }
    Some(ThresholdPolicy::new(gamma))
}

/// Discounted value at the fresh beliefs `(j, 1)` of a threshold policy on
/// the approximated arm, in closed form.
///
/// With `C_j = sum_{i <= G_j} beta^(i-1) (R_j^i + W)` the fresh values solve
/// `V_j = C_j + beta^G_j (R1 + beta sum_i p^s_i V_i)`.
pub fn closed_form_value(
    gamma: &ThresholdPolicy,
    w: f64,
    beta: f64,
    rm: &RewardModel,
    omega: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let k = rm.k();
    let tau_bar = rm.tau_bar();
    if gamma.is_never() {
        if beta >= 1.0 {
            return Err(OracleError::DegenerateBelief);
        }
        return Ok((0..k)
            .map(|j| {
                let head: f64 = (1..=tau_bar)
                    .map(|i| beta.powi(i as i32 - 1) * (rm.passive(j, i) + w))
                    .sum();
                head + beta.powi(tau_bar as i32) * (rm.steady() + w) / (1.0 - beta)
            })
            .collect());
    }
    if gamma.gamma.contains(&NEVER) {
        return Err(OracleError::Invalid("mixed finite and infinite thresholds".into()));
    }
    let c: Vec<f64> = (0..k)
        .map(|j| {
            (1..=gamma.gamma[j])
                .map(|i| beta.powi(i as i32 - 1) * (rm.passive(j, i) + w))
                .sum()
        })
        .collect();
    let bg = |j: usize| beta.powi(gamma.gamma[j] as i32);
    let denom = 1.0 - (0..k).map(|j| omega[j] * bg(j) * beta).sum::<f64>();
    if denom.abs() < 1e-300 {
        return Err(OracleError::DegenerateBelief);
    }
    let mix = (0..k).map(|j| omega[j] * (c[j] + bg(j) * rm.r1())).sum::<f64>() / denom;
    Ok((0..k).map(|j| c[j] + bg(j) * (rm.r1() + beta * mix)).collect())
}

/// Optimal threshold of the approximated arm at subsidy `w` by relative
/// value iteration.
pub fn optimal_threshold(
    model: &ChannelModel,
    rm: &RewardModel,
    w: f64,
    opts: &RviOptions,
) -> Result<ThresholdPolicy, OracleError> {
    let mdp = SingleArmMdp::new(model, rm, Kernel::Approximated, w);
    let sol = vi_average(&mdp, opts)?;
    extract_threshold(&sol.policy, mdp.k(), mdp.tau_bar())
        .ok_or_else(|| OracleError::Invalid(format!("non-threshold policy at W = {w}")))
}
