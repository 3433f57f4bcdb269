//! Whittle index of the steady-state approximated arm.
//!
//! [`whittle_closed_form`] runs the greedy construction: at every step the
//! channel whose next unassigned age has the largest passive reward gets its
//! threshold raised, and the subsidy making that step indifferent is the
//! index. [`whittle_envelope_oracle`] recomputes the same table by searching
//! the upper envelope of the threshold-policy gain lines directly.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{BeliefLabel, ChannelModel};
use crate::reward::RewardModel;

/// Comparison slack for index arithmetic.
pub const INDEX_TOL: f64 = 1e-12;

/// Threshold entry meaning "never activate" (the arm absorbs in the steady
/// entry).
pub const NEVER: usize = usize::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("search space of {candidates} threshold vectors exceeds budget {budget}")]
    SearchSpaceTooLarge { candidates: u128, budget: u128 },
    #[error("optimal policy at W = {w} is not of threshold type")]
    NonThresholdPolicy { w: f64 },
    #[error("maximum threshold {gamma_max} is below the truncation {tau_bar}")]
    GammaMaxTooSmall { gamma_max: usize, tau_bar: usize },
    #[error("solver failed at W = {w}: {msg}")]
    Solver { w: f64, msg: String },
}

/// Passive while the age is at most `gamma[j]`, active afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ThresholdPolicy {
    pub gamma: Vec<usize>,
}

impl ThresholdPolicy {
    pub fn new(gamma: Vec<usize>) -> Self {
        Self { gamma }
    }

    pub fn zeros(k: usize) -> Self {
        Self { gamma: vec![0; k] }
    }

    pub fn never(k: usize) -> Self {
        Self {
            gamma: vec![NEVER; k],
        }
    }

    pub fn is_never(&self) -> bool {
        self.gamma.iter().all(|&g| g == NEVER)
    }

    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    /// Componentwise order; the all-passive policy is the top element.
    pub fn le(&self, other: &Self) -> bool {
        self.gamma.iter().zip(&other.gamma).all(|(a, b)| a <= b)
    }

    pub fn is_active(&self, label: BeliefLabel) -> bool {
        match label {
            BeliefLabel::Observed { channel, age } => age > self.gamma[channel],
            BeliefLabel::Steady => !self.is_never(),
        }
    }
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_never() {
            return write!(f, "never");
        }
        let parts: Vec<String> = self.gamma.iter().map(|g| g.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Weights of the approximated chain's balance equations: the steady state.
pub fn omega(model: &ChannelModel) -> Vec<f64> {
    model.steady().to_vec()
}

/// Stationary distribution of the approximated arm under a finite threshold
/// policy. Every occupied age of channel `j` carries the same mass.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub gamma: ThresholdPolicy,
    pub omega: Vec<f64>,
    per_age: Vec<f64>,
}

impl OccupancyMeasure {
    /// Mass of `(channel, age)`; zero past `gamma[channel] + 1`.
    pub fn alpha(&self, channel: usize, age: usize) -> f64 {
        if age >= 1 && age <= self.gamma.gamma[channel] + 1 {
            self.per_age[channel]
        } else {
            0.0
        }
    }

    pub fn per_age(&self) -> &[f64] {
        &self.per_age
    }

    /// Long-run fraction of passive slots.
    pub fn passive_mass(&self) -> f64 {
        self.gamma
            .gamma
            .iter()
            .zip(&self.per_age)
            .map(|(&g, a)| g as f64 * a)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.gamma
            .gamma
            .iter()
            .zip(&self.per_age)
            .map(|(&g, a)| (g + 1) as f64 * a)
            .sum()
    }
}

pub fn occupancy(gamma: &ThresholdPolicy, omega: &[f64]) -> OccupancyMeasure {
    assert!(!gamma.is_never(), "occupancy needs a finite threshold");
    let denom: f64 = gamma
        .gamma
        .iter()
        .zip(omega)
        .map(|(&g, w)| (g + 1) as f64 * w)
        .sum();
    OccupancyMeasure {
        gamma: gamma.clone(),
        omega: omega.to_vec(),
        per_age: omega.iter().map(|w| w / denom).collect(),
    }
}

/// Average reward without subsidy and the passive fraction, the intercept
/// and slope of `W -> g^Gamma(W)`.
pub fn reward_and_passive_mass(gamma: &ThresholdPolicy, rm: &RewardModel, omega: &[f64]) -> (f64, f64) {
    if gamma.is_never() {
        return (rm.steady(), 1.0);
    }
    let occ = occupancy(gamma, omega);
    let mut reward = 0.0;
    for (j, &g) in gamma.gamma.iter().enumerate() {
        let a = occ.per_age[j];
        let passive_sum: f64 = (1..=g).map(|r| rm.passive(j, r)).sum();
        reward += a * (passive_sum + rm.r1());
    }
    (reward, occ.passive_mass())
}

pub fn avg_reward_for_threshold(gamma: &ThresholdPolicy, w: f64, rm: &RewardModel, omega: &[f64]) -> f64 {
    let (reward, passive) = reward_and_passive_mass(gamma, rm, omega);
    reward + w * passive
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructionStep {
    /// State whose index is fixed at this step.
    pub state: BeliefLabel,
    pub value: f64,
    /// Thresholds after the step.
    pub gamma: Vec<usize>,
}

/// Several channels tied for the largest next passive reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TieWarning {
    pub step: usize,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhittleIndexTable {
    k: usize,
    tau_bar: usize,
    index: Vec<f64>,
    steady_index: f64,
    pub breakpoints: Vec<f64>,
    pub construction: Vec<ConstructionStep>,
    pub tie_warnings: Vec<TieWarning>,
}

impl WhittleIndexTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau_bar(&self) -> usize {
        self.tau_bar
    }

    pub fn index(&self, channel: usize, age: usize) -> f64 {
        if age > self.tau_bar {
            self.steady_index
        } else {
            self.index[channel * self.tau_bar + age - 1]
        }
    }

    pub fn steady_index(&self) -> f64 {
        self.steady_index
    }

    pub fn at(&self, label: BeliefLabel) -> f64 {
        match label {
            BeliefLabel::Observed { channel, age } => self.index(channel, age),
            BeliefLabel::Steady => self.steady_index,
        }
    }

    /// Indices in flat belief-table order, steady last.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.index.clone();
        v.push(self.steady_index);
        v
    }

    /// Optimal threshold of the subsidised arm; ties resolve to passive.
    pub fn threshold_at(&self, w: f64) -> ThresholdPolicy {
        if self.steady_index <= w {
            return ThresholdPolicy::never(self.k);
        }
        ThresholdPolicy::new(
            (0..self.k)
                .map(|j| (1..=self.tau_bar).take_while(|&t| self.index(j, t) <= w).count())
                .collect(),
        )
    }

    /// Thresholds of the construction: the zero vector followed by the
    /// policy after each step, the last one being all-passive.
    pub fn construction_policies(&self) -> Vec<ThresholdPolicy> {
        let mut out = vec![ThresholdPolicy::zeros(self.k)];
        out.extend(self.construction.iter().map(|s| ThresholdPolicy::new(s.gamma.clone())));
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `(j, tau, W)`, 1-based, steady written as `s`.
    pub fn csv_rows(&self) -> Vec<[String; 3]> {
        let mut out = Vec::new();
        for j in 0..self.k {
            for t in 1..=self.tau_bar {
                out.push([(j + 1).to_string(), t.to_string(), crate::io::fmt_f64(self.index(j, t))]);
            }
        }
        out.push(["s".into(), "s".into(), crate::io::fmt_f64(self.steady_index)]);
        out
    }
}

fn next_reward(rm: &RewardModel, j: usize, g: usize) -> f64 {
    rm.passive(j, g + 1)
}

/// Greedy construction of the index table up to the truncation of `rm`.
pub fn whittle_closed_form(rm: &RewardModel, omega: &[f64]) -> WhittleIndexTable {
    let k = rm.k();
    let tau_bar = rm.tau_bar();
    let mut gamma = vec![0usize; k];
    // Running sums of sum_k sum_{r <= gamma_k} R_k^r w_k and sum_k (gamma_k + 1) w_k.
    let mut reward_sum = 0.0;
    let mut cycle = omega.iter().sum::<f64>();
    let mut index = vec![f64::NAN; k * tau_bar];
    let mut construction = Vec::with_capacity(k * tau_bar + 1);
    let mut tie_warnings = Vec::new();
    let mut running_max = f64::NEG_INFINITY;

    for step in 0..k * tau_bar {
        let open: Vec<usize> = (0..k).filter(|&j| gamma[j] < tau_bar).collect();
        let best = open
            .iter()
            .copied()
            .fold(None::<usize>, |acc, j| match acc {
                Some(b) if next_reward(rm, b, gamma[b]) >= next_reward(rm, j, gamma[j]) => Some(b),
                _ => Some(j),
            })
            .expect("an open channel remains");
        let top = next_reward(rm, best, gamma[best]);
        let tied: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&j| (next_reward(rm, j, gamma[j]) - top).abs() <= INDEX_TOL * top.abs().max(1.0))
            .collect();
        if tied.len() > 1 {
            tie_warnings.push(TieWarning { step, channels: tied });
        }
        // Exact arithmetic makes this sequence non-decreasing; the running
        // max removes rounding wobble between tied steps.
        let w = (rm.r1() + reward_sum - top * cycle).max(running_max);
        running_max = w;
        let age = gamma[best] + 1;
        index[best * tau_bar + age - 1] = w;
        reward_sum += top * omega[best];
        cycle += omega[best];
        gamma[best] = age;
        construction.push(ConstructionStep {
            state: BeliefLabel::Observed { channel: best, age },
            value: w,
            gamma: gamma.clone(),
        });
    }
    let steady_index = (rm.r1() + reward_sum - rm.steady() * cycle).max(running_max);
    construction.push(ConstructionStep {
        state: BeliefLabel::Steady,
        value: steady_index,
        gamma: vec![NEVER; k],
    });
    finish(k, tau_bar, index, steady_index, construction, tie_warnings)
}

fn finish(
    k: usize,
    tau_bar: usize,
    index: Vec<f64>,
    steady_index: f64,
    construction: Vec<ConstructionStep>,
    tie_warnings: Vec<TieWarning>,
) -> WhittleIndexTable {
    let mut breakpoints: Vec<f64> = Vec::new();
    for s in &construction {
        match breakpoints.last() {
            Some(&b) if s.value - b <= INDEX_TOL * b.abs().max(1.0) => {}
            _ => breakpoints.push(s.value),
        }
    }
    WhittleIndexTable {
        k,
        tau_bar,
        index,
        steady_index,
        breakpoints,
        construction,
        tie_warnings,
    }
}

pub const DEFAULT_ENVELOPE_BUDGET: u128 = 2_000_000;

/// Envelope search over `{0..gamma_max}^K` plus the all-passive policy.
///
/// Step i takes the smallest slope-intercept ratio
/// `(ER(prev) - ER(G)) / (passive(G) - passive(prev))` over policies `G`
/// above the previous one, moves to the largest minimiser and assigns the
/// ratio to every age it uncovered.
pub fn whittle_envelope_oracle(
    rm: &RewardModel,
    omega: &[f64],
    gamma_max: usize,
    budget: u128,
) -> Result<WhittleIndexTable, IndexError> {
    let k = rm.k();
    let tau_bar = rm.tau_bar();
    if gamma_max < tau_bar {
        return Err(IndexError::GammaMaxTooSmall { gamma_max, tau_bar });
    }
    let base = (gamma_max + 1) as u128;
    let candidates = base.checked_pow(k as u32).unwrap_or(u128::MAX);
    if candidates > budget {
        return Err(IndexError::SearchSpaceTooLarge { candidates, budget });
    }
    let n = candidates as usize;
    let decode = |mut c: usize| -> Vec<usize> {
        let mut g = vec![0; k];
        for slot in g.iter_mut().rev() {
            *slot = c % (gamma_max + 1);
            c /= gamma_max + 1;
        }
        g
    };
    let policies: Vec<Vec<usize>> = (0..n).map(decode).collect();
    let stats: Vec<(f64, f64)> = policies
        .par_iter()
        .map(|g| reward_and_passive_mass(&ThresholdPolicy::new(g.clone()), rm, omega))
        .collect();
    let never_stats = (rm.steady(), 1.0);

    let mut index = vec![f64::NAN; k * tau_bar];
    let mut construction = Vec::new();
    let mut prev = 0usize;
    let mut prev_gamma = vec![0usize; k];
    loop {
        let (er0, ps0) = stats[prev];
        let ratios: Vec<Option<f64>> = policies
            .par_iter()
            .zip(&stats)
            .map(|(g, &(er, ps))| {
                let above = g.iter().zip(&prev_gamma).all(|(a, b)| a >= b) && *g != prev_gamma;
                let denom = ps - ps0;
                (above && denom > 1e-15).then(|| (er0 - er) / denom)
            })
            .collect();
        let never_ratio = (er0 - never_stats.0) / (never_stats.1 - ps0);
        let w = ratios
            .iter()
            .flatten()
            .copied()
            .fold(never_ratio, f64::min);
        let tol = INDEX_TOL * w.abs().max(1.0);
        // Largest minimiser: all-passive dominates, then largest sum, then
        // lexicographically largest.
        let chosen = if never_ratio <= w + tol {
            None
        } else {
            ratios
                .iter()
                .enumerate()
                .filter(|(_, r)| r.is_some_and(|r| r <= w + tol))
                .map(|(c, _)| c)
                .max_by(|&a, &b| {
                    let sa: usize = policies[a].iter().sum();
                    let sb: usize = policies[b].iter().sum();
                    sa.cmp(&sb).then_with(|| policies[a].cmp(&policies[b]))
                })
        };
        let next_gamma = match chosen {
            Some(c) => policies[c].clone(),
            None => vec![tau_bar; k],
        };
        for j in 0..k {
            for age in prev_gamma[j] + 1..=next_gamma[j].min(tau_bar) {
                index[j * tau_bar + age - 1] = w;
            }
        }
        match chosen {
            Some(c) => {
                construction.push(ConstructionStep {
                    state: first_uncovered(&prev_gamma, &next_gamma),
                    value: w,
                    gamma: next_gamma.clone(),
                });
                prev = c;
                prev_gamma = next_gamma;
            }
            None => {
                construction.push(ConstructionStep {
                    state: BeliefLabel::Steady,
                    value: w,
                    gamma: vec![NEVER; k],
                });
                let steady_index = w;
                return Ok(finish(k, tau_bar, index, steady_index, construction, Vec::new()));
            }
        }
    }
}

fn first_uncovered(prev: &[usize], next: &[usize]) -> BeliefLabel {
    let channel = (0..prev.len()).find(|&j| next[j] > prev[j]).expect("strictly larger policy");
    BeliefLabel::Observed {
        channel,
        age: prev[channel] + 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexabilityReport {
    pub w: Vec<f64>,
    pub thresholds: Vec<ThresholdPolicy>,
    pub monotone: bool,
    /// First grid position whose threshold is not above its predecessor.
    pub first_violation: Option<usize>,
    /// Passive states among the tabulated ages, steady included.
    pub passive_states: Vec<usize>,
}

/// Solves the subsidised arm at every grid point and checks that the passive
/// set only grows.
pub fn indexability_check<F, E>(solver: F, wgrid: &[f64], tau_bar: usize) -> Result<IndexabilityReport, IndexError>
where
    F: Fn(f64) -> Result<ThresholdPolicy, E>,
    E: std::fmt::Display,
{
    let mut thresholds = Vec::with_capacity(wgrid.len());
    for &w in wgrid {
        thresholds.push(solver(w).map_err(|e| IndexError::Solver { w, msg: e.to_string() })?);
    }
    let first_violation = (1..thresholds.len()).find(|&i| !thresholds[i - 1].le(&thresholds[i]));
    let passive_states = thresholds
        .iter()
        .map(|g| {
            if g.is_never() {
                g.k() * tau_bar + 1
            } else {
                g.gamma.iter().map(|&x| x.min(tau_bar)).sum()
            }
        })
        .collect();
    Ok(IndexabilityReport {
        w: wgrid.to_vec(),
        thresholds,
        monotone: first_violation.is_none(),
        first_violation,
        passive_states,
    })
}
