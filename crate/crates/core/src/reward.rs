//! Per-slot rewards: a constant active reward and a passive reward table over
//! the truncated belief space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{BeliefLabel, BeliefTable, ChannelModel};

/// Slack used when checking monotonicity of the reward table.
pub const A2_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    /// `age == 0` refers to the active reward exceeding the passive one.
    #[error("rewards are not monotone at channel {channel}, age {age}")]
    A2Violation { channel: usize, age: usize },
    #[error("reward {0} is negative or not finite")]
    BadValue(f64),
    #[error("reward table shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    MaxBelief,
    Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    r1: f64,
    passive: Vec<f64>,
    steady: f64,
    k: usize,
    tau_bar: usize,
    kind: RewardKind,
}

impl RewardModel {
    /// Table-driven rewards; `rows[j][tau - 1]` is the passive reward at
    /// `(j, tau)`. Monotonicity is enforced.
    pub fn from_table(r1: f64, rows: &[Vec<f64>], steady: f64) -> Result<Self, RewardError> {
        let k = rows.len();
        let tau_bar = rows.first().map_or(0, Vec::len);
        if k == 0 || tau_bar == 0 || rows.iter().any(|r| r.len() != tau_bar) {
            return Err(RewardError::Shape("need K non-empty rows of equal length".into()));
        }
        let rm = Self {
            r1,
            passive: rows.concat(),
            steady,
            k,
            tau_bar,
            kind: RewardKind::Table,
        };
        rm.validate()?;
        Ok(rm)
    }

    /// Same values as [`from_table`](Self::from_table) but without the
    /// monotonicity check, for experimenting with violating tables.
    pub fn from_table_unchecked(r1: f64, rows: &[Vec<f64>], steady: f64) -> Self {
        Self {
            r1,
            passive: rows.concat(),
            steady,
            k: rows.len(),
            tau_bar: rows[0].len(),
            kind: RewardKind::Table,
        }
    }

    fn validate(&self) -> Result<(), RewardError> {
        for &v in self.passive.iter().chain([&self.r1, &self.steady]) {
            if !v.is_finite() || v < 0.0 {
                return Err(RewardError::BadValue(v));
            }
        }
        match check_a2(self).violation {
            Some((channel, age)) => Err(RewardError::A2Violation { channel, age }),
            None => Ok(()),
        }
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau_bar(&self) -> usize {
        self.tau_bar
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    /// Passive reward at `(channel, age)`; ages past the truncation get the
    /// steady value.
    pub fn passive(&self, channel: usize, age: usize) -> f64 {
        debug_assert!(age >= 1);
        if age > self.tau_bar {
            self.steady
        } else {
            self.passive[channel * self.tau_bar + age - 1]
        }
    }

    pub fn steady(&self) -> f64 {
        self.steady
    }

    pub fn passive_label(&self, label: BeliefLabel) -> f64 {
        match label {
            BeliefLabel::Observed { channel, age } => self.passive(channel, age),
            BeliefLabel::Steady => self.steady,
        }
    }

    /// Passive rewards in the flat belief-table order, steady last.
    pub fn passive_flat(&self) -> Vec<f64> {
        let mut v = self.passive.clone();
        v.push(self.steady);
        v
    }

    /// All rewards multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            r1: self.r1 * c,
            passive: self.passive.iter().map(|v| v * c).collect(),
            steady: self.steady * c,
            ..self.clone()
        }
    }

    /// Rows `(j, tau, reward)` with 1-based channel labels; the steady entry
    /// is written with `j = tau = "s"`.
    pub fn csv_rows(&self) -> Vec<[String; 3]> {
        let mut out = Vec::with_capacity(self.passive.len() + 1);
        for j in 0..self.k {
            for tau in 1..=self.tau_bar {
                out.push([
                    (j + 1).to_string(),
                    tau.to_string(),
                    crate::io::fmt_f64(self.passive(j, tau)),
                ]);
            }
        }
        out.push(["s".into(), "s".into(), crate::io::fmt_f64(self.steady)]);
        out
    }
}

/// `R1 = sum_k p^s_k r_k` and passive reward `max_i pi_i * R1`.
pub fn max_belief_reward(model: &ChannelModel, table: &BeliefTable) -> Result<RewardModel, RewardError> {
    let r1: f64 = model
        .steady()
        .iter()
        .zip(model.rates())
        .map(|(p, r)| p * r)
        .sum();
    let peak = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let k = model.k();
    let tau_bar = table.tau_bar();
    let passive = (0..k)
        .flat_map(|j| (1..=tau_bar).map(move |t| (j, t)))
        .map(|(j, t)| peak(table.entry(j, t)) * r1)
        .collect();
    let rm = RewardModel {
        r1,
        passive,
        steady: peak(table.steady()) * r1,
        k,
        tau_bar,
        kind: RewardKind::MaxBelief,
    };
    rm.validate()?;
    Ok(rm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct A2Report {
    pub passed: bool,
    /// First `(channel, age)` whose successor earns more. Age 0 means the
    /// fresh passive reward exceeds the active one; age `tau_bar` means the
    /// steady entry exceeds the last tabulated age.
    pub violation: Option<(usize, usize)>,
}

pub fn check_a2(rm: &RewardModel) -> A2Report {
    let mut violation = None;
    'outer: for j in 0..rm.k {
        if rm.r1 < rm.passive(j, 1) - A2_TOL {
            violation = Some((j, 0));
            break;
        }
        for tau in 1..=rm.tau_bar {
            let next = if tau == rm.tau_bar {
                rm.steady
            } else {
                rm.passive(j, tau + 1)
            };
            if rm.passive(j, tau) < next - A2_TOL {
                violation = Some((j, tau));
                break 'outer;
            }
        }
    }
    A2Report {
        passed: violation.is_none(),
        violation,
    }
}
