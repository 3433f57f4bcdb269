//! How far the steady-state approximation can be from the original arm.
//!
//! Two bounding models replace the random fresh belief after an activation by
//! the best and the worst fresh belief in terms of relative value. Their gains
//! sandwich the gain of the original arm, which yields a computable bound on
//! the relative error of the approximated gain.

use serde::Serialize;
use thiserror::Error;

use crate::channel::{BeliefTable, ChannelModel};
use crate::index::{omega, whittle_closed_form, ThresholdPolicy, WhittleIndexTable};
use crate::oracle::{vi_average, Action, ActiveBackup, Kernel, OracleError, RviOptions, SingleArmMdp};
use crate::reward::RewardModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("lower-bound gain {0} is not positive")]
    DegenerateGain(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub w: f64,
    pub g_app: f64,
    pub g_orig: f64,
    pub g_max: f64,
    pub g_min: f64,
    pub d: f64,
    pub rel_err: f64,
}

impl BoundReport {
    pub const CSV_HEADER: [&'static str; 7] = ["W", "g_app", "g_orig", "g_max", "g_min", "D", "relErr"];

    pub fn csv_row(&self) -> [String; 7] {
        [self.w, self.g_app, self.g_orig, self.g_max, self.g_min, self.d, self.rel_err].map(crate::io::fmt_f64)
    }
}

/// Average reward of the approximated arm under threshold `gamma`:
/// `(R1 + sum_k p_k sum_{i <= G_k} (R_k^i + W)) / sum_k (G_k + 1) p_k`.
pub fn g_app_closed_form(w: f64, rm: &RewardModel, omega: &[f64], gamma: &ThresholdPolicy) -> f64 {
    if gamma.is_never() {
        return rm.steady() + w;
    }
    let mut num = rm.r1();
    let mut den = 0.0;
    for (k, &g) in gamma.gamma.iter().enumerate() {
        num += omega[k] * (1..=g).map(|i| rm.passive(k, i) + w).sum::<f64>();
        den += (g + 1) as f64 * omega[k];
    }
    num / den
}

/// Long-run average of the cycle "observe channel j, stay passive for `t`
/// slots, activate".
pub fn cycle_average(rm: &RewardModel, w: f64, channel: usize, t: usize) -> f64 {
    (rm.r1() + (1..=t).map(|i| rm.passive(channel, i) + w).sum::<f64>()) / (t + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundGains {
    pub g_max: f64,
    pub g_min: f64,
    pub g_max_closed: f64,
    pub g_min_closed: f64,
    /// Whether both bounding policies came out as per-channel thresholds.
    pub threshold_structure: bool,
}

/// Per-channel cycle averages of a solved bounding policy. `None` if the
/// policy is not a threshold on some channel.
fn policy_cycles(policy: &[Action], rm: &RewardModel, w: f64) -> Option<Vec<f64>> {
    let k = rm.k();
    let tau_bar = rm.tau_bar();
    let steady_passive = policy[k * tau_bar] == Action::Passive;
    (0..k)
        .map(|j| {
            let acts = &policy[j * tau_bar..(j + 1) * tau_bar];
            let t = acts.iter().take_while(|&&a| a == Action::Passive).count();
            if acts[t..].contains(&Action::Passive) {
                return None;
            }
            Some(if t == tau_bar && steady_passive {
                rm.steady() + w
            } else {
                cycle_average(rm, w, j, t)
            })
        })
        .collect()
}

pub fn bound_mdps(
    table: &BeliefTable,
    rm: &RewardModel,
    w: f64,
    opts: &RviOptions,
) -> Result<BoundGains, BoundsError> {
    let base = SingleArmMdp::from_table(table, rm, Kernel::Approximated, w);
    let hi = vi_average(&base.clone().with_backup(ActiveBackup::MaxFresh), opts)?;
    let lo = vi_average(&base.with_backup(ActiveBackup::MinFresh), opts)?;
    let hi_cycles = policy_cycles(&hi.policy, rm, w);
    let lo_cycles = policy_cycles(&lo.policy, rm, w);
    let threshold_structure = hi_cycles.is_some() && lo_cycles.is_some();
    // Without threshold structure fall back to the best cycle per channel.
    let best_cycles = || -> Vec<f64> {
        (0..rm.k())
            .map(|j| {
                (0..=rm.tau_bar())
                    .map(|t| cycle_average(rm, w, j, t))
                    .fold(rm.steady() + w, f64::max)
            })
            .collect()
    };
    let g_max_closed = hi_cycles.unwrap_or_else(best_cycles).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let g_min_closed = lo_cycles.unwrap_or_else(best_cycles).into_iter().fold(f64::INFINITY, f64::min);
    Ok(BoundGains {
        g_max: hi.gain,
        g_min: lo.gain,
        g_max_closed,
        g_min_closed,
        threshold_structure,
    })
}

/// Bound and measured error of the approximated gain at one subsidy.
pub fn error_bound(
    model: &ChannelModel,
    rm: &RewardModel,
    w: f64,
    opts: &RviOptions,
) -> Result<BoundReport, BoundsError> {
    let table = BeliefTable::build(model, rm.tau_bar());
    let om = omega(model);
    let index = whittle_closed_form(rm, &om);
    error_bound_with(&table, rm, &om, &index, w, opts)
}

pub fn error_bound_with(
    table: &BeliefTable,
    rm: &RewardModel,
    omega: &[f64],
    index: &WhittleIndexTable,
    w: f64,
    opts: &RviOptions,
) -> Result<BoundReport, BoundsError> {
    let g_app = g_app_closed_form(w, rm, omega, &index.threshold_at(w));
    let g_orig = vi_average(&SingleArmMdp::from_table(table, rm, Kernel::Original, w), opts)?.gain;
    let gains = bound_mdps(table, rm, w, opts)?;
    if gains.g_min <= 0.0 {
        return Err(BoundsError::DegenerateGain(gains.g_min));
    }
    let d = (1.0 - g_app / gains.g_max).max(g_app / gains.g_min - 1.0);
    Ok(BoundReport {
        w,
        g_app,
        g_orig,
        g_max: gains.g_max,
        g_min: gains.g_min,
        d,
        rel_err: (1.0 - g_app / g_orig).abs(),
    })
}

/// Reports over a grid of subsidies, sharing the index table.
pub fn bound_sweep(
    model: &ChannelModel,
    rm: &RewardModel,
    wgrid: &[f64],
    opts: &RviOptions,
) -> Result<Vec<BoundReport>, BoundsError> {
    use rayon::prelude::*;
    let table = BeliefTable::build(model, rm.tau_bar());
    let om = omega(model);
    let index = whittle_closed_form(rm, &om);
    wgrid
        .par_iter()
        .map(|&w| error_bound_with(&table, rm, &om, &index, w, opts))
        .collect()
}
