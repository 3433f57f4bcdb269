//! The relaxed problem: activate the highest-index states so that the
//! average activation rate meets the pilot budget, randomising at one
//! critical state.

use serde::Serialize;

use super::FluidError;
use crate::arm::Arm;

/// Global priority over `(class, state)` pairs: index descending, then class
/// ascending, then age descending, then channel ascending.
///
/// Ordering equal indices by descending age keeps every class's active set
/// a suffix of ages in each channel.
pub fn priority_order(arms: &[&Arm]) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = arms
        .iter()
        .enumerate()
        .flat_map(|(c, a)| (0..a.n_states()).map(move |s| (c, s)))
        .collect();
    v.sort_by(|&(c1, s1), &(c2, s2)| {
        let (a1, a2) = (arms[c1], arms[c2]);
        a2.index_at(s2)
            .total_cmp(&a1.index_at(s1))
            .then(c1.cmp(&c2))
            .then(a2.age_of(s2).cmp(&a1.age_of(s1)))
            .then(a1.channel_of(s1).cmp(&a2.channel_of(s2)))
    });
    v
}

/// Stationary behaviour of one class under given per-state activation
/// probabilities, on the approximated kernel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRel {
    pub activation: Vec<f64>,
    /// Occupancy per unit of class mass, flat state order.
    pub occupancy: Vec<f64>,
    /// Activations per slot per unit of class mass.
    pub rate: f64,
    /// Average reward per slot per unit of class mass.
    pub reward: f64,
}

/// Renewal assembly: after a fresh observation of channel `j` (probability
/// `omega_j`) the arm walks through the ages until it is activated. Each
/// state's occupancy is its expected number of visits per cycle divided by
/// the expected cycle length.
pub fn class_renewal(arm: &Arm, activation: &[f64]) -> ClassRel {
    let n = arm.n_states();
    let steady = n - 1;
    let tau_bar = arm.tau_bar();
    let mut visits = vec![0.0; n];
    let mut reach_steady = 0.0;
    for j in 0..arm.k() {
        let w = arm.omega[j];
        let mut surv = 1.0;
        for t in 1..=tau_bar {
            let s = j * tau_bar + t - 1;
            visits[s] += w * surv;
            surv *= 1.0 - activation[s];
        }
        reach_steady += w * surv;
    }
    let a_s = activation[steady];
    let absorbed = reach_steady > 0.0 && a_s <= 0.0;
    let occupancy = if absorbed {
        let mut o = vec![0.0; n];
        o[steady] = 1.0;
        o
    } else {
        if reach_steady > 0.0 {
            visits[steady] = reach_steady / a_s;
        }
        let len: f64 = visits.iter().sum();
        visits.iter().map(|v| v / len).collect()
    };
    let rate = occupancy.iter().zip(activation).map(|(o, a)| o * a).sum();
    let rm = &arm.rewards;
    let passive = rm.passive_flat();
    let reward = occupancy
        .iter()
        .zip(activation)
        .zip(&passive)
        .map(|((o, a), r)| o * (a * rm.r1() + (1.0 - a) * r))
        .sum();
    ClassRel {
        activation: activation.to_vec(),
        occupancy,
        rate,
        reward,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelSolution {
    /// Index at the critical state; `-inf` when the budget covers everyone.
    pub wstar: f64,
    pub rho: f64,
    /// `(class, state)` randomised at rate `rho`.
    pub critical: Option<(usize, usize)>,
    pub budget: f64,
    pub classes: Vec<ClassRel>,
    /// Weighted average reward, the relaxation's upper bound.
    pub reward: f64,
}

impl RelSolution {
    pub fn total_rate(&self, weights: &[f64]) -> f64 {
        self.classes.iter().zip(weights).map(|(c, w)| c.rate * w).sum()
    }
}

fn assemble(arms: &[&Arm], order: &[(usize, usize)], cut: usize, rho: f64) -> Vec<ClassRel> {
    let mut act: Vec<Vec<f64>> = arms.iter().map(|a| vec![0.0; a.n_states()]).collect();
    for &(c, s) in &order[..cut] {
        act[c][s] = 1.0;
    }
    if cut < order.len() {
        let (c, s) = order[cut];
        act[c][s] = rho;
    }
    arms.iter().zip(&act).map(|(a, x)| class_renewal(a, x)).collect()
}

fn rate(classes: &[ClassRel], weights: &[f64]) -> f64 {
    classes.iter().zip(weights).map(|(c, w)| c.rate * w).sum()
}

/// Solves the relaxation for classes with the given mass `weights` and an
/// average activation `budget`.
pub fn solve_relaxation(arms: &[&Arm], weights: &[f64], budget: f64) -> Result<RelSolution, FluidError> {
    if budget <= 0.0 || !budget.is_finite() {
        return Err(FluidError::Infeasible(format!("budget {budget} must be positive")));
    }
    let order = priority_order(arms);
    let finish = |classes: Vec<ClassRel>, critical: Option<(usize, usize)>, rho: f64| {
        let reward = classes.iter().zip(weights).map(|(c, w)| c.reward * w).sum();
        RelSolution {
            wstar: critical.map_or(f64::NEG_INFINITY, |(c, s)| arms[c].index_at(s)),
            rho,
            critical,
            budget,
            classes,
            reward,
        }
    };
    let full = assemble(arms, &order, order.len(), 0.0);
    if rate(&full, weights) <= budget {
        return Ok(finish(full, None, 1.0));
    }
    // Activation grows with the cut; find the first cut that overshoots.
    let mut lo = 0usize;
    let mut hi = order.len();
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if rate(&assemble(arms, &order, mid, 0.0), weights) > budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let cut = lo;
    let at = |rho: f64| rate(&assemble(arms, &order, cut, rho), weights);
    let (mut a, mut b) = (0.0f64, 1.0f64);
    if at(0.0) >= budget {
        b = 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if at(mid) > budget {
            b = mid;
        } else {
            a = mid;
        }
    }
    let rho = if (at(a) - budget).abs() <= (at(b) - budget).abs() { a } else { b };
    Ok(finish(assemble(arms, &order, cut, rho), Some(order[cut]), rho))
}
