//! Joint value iteration for a handful of users sharing M pilots.
//!
//! Joint states are mixed-radix integers with user 0 as the least
//! significant digit; actions are bitmasks of the activated users.

use rayon::prelude::*;

use super::{OracleError, RviOptions, SingleArmMdp};

pub const DEFAULT_JOINT_BUDGET: u128 = 5_000_000;
pub const DEFAULT_JOINT_SWEEPS: usize = 10_000;
const MAX_USERS: usize = 12;

/// One user's transition structure, subsidy-free.
#[derive(Debug, Clone)]
pub struct JointArm {
    passive_next: Vec<u32>,
    active: Vec<Vec<(u32, f64)>>,
    passive_reward: Vec<f64>,
    r1: f64,
}

impl JointArm {
    pub fn from_mdp(mdp: &SingleArmMdp) -> Self {
        let n = mdp.n_states();
        Self {
            passive_next: (0..n).map(|s| mdp.passive_next(s) as u32).collect(),
            active: (0..n)
                .map(|s| mdp.active_successors(s).iter().map(|&(t, p)| (t as u32, p)).collect())
                .collect(),
            passive_reward: (0..n).map(|s| mdp.passive_reward(s)).collect(),
            r1: mdp.r1(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.passive_next.len()
    }
}

#[derive(Debug, Clone)]
pub struct JointMdp {
    arms: Vec<JointArm>,
    m: usize,
    strides: Vec<usize>,
    n_states: usize,
    actions: Vec<u32>,
}

/// How the policy under evaluation picks its action set.
#[derive(Debug, Clone)]
pub enum JointPolicy {
    /// One action mask per joint state.
    Deterministic(Vec<u32>),
    /// Uniform over all subsets of size `min(M, N)`.
    UniformSubsets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    pub gain: f64,
    pub bias: Vec<f64>,
    /// Optimal action mask per joint state.
    pub policy: Vec<u32>,
    pub sweeps: usize,
}

impl RviOptions {
    pub fn joint() -> Self {
        Self {
            tol: 1e-9,
            max_iter: DEFAULT_JOINT_SWEEPS,
            ..Self::default()
        }
    }
}

impl JointMdp {
    pub fn new(arms: Vec<JointArm>, m: usize, budget: u128) -> Result<Self, OracleError> {
        let n = arms.len();
        if n == 0 || n > MAX_USERS {
            return Err(OracleError::Invalid(format!("joint model needs 1..={MAX_USERS} users")));
        }
        let mut strides = Vec::with_capacity(n);
        let mut states: u128 = 1;
        for a in &arms {
            strides.push(states as usize);
            states = states.saturating_mul(a.n_states() as u128);
        }
        let actions: Vec<u32> = {
            let mut v: Vec<u32> = (0u32..1 << n).filter(|a| a.count_ones() as usize <= m).collect();
            v.sort_by_key(|a| (a.count_ones(), *a));
            v
        };
        let needed = states.saturating_mul(actions.len() as u128);
        if needed > budget {
            return Err(OracleError::BudgetExceeded { needed, budget });
        }
        Ok(Self {
            arms,
            m,
            strides,
            n_states: states as usize,
            actions,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_users(&self) -> usize {
        self.arms.len()
    }

    pub fn pilots(&self) -> usize {
        self.m
    }

    /// Action masks in tie-break order: fewer users first, then by mask.
    pub fn actions(&self) -> &[u32] {
        &self.actions
    }

    pub fn locals(&self, s: usize) -> Vec<usize> {
        self.arms
            .iter()
            .zip(&self.strides)
            .map(|(a, &st)| (s / st) % a.n_states())
            .collect()
    }

    pub fn state_of(&self, locals: &[usize]) -> usize {
        locals.iter().zip(&self.strides).map(|(l, st)| l * st).sum()
    }

    /// Builds a deterministic policy from a selector over per-user states.
    pub fn policy_from<F>(&self, select: F) -> Vec<u32>
    where
        F: Fn(&[usize]) -> u32 + Sync,
    {
        (0..self.n_states)
            .into_par_iter()
            .map(|s| select(&self.locals(s)))
            .collect()
    }

    fn decode(&self, s: usize, out: &mut [usize; MAX_USERS]) {
        for (n, (a, &st)) in self.arms.iter().zip(&self.strides).enumerate() {
            out[n] = (s / st) % a.n_states();
        }
    }

    /// Immediate reward plus expected relative value after action `mask`.
    fn q(&self, h: &[f64], locals: &[usize; MAX_USERS], mask: u32) -> f64 {
        let mut reward = 0.0;
        let mut base = 0usize;
        let mut act: [(usize, &[(u32, f64)]); MAX_USERS] = [(0, &[]); MAX_USERS];
        let mut na = 0;
        for (n, arm) in self.arms.iter().enumerate() {
            let l = locals[n];
            if mask >> n & 1 == 1 {
                reward += arm.r1;
                act[na] = (self.strides[n], &arm.active[l]);
                na += 1;
            } else {
                reward += arm.passive_reward[l];
                base += arm.passive_next[l] as usize * self.strides[n];
            }
        }
        reward + expect(h, base, &act[..na])
    }

    fn sweep<F>(&self, h: &[f64], next: &mut [f64], step: F) -> (f64, f64)
    where
        F: Fn(usize, &[usize; MAX_USERS]) -> f64 + Sync,
    {
        next.par_chunks_mut(4096)
            .enumerate()
            .map(|(c, chunk)| {
                let mut locals = [0usize; MAX_USERS];
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let s = c * 4096 + i;
                    self.decode(s, &mut locals);
                    let t = step(s, &locals);
                    let d = t - h[s];
                    lo = lo.min(d);
                    hi = hi.max(d);
                    *slot = t;
                }
                (lo, hi)
            })
            .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)))
    }
}

fn expect(h: &[f64], base: usize, act: &[(usize, &[(u32, f64)])]) -> f64 {
    match act.split_first() {
        None => h[base],
        Some((&(stride, succ), rest)) => succ
            .iter()
            .map(|&(t, p)| p * expect(h, base + t as usize * stride, rest))
            .sum(),
    }
}

fn rvi<F>(jm: &JointMdp, opts: &RviOptions, step: F) -> Result<(f64, Vec<f64>, usize), OracleError>
where
    F: Fn(&[f64], usize, &[usize; MAX_USERS]) -> f64 + Sync,
{
    let n = jm.n_states;
    let kappa = opts.kappa;
    let mut h = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut span = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (lo, hi) = {
            let hr = &h;
            jm.sweep(hr, &mut next, |s, l| (1.0 - kappa) * hr[s] + kappa * step(hr, s, l))
        };
        let r = next[opts.reference];
        for (dst, src) in h.iter_mut().zip(&next) {
            *dst = src - r;
        }
        span = (hi - lo) / kappa;
        if span < opts.tol {
            return Ok((0.5 * (hi + lo) / kappa, h, it));
        }
    }
    Err(OracleError::NoConvergence {
        iterations: opts.max_iter,
        residual: span,
    })
}

/// Optimal long-run average reward of the joint system and its policy.
pub fn vi_joint_average(jm: &JointMdp, opts: &RviOptions) -> Result<JointSolution, OracleError> {
    let (gain, bias, sweeps) = rvi(jm, opts, |h, _, l| {
        jm.actions.iter().map(|&a| jm.q(h, l, a)).fold(f64::NEG_INFINITY, f64::max)
    })?;
    let tie = opts.tie * (1.0 + gain.abs());
    let policy = (0..jm.n_states)
        .into_par_iter()
        .map(|s| {
            let mut l = [0usize; MAX_USERS];
            jm.decode(s, &mut l);
            let qs: Vec<f64> = jm.actions.iter().map(|&a| jm.q(&bias, &l, a)).collect();
            let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let i = qs.iter().position(|&q| q >= best - tie).expect("non-empty action set");
            jm.actions[i]
        })
        .collect();
    Ok(JointSolution {
        gain,
        bias,
        policy,
        sweeps,
    })
}

/// Long-run average reward of a fixed policy.
pub fn evaluate_joint(jm: &JointMdp, policy: &JointPolicy, opts: &RviOptions) -> Result<f64, OracleError> {
    match policy {
        JointPolicy::Deterministic(map) => {
            if map.len() != jm.n_states {
                return Err(OracleError::Invalid("policy map has wrong length".into()));
            }
            if map.iter().any(|a| a.count_ones() as usize > jm.m) {
                return Err(OracleError::Invalid("policy uses more than M pilots".into()));
            }
            rvi(jm, opts, |h, s, l| jm.q(h, l, map[s])).map(|r| r.0)
        }
        JointPolicy::UniformSubsets => {
            let size = jm.m.min(jm.n_users()) as u32;
            let subsets: Vec<u32> = jm.actions.iter().copied().filter(|a| a.count_ones() == size).collect();
            let w = 1.0 / subsets.len() as f64;
            rvi(jm, opts, |h, _, l| subsets.iter().map(|&a| jm.q(h, l, a)).sum::<f64>() * w).map(|r| r.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_doubly_stochastic, BeliefTable, ChannelModel};
    use crate::oracle::{vi_average, Kernel};
    use crate::reward::max_belief_reward;

    fn arm(seed: u64, tau_bar: usize, kernel: Kernel) -> (JointArm, SingleArmMdp) {
        let m = ChannelModel::new(generate_doubly_stochastic(3, seed), vec![0.3, 1.1, 2.6]).unwrap();
        let rm = max_belief_reward(&m, &BeliefTable::build(&m, tau_bar)).unwrap();
        let mdp = SingleArmMdp::new(&m, &rm, kernel, 0.0);
        (JointArm::from_mdp(&mdp), mdp)
    }

    #[test]
    fn single_user_single_pilot_is_always_active() {
        let (a, mdp) = arm(1, 5, Kernel::Original);
        let jm = JointMdp::new(vec![a], 1, DEFAULT_JOINT_BUDGET).unwrap();
        let sol = vi_joint_average(&jm, &RviOptions::joint()).unwrap();
        assert!((sol.gain - mdp.r1()).abs() < 1e-8);
        assert!(sol.policy.iter().all(|&a| a == 1));
    }

    #[test]
    fn budget_is_enforced() {
        let (a, _) = arm(1, 8, Kernel::Original);
        let err = JointMdp::new(vec![a.clone(), a.clone(), a.clone(), a], 3, DEFAULT_JOINT_BUDGET).unwrap_err();
        assert!(matches!(err, OracleError::BudgetExceeded { .. }));
    }

    #[test]
    fn no_pilots_recovers_sum_of_steady_rewards() {
        let (a, mdp) = arm(2, 4, Kernel::Original);
        let (b, mdp2) = arm(3, 4, Kernel::Original);
        let jm = JointMdp::new(vec![a, b], 0, DEFAULT_JOINT_BUDGET).unwrap();
        let sol = vi_joint_average(&jm, &RviOptions::joint()).unwrap();
        let expect = mdp.passive_reward(mdp.n_states() - 1) + mdp2.passive_reward(mdp2.n_states() - 1);
        assert!((sol.gain - expect).abs() < 1e-8);
    }

    #[test]
    fn identical_users_give_symmetric_values() {
        let (a, _) = arm(4, 5, Kernel::Original);
        let jm = JointMdp::new(vec![a.clone(), a], 1, DEFAULT_JOINT_BUDGET).unwrap();
        let sol = vi_joint_average(&jm, &RviOptions::joint()).unwrap();
        let n = 16;
        for s1 in 0..n {
            for s2 in 0..n {
                let x = sol.bias[jm.state_of(&[s1, s2])];
                let y = sol.bias[jm.state_of(&[s2, s1])];
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn decoupled_users_add_up() {
        // With one pilot per user the joint problem splits into independent
        // always-active arms.
        let (a, m1) = arm(5, 4, Kernel::Original);
        let (b, m2) = arm(6, 4, Kernel::Original);
        let jm = JointMdp::new(vec![a, b], 2, DEFAULT_JOINT_BUDGET).unwrap();
        let sol = vi_joint_average(&jm, &RviOptions::joint()).unwrap();
        let g1 = vi_average(&m1, &RviOptions::default()).unwrap().gain;
        let g2 = vi_average(&m2, &RviOptions::default()).unwrap().gain;
        assert!((sol.gain - g1 - g2).abs() < 1e-7);
    }

    #[test]
    fn evaluation_of_optimal_policy_reproduces_gain() {
        let (a, _) = arm(7, 4, Kernel::Original);
        let (b, _) = arm(8, 4, Kernel::Original);
        let jm = JointMdp::new(vec![a, b], 1, DEFAULT_JOINT_BUDGET).unwrap();
        let sol = vi_joint_average(&jm, &RviOptions::joint()).unwrap();
        let g = evaluate_joint(&jm, &JointPolicy::Deterministic(sol.policy.clone()), &RviOptions::joint()).unwrap();
        assert!((g - sol.gain).abs() < 1e-7);
        let r = evaluate_joint(&jm, &JointPolicy::UniformSubsets, &RviOptions::joint()).unwrap();
        assert!(r <= sol.gain + 1e-8);
    }
}
