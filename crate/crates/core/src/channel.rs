//! Markov channel models, belief propagation over the truncated belief space,
//! and the structural checks the index results rely on.
//!
//! Channels are labelled `0..K` throughout the library; exported files use
//! 1-based labels.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Allowed deviation of a row sum from 1.
    pub row_sum: f64,
    /// Allowed residual of `steady * P - steady`.
    pub stationary: f64,
    /// Entries above this count as edges of the transition digraph.
    pub positive_entry: f64,
    /// Truncation warning threshold on `|pi_j^tau_bar - steady|_inf`.
    pub closeness: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            row_sum: 1e-12,
            stationary: 1e-10,
            positive_entry: 1e-14,
            closeness: 1e-3,
        }
    }
}

pub const DEFAULT_TAU_BAR: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("transition matrix must be square and non-empty, got {0}x{1}")]
    Shape(usize, usize),
    #[error("entry ({row},{col}) = {value} is outside [0,1]")]
    EntryRange { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
    #[error("chain is not ergodic: {0}")]
    NonErgodic(String),
    #[error("expected {expected} rates, got {got}")]
    RateCount { expected: usize, got: usize },
    #[error("rate {0} is negative or not finite")]
    BadRate(usize),
    #[error("malformed channel document: {0}")]
    Parse(String),
}

/// K-state Markov channel with per-state throughput rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    p: DMatrix<f64>,
    rates: Vec<f64>,
    steady: Vec<f64>,
    label: Option<String>,
}

impl ChannelModel {
    pub fn new(p: DMatrix<f64>, rates: Vec<f64>) -> Result<Self, ChannelError> {
        Self::with_tolerances(p, rates, &Tolerances::default())
    }

    pub fn with_tolerances(
        p: DMatrix<f64>,
        rates: Vec<f64>,
        tol: &Tolerances,
    ) -> Result<Self, ChannelError> {
        validate_stochastic(&p, tol)?;
        if rates.len() != p.nrows() {
            return Err(ChannelError::RateCount {
                expected: p.nrows(),
                got: rates.len(),
            });
        }
        if let Some(i) = rates.iter().position(|r| !r.is_finite() || *r < 0.0) {
            return Err(ChannelError::BadRate(i));
        }
        let steady = steady_state_with(&p, tol)?;
        Ok(Self {
            p,
            rates,
            steady,
            label: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], rates: Vec<f64>) -> Result<Self, ChannelError> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(ChannelError::Shape(k, rows.first().map_or(0, Vec::len)));
        }
        let p = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
        Self::new(p, rates)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn k(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn steady(&self) -> &[f64] {
        &self.steady
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.p.row(j).iter().copied().collect()
    }

    /// Right-multiplies a row vector by P.
    pub fn step(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|i| (0..k).map(|l| v[l] * self.p[(l, i)]).sum())
            .collect()
    }

    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        (0..self.k()).all(|c| (self.p.column(c).sum() - 1.0).abs() <= tol)
    }

    pub fn to_toml(&self) -> String {
        let k = self.k();
        let doc = ChannelDoc {
            label: self.label.clone(),
            k,
            p: (0..k)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|(i, j)| format!("{:?}", self.p[(i, j)]))
                .collect(),
            rates: self.rates.iter().map(|r| format!("{r:?}")).collect(),
        };
        toml::to_string(&doc).expect("channel document serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ChannelError> {
        let doc: ChannelDoc =
            toml::from_str(text).map_err(|e| ChannelError::Parse(e.to_string()))?;
        doc.into_model()
    }
}

/// On-disk channel description. Numbers are decimal strings so that values
/// round-trip exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(rename = "K")]
    pub k: usize,
    /// Row-major transition matrix.
    #[serde(rename = "P")]
    pub p: Vec<String>,
    pub rates: Vec<String>,
}

impl ChannelDoc {
    pub fn into_model(self) -> Result<ChannelModel, ChannelError> {
        let parse = |s: &String| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| ChannelError::Parse(format!("{s:?}: {e}")))
        };
        if self.p.len() != self.k * self.k {
            return Err(ChannelError::Parse(format!(
                "P has {} entries, expected {}",
                self.p.len(),
                self.k * self.k
            )));
        }
        let vals = self.p.iter().map(parse).collect::<Result<Vec<_>, _>>()?;
        let rates = self.rates.iter().map(parse).collect::<Result<Vec<_>, _>>()?;
        let p = DMatrix::from_row_slice(self.k, self.k, &vals);
        let model = ChannelModel::new(p, rates)?;
        Ok(match self.label {
            Some(l) => model.with_label(l),
            None => model,
        })
    }
}

fn validate_stochastic(p: &DMatrix<f64>, tol: &Tolerances) -> Result<(), ChannelError> {
    if p.nrows() == 0 || p.nrows() != p.ncols() {
        return Err(ChannelError::Shape(p.nrows(), p.ncols()));
    }
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let v = p[(i, j)];
            if !(0.0..=1.0).contains(&v) {
                return Err(ChannelError::EntryRange {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
        let sum = p.row(i).sum();
        if (sum - 1.0).abs() > tol.row_sum {
            return Err(ChannelError::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Irreducibility (strong connectivity of the positive-entry digraph) and
/// aperiodicity (gcd of cycle lengths through BFS levels equals 1).
pub fn check_ergodic(p: &DMatrix<f64>, positive: f64) -> Result<(), ChannelError> {
    let k = p.nrows();
    let edge = |i: usize, j: usize| p[(i, j)] > positive;
    let reach = |forward: bool| {
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..k {
                let e = if forward { edge(u, v) } else { edge(v, u) };
                if e && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    if !reach(true) || !reach(false) {
        return Err(ChannelError::NonErgodic("reducible".into()));
    }
    let mut level = vec![usize::MAX; k];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in 0..k {
            if edge(u, v) && level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut period = 0usize;
    for u in 0..k {
        for v in 0..k {
            if edge(u, v) {
                let d = (level[u] + 1).abs_diff(level[v]);
                period = gcd(period, d);
            }
        }
    }
    if period != 1 {
        return Err(ChannelError::NonErgodic(format!("period {period}")));
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn steady_state(p: &DMatrix<f64>) -> Result<Vec<f64>, ChannelError> {
    steady_state_with(p, &Tolerances::default())
}

/// Solves `(P^T - I) x = 0` with the last equation replaced by `sum x = 1`.
pub fn steady_state_with(p: &DMatrix<f64>, tol: &Tolerances) -> Result<Vec<f64>, ChannelError> {
    validate_stochastic(p, tol)?;
    check_ergodic(p, tol.positive_entry)?;
    let k = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(k, k);
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut b = nalgebra::DVector::zeros(k);
    b[k - 1] = 1.0;
    let mut x: Vec<f64> = match a.lu().solve(&b) {
        Some(x) => x.iter().copied().collect(),
        None => power_iteration(p, 100_000),
    };
    if stationary_residual(p, &x) > tol.stationary {
        x = power_iteration(p, 1_000_000);
    }
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    if stationary_residual(p, &x) > tol.stationary {
        return Err(ChannelError::NonErgodic(
            "stationary solve did not converge".into(),
        ));
    }
    Ok(x)
}

pub fn power_iteration(p: &DMatrix<f64>, max_iter: usize) -> Vec<f64> {
    let k = p.nrows();
    let mut x = vec![1.0 / k as f64; k];
    for _ in 0..max_iter {
        let next: Vec<f64> = (0..k)
            .map(|i| (0..k).map(|l| x[l] * p[(l, i)]).sum())
            .collect();
        let diff = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if diff < 1e-15 {
            break;
        }
    }
    x
}

fn stationary_residual(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    let k = p.nrows();
    (0..k)
        .map(|i| ((0..k).map(|l| x[l] * p[(l, i)]).sum::<f64>() - x[i]).abs())
        .fold((x.iter().sum::<f64>() - 1.0).abs(), f64::max)
}

/// Observed channel and age, or the absorbing steady entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BeliefLabel {
    Observed { channel: usize, age: usize },
    Steady,
}

impl BeliefLabel {
    pub fn fresh(channel: usize) -> Self {
        BeliefLabel::Observed { channel, age: 1 }
    }

    /// Passive successor under truncation `tau_bar`.
    pub fn aged(self, tau_bar: usize) -> Self {
        match self {
            BeliefLabel::Observed { channel, age } if age < tau_bar => BeliefLabel::Observed {
                channel,
                age: age + 1,
            },
            _ => BeliefLabel::Steady,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub label: BeliefLabel,
    pub vector: Vec<f64>,
}

impl BeliefState {
    /// Belief one slot after observing `channel`: row `channel` of P.
    pub fn fresh(model: &ChannelModel, channel: usize) -> Self {
        Self {
            label: BeliefLabel::fresh(channel),
            vector: model.row(channel),
        }
    }

    pub fn steady(model: &ChannelModel) -> Self {
        Self {
            label: BeliefLabel::Steady,
            vector: model.steady().to_vec(),
        }
    }
}

/// One slot of passive evolution. Age `tau_bar` maps to the steady entry,
/// which is a fixed point.
pub fn belief_propagate(b: &BeliefState, model: &ChannelModel, tau_bar: usize) -> BeliefState {
    match b.label.aged(tau_bar) {
        BeliefLabel::Steady => BeliefState::steady(model),
        label => BeliefState {
            label,
            vector: model.step(&b.vector),
        },
    }
}

/// Beliefs `e_j P^tau` for every channel and age up to `tau_bar`, plus the
/// steady entry. Flat index: `j * tau_bar + (tau - 1)`, steady last.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTable {
    k: usize,
    tau_bar: usize,
    entries: Vec<Vec<f64>>,
    steady: Vec<f64>,
    tail_distance: f64,
}

impl BeliefTable {
    pub fn build(model: &ChannelModel, tau_bar: usize) -> Self {
        assert!(tau_bar >= 1, "truncation must be positive");
        let k = model.k();
        let mut entries = Vec::with_capacity(k * tau_bar);
        let mut tail_distance: f64 = 0.0;
        for j in 0..k {
            let mut v = model.row(j);
            for tau in 1..=tau_bar {
                if tau > 1 {
                    v = model.step(&v);
                }
                entries.push(v.clone());
            }
            let d = v
                .iter()
                .zip(model.steady())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            tail_distance = tail_distance.max(d);
        }
        Self {
            k,
            tau_bar,
            entries,
            steady: model.steady().to_vec(),
            tail_distance,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau_bar(&self) -> usize {
        self.tau_bar
    }

    /// Number of belief states including the steady entry.
    pub fn len(&self) -> usize {
        self.k * self.tau_bar + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steady_index(&self) -> usize {
        self.k * self.tau_bar
    }

    pub fn index(&self, label: BeliefLabel) -> usize {
        match label {
            BeliefLabel::Observed { channel, age } => {
                debug_assert!(channel < self.k && (1..=self.tau_bar).contains(&age));
                channel * self.tau_bar + age - 1
            }
            BeliefLabel::Steady => self.steady_index(),
        }
    }

    pub fn label(&self, idx: usize) -> BeliefLabel {
        if idx >= self.steady_index() {
            BeliefLabel::Steady
        } else {
            BeliefLabel::Observed {
                channel: idx / self.tau_bar,
                age: idx % self.tau_bar + 1,
            }
        }
    }

    pub fn entry(&self, channel: usize, age: usize) -> &[f64] {
        &self.entries[channel * self.tau_bar + age - 1]
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        if idx >= self.steady_index() {
            &self.steady
        } else {
            &self.entries[idx]
        }
    }

    pub fn steady(&self) -> &[f64] {
        &self.steady
    }

    /// `max_j |pi_j^tau_bar - steady|_inf`.
    pub fn tail_distance(&self) -> f64 {
        self.tail_distance
    }

    pub fn closeness_warning(&self, threshold: f64) -> Option<String> {
        (self.tail_distance > threshold).then(|| {
            format!(
                "truncation at tau_bar={} leaves beliefs {:.3e} from steady state",
                self.tau_bar, self.tail_distance
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct A1Report {
    pub passed: bool,
    /// First `(channel, tau, tau')` with `tau < tau'` and a larger maximum
    /// belief at `tau'`.
    pub violation: Option<(usize, usize, usize)>,
    pub doubly_stochastic: bool,
}

/// Checks that `max_i (e_j P^tau)_i` is non-increasing in `tau <= tau_bar`.
pub fn check_a1(model: &ChannelModel, tau_bar: usize) -> A1Report {
    let table = BeliefTable::build(model, tau_bar);
    let mut violation = None;
    'outer: for j in 0..model.k() {
        let peaks: Vec<f64> = (1..=tau_bar)
            .map(|t| table.entry(j, t).iter().copied().fold(0.0, f64::max))
            .collect();
        for t in 0..tau_bar {
            for t2 in t + 1..tau_bar {
                if peaks[t] < peaks[t2] - 1e-12 {
                    violation = Some((j, t + 1, t2 + 1));
                    break 'outer;
                }
            }
        }
    }
    A1Report {
        passed: violation.is_none(),
        violation,
        doubly_stochastic: model.is_doubly_stochastic(1e-12),
    }
}

/// Default Dirichlet concentration for the permutation weights.
pub const DEFAULT_CONCENTRATION: f64 = 1.0;

pub fn generate_doubly_stochastic(k: usize, seed: u64) -> DMatrix<f64> {
    generate_doubly_stochastic_with(k, seed, DEFAULT_CONCENTRATION)
}

/// Convex combination of permutation matrices with Dirichlet weights. All
/// `K!` permutations are used for `K <= 5`, otherwise `K^2` random ones.
pub fn generate_doubly_stochastic_with(k: usize, seed: u64, concentration: f64) -> DMatrix<f64> {
    assert!(k >= 2, "need at least two states");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = if k <= 5 {
        all_permutations(k)
    } else {
        (0..k * k)
            .map(|_| {
                let mut p: Vec<usize> = (0..k).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect()
    };
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut weights: Vec<f64> = perms.iter().map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.iter_mut().for_each(|w| *w = 1.0 / perms.len() as f64);
    }
    let mut p = DMatrix::zeros(k, k);
    for (perm, w) in perms.iter().zip(&weights) {
        for (i, &j) in perm.iter().enumerate() {
            p[(i, j)] += w;
        }
    }
    // Rescale rows so that the stochastic check holds to rounding.
    for i in 0..k {
        let s = p.row(i).sum();
        for j in 0..k {
            p[(i, j)] /= s;
        }
    }
    p
}

fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}
