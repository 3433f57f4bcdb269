//! Two-class fluid limit of the index policy.
//!
//! The state is the vector of belief occupancies, class 1 first. Within a
//! class the layout follows the belief table (channel-major, ages ascending,
//! steady entry last). Each slot a fraction `lambda` of the population is
//! activated, filling states in priority order.

mod rel;

pub use rel::{class_renewal, priority_order, solve_relaxation, ClassRel, RelSolution};

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::arm::Arm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("infeasible relaxation: {0}")]
    Infeasible(String),
    #[error("class {class} steady index {steady} is below the critical index {wstar}")]
    SteadyBelowCritical { class: usize, steady: f64, wstar: f64 },
    #[error("linear region around the fixed point is empty")]
    RegionEmpty,
    #[error("classes differ in shape: {0}")]
    Shape(String),
    #[error("fixed-point system is singular")]
    Singular,
}

/// Two classes, their mass split and the pilot fraction.
#[derive(Debug, Clone)]
pub struct FluidSystem {
    arms: [Arm; 2],
    delta: [f64; 2],
    lambda: f64,
    per_class: usize,
    /// Global states sorted by priority.
    order: Vec<usize>,
    rank: Vec<usize>,
    index: Vec<f64>,
    passive_next: Vec<usize>,
    fresh: Vec<Vec<(usize, f64)>>,
}

impl FluidSystem {
    pub fn new(class1: Arm, class2: Arm, delta: [f64; 2], lambda: f64) -> Result<Self, FluidError> {
        if class1.k() != class2.k() || class1.tau_bar() != class2.tau_bar() {
            return Err(FluidError::Shape("both classes need the same K and truncation".into()));
        }
        if delta.iter().any(|d| *d < 0.0) || (delta[0] + delta[1] - 1.0).abs() > 1e-12 {
            return Err(FluidError::Shape(format!("class fractions {delta:?} must sum to 1")));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(FluidError::Infeasible(format!("pilot fraction {lambda} outside (0,1]")));
        }
        let per_class = class1.n_states();
        let arms = [class1, class2];
        let order: Vec<usize> = priority_order(&[&arms[0], &arms[1]])
            .into_iter()
            .map(|(c, s)| c * per_class + s)
            .collect();
        let mut rank = vec![0; 2 * per_class];
        for (r, &g) in order.iter().enumerate() {
            rank[g] = r;
        }
        let mut index = Vec::with_capacity(2 * per_class);
        let mut passive_next = Vec::with_capacity(2 * per_class);
        let mut fresh = Vec::with_capacity(2 * per_class);
        for (c, arm) in arms.iter().enumerate() {
            let off = c * per_class;
            let tau_bar = arm.tau_bar();
            let to_fresh: Vec<(usize, f64)> = arm
                .omega
                .iter()
                .enumerate()
                .map(|(j, &p)| (off + j * tau_bar, p))
                .collect();
            for s in 0..per_class {
                index.push(arm.index_at(s));
                passive_next.push(off + arm.table.index(arm.table.label(s).aged(tau_bar)));
                fresh.push(to_fresh.clone());
            }
        }
        Ok(Self {
            arms,
            delta,
            lambda,
            per_class,
            order,
            rank,
            index,
            passive_next,
            fresh,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.per_class
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn delta(&self) -> [f64; 2] {
        self.delta
    }

    pub fn arms(&self) -> &[Arm; 2] {
        &self.arms
    }

    pub fn class_of(&self, g: usize) -> usize {
        g / self.per_class
    }

    /// Global states in priority order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn index_of(&self, g: usize) -> f64 {
        self.index[g]
    }

    /// Rows of the passive and active kernels; both are stochastic.
    pub fn kernel_rows(&self, g: usize) -> (usize, &[(usize, f64)]) {
        (self.passive_next[g], &self.fresh[g])
    }

    /// Fraction of each state's occupants that get a pilot: full activation
    /// while the budget lasts, a partial fill at the state where it runs out.
    pub fn activation_fractions(&self, y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        let mut left = self.lambda;
        for &i in &self.order {
            g[i] = if y[i] > 0.0 {
                (left / y[i]).clamp(0.0, 1.0)
            } else if left > 0.0 {
                1.0
            } else {
                0.0
            };
            left = (left - g[i] * y[i]).max(0.0);
        }
        g
    }

    /// Expected one-slot change of the occupancy vector.
    pub fn drift(&self, y: &[f64]) -> Vec<f64> {
        let g = self.activation_fractions(y);
        let mut d = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            let active = g[i] * y[i];
            let passive = y[i] - active;
            d[i] -= y[i];
            d[self.passive_next[i]] += passive;
            for &(t, p) in &self.fresh[i] {
                d[t] += active * p;
            }
        }
        d
    }

    pub fn integrate(&self, y0: &[f64], steps: usize, theta: &[f64]) -> Trajectory {
        let mut states = Vec::with_capacity(steps + 1);
        let mut dist = Vec::with_capacity(steps + 1);
        let mut y = y0.to_vec();
        for t in 0..=steps {
            dist.push(norm2_diff(&y, theta));
            states.push(y.clone());
            if t == steps {
                break;
            }
            let d = self.drift(&y);
            for (a, b) in y.iter_mut().zip(&d) {
                *a += b;
            }
        }
        Trajectory { states, dist }
    }

    pub fn class_masses(&self, y: &[f64]) -> [f64; 2] {
        [
            y[..self.per_class].iter().sum(),
            y[self.per_class..].iter().sum(),
        ]
    }
}

fn norm2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    /// Euclidean distance to the fixed point per step.
    pub dist: Vec<f64>,
}

/// Relaxed optimum in the form used by the fluid analysis.
pub fn solve_rel_policy(sys: &FluidSystem) -> Result<RelSolution, FluidError> {
    solve_relaxation(&[&sys.arms[0], &sys.arms[1]], &sys.delta, sys.lambda)
}

/// A fluid system together with its critical state and randomisation.
#[derive(Debug, Clone)]
pub struct FluidConfig {
    pub system: FluidSystem,
    pub rel: RelSolution,
    pub wstar: f64,
    pub rho: f64,
    /// Global index of the critical state.
    pub critical: usize,
    /// Pilot fraction actually used; nudged off a breakpoint when needed.
    pub lambda: f64,
}

const RHO_EDGE: f64 = 1e-9;

impl FluidConfig {
    pub fn new(system: FluidSystem) -> Result<Self, FluidError> {
        let mut system = system;
        let mut rel = solve_rel_policy(&system)?;
        if rel.critical.is_some() && rel.rho < RHO_EDGE {
            // Exactly on a breakpoint; move into the interior.
            system.lambda += 1e-9;
            rel = solve_rel_policy(&system)?;
        }
        let (c, s) = rel
            .critical
            .ok_or_else(|| FluidError::Infeasible("budget activates every state".into()))?;
        if !(rel.rho > 0.0 && rel.rho < 1.0) {
            return Err(FluidError::RegionEmpty);
        }
        for (k, arm) in system.arms.iter().enumerate() {
            let steady = arm.index.steady_index();
            if system.delta[k] > 0.0 && steady < rel.wstar {
                return Err(FluidError::SteadyBelowCritical {
                    class: k,
                    steady,
                    wstar: rel.wstar,
                });
            }
        }
        Ok(Self {
            critical: c * system.per_class + s,
            wstar: rel.wstar,
            rho: rel.rho,
            lambda: system.lambda,
            system,
            rel,
        })
    }

    /// Fixed point assembled from the per-class renewal occupancies.
    pub fn theta_assembly(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.system.dim());
        for (c, cls) in self.rel.classes.iter().enumerate() {
            y.extend(cls.occupancy.iter().map(|o| o * self.system.delta[c]));
        }
        y
    }

    fn above_critical(&self, g: usize) -> bool {
        self.system.rank[g] < self.system.rank[self.critical]
    }

    /// Inside the region where the activation fill stops at the critical
    /// state.
    pub fn in_region(&self, y: &[f64]) -> bool {
        let above: f64 = (0..y.len()).filter(|&g| self.above_critical(g)).map(|g| y[g]).sum();
        above < self.lambda && self.lambda <= above + y[self.critical]
    }

    /// Column of the one-slot change matrix for a state with a fixed action.
    fn move_column(&self, g: usize, active: bool) -> DVector<f64> {
        let mut col = DVector::zeros(self.system.dim());
        col[g] -= 1.0;
        if active {
            for &(t, p) in &self.system.fresh[g] {
                col[t] += p;
            }
        } else {
            col[self.system.passive_next[g]] += 1.0;
        }
        col
    }

    /// Affine form `drift(y) = Qbar y + dbar` valid inside the region, with
    /// the critical state's active mass written as `lambda` minus the mass
    /// above it.
    pub fn linearize(&self) -> Result<LinearFluid, FluidError> {
        let n = self.system.dim();
        let l = self.critical;
        let m_l = self.move_column(l, true) - self.move_column(l, false);
        let mut qbar = DMatrix::zeros(n, n);
        for g in 0..n {
            let col = if g == l {
                self.move_column(g, false)
            } else if self.above_critical(g) {
                self.move_column(g, true) - &m_l
            } else {
                self.move_column(g, false)
            };
            qbar.set_column(g, &col);
        }
        let dbar = &m_l * self.lambda;

        // Class conservation makes one row per class redundant; replace the
        // steady rows by the mass constraints.
        let pc = self.system.per_class;
        let mut a = qbar.clone();
        let mut b = -&dbar;
        for c in 0..2 {
            let row = c * pc + pc - 1;
            for g in 0..n {
                a[(row, g)] = if g / pc == c { 1.0 } else { 0.0 };
            }
            b[row] = self.system.delta[c];
        }
        let theta = a.lu().solve(&b).ok_or(FluidError::Singular)?;

        // Reduced coordinates on the tangent space: drop the critical state
        // in its class and the steady entry in the other class.
        let lc = l / pc;
        let dropped = [l, (1 - lc) * pc + pc - 1];
        let kept: Vec<usize> = (0..n).filter(|g| !dropped.contains(g)).collect();
        let mut qhat = DMatrix::zeros(kept.len(), kept.len());
        for (r, &gr) in kept.iter().enumerate() {
            for (c, &gc) in kept.iter().enumerate() {
                let mut v = qbar[(gr, gc)];
                for &e in &dropped {
                    if e / pc == gc / pc {
                        v -= qbar[(gr, e)];
                    }
                }
                qhat[(r, c)] = v;
            }
        }
        Ok(LinearFluid {
            qbar,
            dbar,
            theta,
            critical: l,
            per_class: pc,
            kept,
            qhat,
        })
    }

    /// Random occupancy near the fixed point that stays in the linear region.
    pub fn region_point(&self, theta: &[f64], rng: &mut impl Rng, scale: f64) -> Option<Vec<f64>> {
        let pc = self.system.per_class;
        let mut eps = scale;
        for _ in 0..60 {
            let mut y = theta.to_vec();
            for c in 0..2 {
                let z: Vec<f64> = (0..pc).map(|_| rng.random::<f64>()).collect();
                let zs: f64 = z.iter().sum();
                for s in 0..pc {
                    let g = c * pc + s;
                    y[g] = (1.0 - eps) * theta[g] + eps * self.system.delta[c] * z[s] / zs;
                }
            }
            if self.in_region(&y) {
                return Some(y);
            }
            eps *= 0.5;
        }
        None
    }

    pub fn random_region_points(&self, theta: &[f64], count: usize, seed: u64, scale: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .filter_map(|_| self.region_point(theta, &mut rng, scale))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LinearFluid {
    pub qbar: DMatrix<f64>,
    pub dbar: DVector<f64>,
    pub theta: DVector<f64>,
    pub critical: usize,
    per_class: usize,
    /// Global coordinates kept in the reduced system.
    pub kept: Vec<usize>,
    pub qhat: DMatrix<f64>,
}

/// Eigenvalues through a Schur decomposition with a bounded iteration count.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    if m.nrows() == 0 {
        return Some(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 100_000)?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    /// Numerical eigenvalues of the reduced matrix as `(re, im)`.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Largest entry of `(Qhat + I)^n`; zero exactly when every eigenvalue
    /// is -1.
    pub nilpotency_residual: f64,
    /// Same, restricted to the critical class block.
    pub critical_block_residual: f64,
    /// Spectral radius of `Qhat + I` on the other class block.
    pub other_block_radius: f64,
    pub all_minus_one: bool,
}

impl LinearFluid {
    pub fn residual(&self) -> f64 {
        (&self.qbar * &self.theta + &self.dbar).amax()
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let v = &self.qbar * DVector::from_column_slice(y) + &self.dbar;
        v.iter().copied().collect()
    }

    /// Numerical eigenvalues of the reduced matrix; empty if the Schur
    /// iteration does not converge.
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        eigenvalues(&self.qhat).unwrap_or_default()
    }

    /// Certifies the eigenvalues through nilpotency of `Qhat + I`: numerical
    /// eigenvalues of a defective matrix scatter around the true value, the
    /// matrix power does not.
    pub fn spectrum(&self, tol: f64) -> SpectrumReport {
        let n = self.qhat.nrows();
        let shifted = &self.qhat + DMatrix::identity(n, n);
        let lc = self.critical / self.per_class;
        let in_critical: Vec<usize> = (0..n).filter(|&r| self.kept[r] / self.per_class == lc).collect();
        let other: Vec<usize> = (0..n).filter(|&r| self.kept[r] / self.per_class != lc).collect();
        let block = |idx: &[usize]| DMatrix::from_fn(idx.len(), idx.len(), |r, c| shifted[(idx[r], idx[c])]);
        let nil = |m: &DMatrix<f64>| {
            let mut p = DMatrix::identity(m.nrows(), m.nrows());
            for _ in 0..m.nrows() {
                p = &p * m;
            }
            p.amax()
        };
        let nilpotency_residual = nil(&shifted);
        let critical_block_residual = nil(&block(&in_critical));
        let ob = block(&other);
        let other_block_radius = if ob.nrows() == 0 {
            0.0
        } else {
            eigenvalues(&ob).map_or(f64::NAN, |e| e.iter().map(|z| z.norm()).fold(0.0, f64::max))
        };
        SpectrumReport {
            eigenvalues: self.eigenvalues().iter().map(|z| (z.re, z.im)).collect(),
            nilpotency_residual,
            critical_block_residual,
            other_block_radius,
            all_minus_one: nilpotency_residual <= tol,
        }
    }
}
