//! Instance generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use pilot_whittle::arm::Arm;
use pilot_whittle::channel::{generate_doubly_stochastic, ChannelModel};
use pilot_whittle::fluid::{FluidConfig, FluidSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random doubly stochastic channel with `k` states and sorted random rates.
pub fn random_model(k: usize, seed: u64) -> ChannelModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rates: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..3.0)).collect();
    rates.sort_by(f64::total_cmp);
    ChannelModel::new(generate_doubly_stochastic(k, seed), rates).unwrap()
}

pub fn random_arm(k: usize, tau_bar: usize, seed: u64) -> Arm {
    Arm::max_belief(random_model(k, seed), tau_bar).unwrap()
}

/// Alternates two and three channel states, truncation between 4 and 8.
pub fn small_arm(seed: u64) -> Arm {
    random_arm(2 + (seed % 2) as usize, 4 + (seed % 5) as usize, seed)
}

fn rates(h: [(f64, f64); 3]) -> Vec<f64> {
    h.iter().map(|(a, b)| (1.0 + a * a + b * b).log2()).collect()
}

/// The two three-state channels used for the two-class experiments.
pub fn reference_models() -> (ChannelModel, ChannelModel) {
    let p1 = DMatrix::from_row_slice(3, 3, &[0.3, 0.4, 0.3, 0.2, 0.2, 0.6, 0.5, 0.4, 0.1]);
    let p2 = DMatrix::from_row_slice(3, 3, &[0.35, 0.35, 0.3, 0.3, 0.15, 0.55, 0.35, 0.5, 0.15]);
    let m1 = ChannelModel::new(p1, rates([(0.512, 0.9671), (-1.694, -1.892), (0.0503, 0.0621)])).unwrap();
    let m2 = ChannelModel::new(p2, rates([(0.6386, -0.1388), (-0.8789, 0.2781), (-2.7781, 0.6188)])).unwrap();
    (m1, m2)
}

pub fn reference_arms(tau_bar: usize) -> (Arm, Arm) {
    let (m1, m2) = reference_models();
    (Arm::max_belief(m1, tau_bar).unwrap(), Arm::max_belief(m2, tau_bar).unwrap())
}

/// Two random classes in equal proportion; `None` when the pair does not
/// admit the fluid analysis at this pilot fraction.
pub fn random_fluid(seed: u64, tau_bar: usize, lambda: f64) -> Option<FluidConfig> {
    let sys =
        FluidSystem::new(random_arm(3, tau_bar, seed), random_arm(3, tau_bar, seed + 1000), [0.5, 0.5], lambda).ok()?;
    FluidConfig::new(sys).ok()
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Subsidy grid covering every index value of `arm` with some margin.
pub fn subsidy_grid(arm: &Arm, n: usize) -> Vec<f64> {
    let flat = arm.index.flat();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.1 * arm.rewards.r1();
    linspace(lo - pad, hi + pad, n)
}
