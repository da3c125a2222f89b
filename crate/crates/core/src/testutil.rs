//! Shared helpers for the unit tests: randomized small model instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::design::{build_layout, DesignLayout, ParamVector};
use crate::formula::{parse_formula, ModelSpec};
use crate::sim::{simulate_two_way, SimParams};

pub struct Instance {
    pub ms: ModelSpec,
    pub ds: Dataset<f64>,
    pub layout: DesignLayout,
    /// A random evaluation point (not the generating truth).
    pub pv: ParamVector<f64>,
}

/// Random small instance: dimensions I in 2..=5, J in 2..=6, K in 1..=3,
/// random component subset, random valid parameters.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let i = rng.random_range(2..=5usize);
    let j = rng.random_range(2..=6usize);
    let k = rng.random_range(1..=3usize);

    let has_a = rng.random_bool(0.8);
    let has_b = rng.random_bool(0.7);
    let has_d = rng.random_bool(0.6) && (has_a || has_b || rng.random_bool(0.5));

    let beta: Vec<f64> = (0..j).map(|_| rng.random_range(-3.0..6.0)).collect();
    let truth = SimParams {
        beta,
        sigma: rng.random_range(0.3..1.5),
        sigma_a: has_a.then(|| rng.random_range(0.3..2.0)),
        sigma_b: has_b.then(|| rng.random_range(0.05..0.8)),
        sigma_d: has_d.then(|| rng.random_range(0.1..1.0)),
        rho: (has_a && has_b).then(|| rng.random_range(-0.8..0.8)),
    };
    let ds = simulate_two_way(&truth, i, k, seed ^ 0xabcd).unwrap();
    let ms = parse_formula(&truth.formula()).unwrap();
    let layout = build_layout(&ms, &ds).unwrap();

    // evaluation point: jittered away from the truth
    let pv = ParamVector {
        beta: truth.beta.iter().map(|b| b + rng.random_range(-0.5..0.5)).collect(),
        log_sigma: truth.sigma.ln() + rng.random_range(-0.3..0.3),
        log_sigma_a: truth.sigma_a.map(|s| s.ln() + rng.random_range(-0.3..0.3)),
        log_sigma_b: truth.sigma_b.map(|s| s.ln() + rng.random_range(-0.3..0.3)),
        log_sigma_d: truth.sigma_d.map(|s| s.ln() + rng.random_range(-0.3..0.3)),
        z_rho: truth.rho.map(|r| r.atanh() + rng.random_range(-0.3..0.3)),
    };
    Instance { ms, ds, layout, pv }
}
