//! Simulation of two-way multiplicative mixed-model data.
//!
//! Used by the recovery and coverage studies and handy for generating demo
//! data. Draws are reproducible: the generator is ChaCha8 seeded from the
//! caller's seed, and all randomness for one dataset comes from a single
//! stream in observation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Factor};
use crate::design::mult_covariate;
use crate::design::MpCentering;
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Generating parameters for a two-way layout with optional components.
#[derive(Debug, Clone)]
pub struct SimParams<F> {
    /// Cell means, one per level of the fixed factor.
    pub beta: Vec<F>,
    pub sigma: F,
    pub sigma_a: Option<F>,
    /// Scaling-slope spread; slopes are `1 + b_i` around the consensus 1.
    pub sigma_b: Option<F>,
    pub sigma_d: Option<F>,
    /// Correlation of `(a_i, b_i)`; requires both components.
    pub rho: Option<F>,
}

impl<F: Scalar> SimParams<F> {
    fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::Invalid("no cell means".into()));
        }
        if self.sigma < F::zero() {
            return Err(Error::InvalidCovariance("sigma < 0".into()));
        }
        for (name, v) in [
            ("sigma_a", self.sigma_a),
            ("sigma_b", self.sigma_b),
            ("sigma_d", self.sigma_d),
        ] {
            if let Some(v) = v {
                if v < F::zero() {
                    return Err(Error::InvalidCovariance(format!("{name} < 0")));
                }
            }
        }
        if let Some(r) = self.rho {
            if !(r.abs() < F::one()) {
                return Err(Error::InvalidCovariance("|rho| >= 1".into()));
            }
            if self.sigma_a.is_none() || self.sigma_b.is_none() {
                return Err(Error::InvalidCovariance(
                    "rho requires both sigma_a and sigma_b".into(),
                ));
            }
        }
        Ok(())
    }

    /// The per-group model formula implied by which components are present.
    pub fn formula(&self) -> String {
        let mut f = String::from("y ~ 1 + F");
        if self.sigma_a.is_some() {
            f.push_str(" + (1|G)");
        }
        if self.sigma_d.is_some() {
            f.push_str(" + (1|G:F)");
        }
        if self.sigma_b.is_some() {
            f.push_str(" + mp(G,F)");
        }
        f
    }
}

/// Draw one standard normal.
fn draw<F: Scalar>(rng: &mut ChaCha8Rng) -> F
where
    StandardNormal: Distribution<F>,
{
    StandardNormal.sample(rng)
}

/// Draw `(a, b)` with standard deviations and correlation, components
/// optional. Degenerate spreads fall back to direct univariate draws.
pub(crate) fn draw_pair<F: Scalar>(
    rng: &mut ChaCha8Rng,
    sigma_a: Option<F>,
    sigma_b: Option<F>,
    rho: F,
) -> (F, F)
where
    StandardNormal: Distribution<F>,
{
    match (sigma_a, sigma_b) {
        (Some(sa), Some(sb)) => {
            let z1: F = draw(rng);
            let z2: F = draw(rng);
            let a = sa * z1;
            let b = sb * (rho * z1 + (F::one() - rho * rho).sqrt() * z2);
            (a, b)
        }
        (Some(sa), None) => (sa * draw(rng), F::zero()),
        (None, Some(sb)) => (F::zero(), sb * draw(rng)),
        (None, None) => (F::zero(), F::zero()),
    }
}

/// Simulate a balanced `I x J x K` two-way dataset from the multiplicative
/// mixed model, with factors named `G` (groups) and `F` (fixed cells).
pub fn simulate_two_way<F: Scalar>(
    params: &SimParams<F>,
    n_groups: usize,
    n_reps: usize,
    seed: u64,
) -> Result<Dataset<F>>
where
    StandardNormal: Distribution<F>,
{
    params.validate()?;
    let n_cells = params.beta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = params.rho.unwrap_or(F::zero());
    let nu = mult_covariate(&params.beta, MpCentering::Centered);

    let pairs: Vec<(F, F)> = (0..n_groups)
        .map(|_| draw_pair(&mut rng, params.sigma_a, params.sigma_b, rho))
        .collect();
    let d_effects: Vec<F> = match params.sigma_d {
        Some(sd) => (0..n_groups * n_cells).map(|_| sd * draw(&mut rng)).collect(),
        None => Vec::new(),
    };

    let n = n_groups * n_cells * n_reps;
    let mut y = Vec::with_capacity(n);
    let mut gcodes = Vec::with_capacity(n);
    let mut fcodes = Vec::with_capacity(n);
    for i in 0..n_groups {
        for j in 0..n_cells {
            for _ in 0..n_reps {
                let (a, b) = pairs[i];
                let mut mean = params.beta[j] + a + b * nu[j];
                if params.sigma_d.is_some() {
                    mean = mean + d_effects[i * n_cells + j];
                }
                let e: F = draw(&mut rng);
                y.push(mean + params.sigma * e);
                gcodes.push(i as u32);
                fcodes.push(j as u32);
            }
        }
    }

    Dataset::from_parts(
        "y",
        y,
        vec![
            Factor {
                name: "G".into(),
                levels: (0..n_groups).map(|i| format!("g{i}")).collect(),
                codes: gcodes,
            },
            Factor {
                name: "F".into(),
                levels: (0..n_cells).map(|j| format!("f{j}")).collect(),
                codes: fcodes,
            },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let p = SimParams {
            beta: vec![1.0, 2.0, 3.0],
            sigma: 0.5,
            sigma_a: Some(1.0),
            sigma_b: Some(0.3),
            sigma_d: Some(0.2),
            rho: Some(0.4),
        };
        let d1 = simulate_two_way(&p, 4, 2, 7).unwrap();
        let d2 = simulate_two_way(&p, 4, 2, 7).unwrap();
        assert_eq!(d1.response(), d2.response());
        let d3 = simulate_two_way(&p, 4, 2, 8).unwrap();
        assert_ne!(d1.response(), d3.response());
    }

    #[test]
    fn zero_noise_reproduces_cell_means() {
        let p = SimParams {
            beta: vec![1.0, 2.0],
            sigma: 0.0,
            sigma_a: None,
            sigma_b: None,
            sigma_d: None,
            rho: None,
        };
        let ds = simulate_two_way(&p, 3, 2, 0).unwrap();
        let f = ds.factor("F").unwrap();
        for o in 0..ds.n_obs() {
            let want = p.beta[f.codes[o] as usize];
            assert_eq!(ds.response()[o], want);
        }
    }

    #[test]
    fn formula_matches_components() {
        let mut p = SimParams {
            beta: vec![0.0; 2],
            sigma: 1.0,
            sigma_a: Some(1.0),
            sigma_b: Some(0.1),
            sigma_d: Some(0.1),
            rho: Some(0.0),
        };
        assert_eq!(p.formula(), "y ~ 1 + F + (1|G) + (1|G:F) + mp(G,F)");
        p.sigma_d = None;
        p.sigma_b = None;
        p.rho = None;
        assert_eq!(p.formula(), "y ~ 1 + F + (1|G)");
    }

    #[test]
    fn invalid_rho_is_rejected() {
        let p = SimParams {
            beta: vec![0.0; 2],
            sigma: 1.0,
            sigma_a: Some(1.0),
            sigma_b: Some(0.1),
            sigma_d: None,
            rho: Some(1.0),
        };
        assert!(simulate_two_way(&p, 3, 1, 0).is_err());
    }
}
