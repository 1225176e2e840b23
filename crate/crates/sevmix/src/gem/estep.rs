//! E-step: component responsibilities and completion moments.
//!
//! Body observations are explained by tau-truncated Gamma components. The
//! complete-data construction re-inflates each truncated component with a
//! geometric number of phantom exceedances per observation: expected count
//! k = (1-F(tau))/F(tau), each phantom contributing the truncated-above mean
//! y' = E[Y | Y > tau] and log-moment E[ln Y | Y > tau]. The log-moment has
//! no closed form: quadrature mode integrates it to a set tolerance, while
//! stochastic mode substitutes the average of `draws` sampled exceedances
//! (a Monte Carlo EM; the default, with one draw).

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{GammaMd, Lomax, DEGENERATE_MASS};
use crate::error::{Error, Result};
use crate::gem::FitData;
use crate::model::ModelParams;
use crate::numeric::log_sum_exp;

/// Below this upper-tail mass a component effectively has no exceedance
/// phantom: k = 0, y' = tau, E ln = ln tau. Must not sit below
/// DEGENERATE_MASS, or the moment calls behind the guard would refuse masses
/// the guard let through.
pub const UPPER_MASS_FLOOR: f64 = DEGENERATE_MASS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EStepMode {
    Quadrature { tol: f64 },
    Stochastic { draws: usize },
}

impl Default for EStepMode {
    fn default() -> Self {
        EStepMode::Stochastic { draws: 1 }
    }
}

/// Frozen latent quantities for one M-step. Matrices are n x g (or n x (g+1)
/// for z) with zero rows for observations on the other side of tau.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub z: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub yprime: DMatrix<f64>,
    pub elog: DMatrix<f64>,
    /// Observed-data log-likelihood at the parameters the E-step ran with.
    pub obs_loglik: f64,
}

/// Per-observation working sums the body M-step consumes:
/// s1 = z (ln y + k E ln), s2 = z (y + k y'), w = z (1 + k).
#[derive(Clone, Debug)]
pub struct BodyStats {
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl LatentState {
    pub fn body_stats(&self, y: &[f64]) -> BodyStats {
        let (n, g) = self.k.shape();
        let mut s1 = DMatrix::zeros(n, g);
        let mut s2 = DMatrix::zeros(n, g);
        let mut w = DMatrix::zeros(n, g);
        for i in 0..n {
            for j in 0..g {
                let z = self.z[(i, j)];
                if z == 0.0 {
                    continue;
                }
                let k = self.k[(i, j)];
                s1[(i, j)] = z * (y[i].ln() + k * self.elog[(i, j)]);
                s2[(i, j)] = z * (y[i] + k * self.yprime[(i, j)]);
                w[(i, j)] = z * (1.0 + k);
            }
        }
        BodyStats { s1, s2, w }
    }
}

pub fn estep(
    data: &FitData,
    params: &ModelParams,
    mode: EStepMode,
    rng: &mut ChaCha8Rng,
) -> Result<LatentState> {
    let n = data.n();
    let g = params.g();
    let tau = data.tau;
    let mut z = DMatrix::zeros(n, g + 1);
    let mut k = DMatrix::zeros(n, g);
    let mut yprime = DMatrix::zeros(n, g);
    let mut elog = DMatrix::zeros(n, g);
    let mut obs = 0.0;
    let mut pibuf = vec![0.0; g + 1];
    let mut logw = vec![0.0; g];
    // Completion moments depend on the row only through the linear predictor;
    // designs with few distinct cells hit this cache hard.
    let mut cache: HashMap<(usize, u64), (f64, f64, f64)> = HashMap::new();
    let cacheable = matches!(mode, EStepMode::Quadrature { .. });

    for &i in data.body_idx {
        let y = data.y[i];
        params.mixing_probs_into(data.x_mix.obs(i), &mut pibuf);
        let xb = data.x_body.obs(i);
        for j in 0..g {
            let lp = params.body_linpred(j, xb);
            let gamma = GammaMd { mean: lp.exp(), dispersion: params.dispersion()[j] };
            let mass = gamma.cdf(tau);
            if mass < DEGENERATE_MASS {
                return Err(Error::DegenerateComponent { index: j, mass });
            }
            logw[j] = pibuf[j].ln() + gamma.logpdf(y) - mass.ln();

            let key = (j, lp.to_bits());
            let moments = if cacheable { cache.get(&key).copied() } else { None };
            let (kij, ypij, elij) = match moments {
                Some(m) => m,
                None => {
                    let m = completion_moments(&gamma, tau, mode, rng)?;
                    if cacheable {
                        cache.insert(key, m);
                    }
                    m
                }
            };
            k[(i, j)] = kij;
            yprime[(i, j)] = ypij;
            elog[(i, j)] = elij;
        }
        let norm = log_sum_exp(&logw);
        obs += norm;
        for j in 0..g {
            z[(i, j)] = (logw[j] - norm).exp();
        }
    }

    for &i in data.tail_idx {
        let y = data.y[i];
        params.mixing_probs_into(data.x_mix.obs(i), &mut pibuf);
        z[(i, g)] = 1.0;
        let lomax = Lomax { scale: params.tail_scale(), index: params.tail_index(data.x_tail.obs(i)) };
        obs += pibuf[g].ln() + lomax.trunc_logpdf(y, tau)?;
    }

    Ok(LatentState { z, k, yprime, elog, obs_loglik: obs })
}

fn completion_moments(
    gamma: &GammaMd,
    tau: f64,
    mode: EStepMode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let mass = gamma.cdf(tau);
    let upper = gamma.sf(tau);
    if upper < UPPER_MASS_FLOOR {
        return Ok((0.0, tau, tau.ln()));
    }
    let kij = upper / mass;
    let ypij = gamma.trunc_mean_above(tau)?;
    let elij = match mode {
        EStepMode::Quadrature { tol } => gamma.trunc_mean_log_above(tau, tol)?,
        EStepMode::Stochastic { draws } => {
            debug_assert!(draws > 0);
            let mut acc = 0.0;
            for _ in 0..draws.max(1) {
                acc += gamma.sample_above(tau, rng)?.ln();
            }
            acc / draws.max(1) as f64
        }
    };
    Ok((kij, ypij, elij))
}
