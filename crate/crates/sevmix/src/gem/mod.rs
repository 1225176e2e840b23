//! Generalized EM fitter for the spliced mixture model.
//!
//! Each iteration runs an E-step (responsibilities plus completion moments
//! for the truncated body components) and then block ascent updates: mixing
//! coefficients, per-component mean coefficients, dispersions, tail-index
//! coefficients, tail scale. Every block move is accepted only if it does
//! not decrease its majorized objective, so with exact (quadrature) E-step
//! moments the penalized observed log-likelihood never decreases.

pub mod choose;
pub mod estep;
pub mod init;
pub mod mstep;

pub use choose::{choose_component_count, ChooseReport};
pub use estep::{estep, EStepMode, LatentState};
pub use init::init_params;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::penalty::{Penalty, PenaltyPlan};
use crate::rng::{substream, STREAM_ESTEP};
use crate::schema::{CovariateSchema, Dataset, DesignMatrix};

/// Borrowed view of everything a fit needs. The three designs usually alias
/// one encoded matrix; collapsed refits pass part-specific ones.
#[derive(Clone, Copy)]
pub struct FitData<'a> {
    pub y: &'a [f64],
    pub tau: f64,
    pub x_mix: &'a DesignMatrix,
    pub x_body: &'a DesignMatrix,
    pub x_tail: &'a DesignMatrix,
    pub body_idx: &'a [usize],
    pub tail_idx: &'a [usize],
}

impl<'a> FitData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        FitData {
            y: ds.y().as_slice(),
            tau: ds.tau(),
            x_mix: ds.x(),
            x_body: ds.x(),
            x_tail: ds.x(),
            body_idx: ds.body_idx(),
            tail_idx: ds.tail_idx(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let (d_mix, d_body, d_tail) = params.dims();
        if self.x_mix.dim() != d_mix || self.x_body.dim() != d_body || self.x_tail.dim() != d_tail
        {
            return Err(Error::data(format!(
                "design dims ({}, {}, {}) do not match parameter dims ({}, {}, {})",
                self.x_mix.dim(),
                self.x_body.dim(),
                self.x_tail.dim(),
                d_mix,
                d_body,
                d_tail
            )));
        }
        let n = self.n();
        if self.x_mix.n() != n || self.x_body.n() != n || self.x_tail.n() != n {
            return Err(Error::data("design row counts do not match y"));
        }
        if self.body_idx.len() + self.tail_idx.len() != n {
            return Err(Error::data("body/tail index split does not cover the data"));
        }
        if (params.tau() - self.tau).abs() > 1e-12 * self.tau.max(1.0) {
            return Err(Error::data("parameter threshold differs from the data threshold"));
        }
        Ok(())
    }
}

/// Penalty plans for the three penalized parts.
#[derive(Clone, Debug)]
pub struct PartPlans {
    pub mix: PenaltyPlan,
    pub body: PenaltyPlan,
    pub tail: PenaltyPlan,
}

impl PartPlans {
    /// Contrast-free plans: every part unpenalized regardless of lambda.
    pub fn unpenalized(d_mix: usize, d_body: usize, d_tail: usize) -> Self {
        PartPlans {
            mix: PenaltyPlan::empty(Penalty::Lasso, 1.0, d_mix),
            body: PenaltyPlan::empty(Penalty::Lasso, 1.0, d_body),
            tail: PenaltyPlan::empty(Penalty::Lasso, 1.0, d_tail),
        }
    }

    /// Plans over the shared schema with per-part sample-size multipliers and
    /// level-balance standardization computed on each part's rows.
    pub fn from_schema(schema: &CovariateSchema, penalty: Penalty, data: &FitData) -> Self {
        let mut mix = PenaltyPlan::new(schema, penalty, data.n() as f64);
        mix.standardize(schema, data.x_mix);
        let mut body = PenaltyPlan::new(schema, penalty, data.body_idx.len() as f64);
        body.standardize(schema, &data.x_body.select_rows(data.body_idx));
        let mut tail = PenaltyPlan::new(schema, penalty, data.tail_idx.len() as f64);
        tail.standardize(schema, &data.x_tail.select_rows(data.tail_idx));
        PartPlans { mix, body, tail }
    }
}

/// Penalty rates per part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLambdas {
    pub mix: f64,
    pub body: f64,
    pub tail: f64,
}

impl PartLambdas {
    pub fn zero() -> Self {
        PartLambdas { mix: 0.0, body: 0.0, tail: 0.0 }
    }

    pub fn uniform(l: f64) -> Self {
        PartLambdas { mix: l, body: l, tail: l }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Absolute stopping tolerance on the penalized observed log-likelihood.
    pub tol: f64,
    pub estep: EStepMode,
    pub step_halving_max: usize,
    pub ridge_base: f64,
    /// Damped Newton steps per coefficient block per iteration.
    pub newton_steps: usize,
    pub seed: u64,
    /// Sort components by average fitted mean when the fit finishes.
    pub sort_components: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 200,
            tol: 1e-2,
            estep: EStepMode::default(),
            step_halving_max: 20,
            ridge_base: 1e-8,
            newton_steps: 1,
            seed: 0,
            sort_components: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub params: ModelParams,
    /// Observed-data log-likelihood at the final parameters.
    pub loglik: f64,
    /// Penalized observed log-likelihood (smoothed contrast norms).
    pub penalized: f64,
    pub iters: usize,
    pub converged: bool,
    /// Whether the penalized objective was non-decreasing (within 1e-8)
    /// along the whole trajectory.
    pub monotone: bool,
    pub trajectory: Vec<f64>,
    /// Set when the fit stopped early on an error after at least one
    /// successful iteration; parameters are then the best ones seen.
    pub aborted: Option<String>,
}

/// Exact (smoothed-norm) penalty total at the given parameters.
pub fn penalty_total(plans: &PartPlans, lambdas: PartLambdas, params: &ModelParams) -> f64 {
    let g = params.g();
    plans.mix.value(params.mixing(), g, lambdas.mix)
        + plans.body.value(params.body(), g, lambdas.body)
        + plans.tail.value(&tail_matrix(params), 1, lambdas.tail)
}

/// Tail coefficients as a one-column matrix, the shape penalty code expects.
pub fn tail_matrix(params: &ModelParams) -> DMatrix<f64> {
    DMatrix::from_column_slice(params.tail_coef().len(), 1, params.tail_coef().as_slice())
}

/// Penalized observed log-likelihood at `params` (runs one quadrature-moment
/// E-step purely for its likelihood byproduct).
pub fn penalized_obs_loglik(
    data: &FitData,
    params: &ModelParams,
    plans: &PartPlans,
    lambdas: PartLambdas,
) -> Result<f64> {
    let mut rng = substream(0, STREAM_ESTEP);
    let state = estep(data, params, EStepMode::Quadrature { tol: 1e-8 }, &mut rng)?;
    Ok(state.obs_loglik - penalty_total(plans, lambdas, params))
}

/// Runs the generalized EM loop from `init`.
pub fn fit(
    data: &FitData,
    init: ModelParams,
    plans: &PartPlans,
    lambdas: PartLambdas,
    cfg: &FitConfig,
) -> Result<FitReport> {
    data.validate(&init)?;
    let g = init.g();
    let mut params = init;
    let mut rng = substream(cfg.seed, STREAM_ESTEP);
    let mut trajectory: Vec<f64> = Vec::new();
    let mut monotone = true;
    let mut converged = false;
    let mut aborted = None;
    let mut best: Option<(f64, ModelParams)> = None;
    let mut last_loglik = f64::NEG_INFINITY;

    for it in 0..=cfg.max_iters {
        let state = match estep(data, &params, cfg.estep, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                if let Some((_, best_params)) = best {
                    log::warn!("fit aborted at iteration {it}: {e}");
                    aborted = Some(e.to_string());
                    params = best_params;
                    let final_state =
                        estep(data, &params, cfg.estep, &mut rng).map_err(|e2| {
                            Error::Fit(format!("abort recovery failed: {e2} (after {e})"))
                        })?;
                    last_loglik = final_state.obs_loglik;
                    break;
                }
                return Err(e);
            }
        };
        last_loglik = state.obs_loglik;
        let f = state.obs_loglik - penalty_total(plans, lambdas, &params);
        if let Some(&prev) = trajectory.last() {
            if f + 1e-8 < prev {
                monotone = false;
            }
            if (f - prev).abs() < cfg.tol {
                trajectory.push(f);
                converged = true;
                break;
            }
        }
        trajectory.push(f);
        if best.as_ref().map_or(true, |(b, _)| f > *b) {
            best = Some((f, params.clone()));
        }
        if it == cfg.max_iters {
            break;
        }

        // M-step: majorizers frozen at the iteration-start parameters.
        let stats = state.body_stats(data.y);
        let maj_mix = plans.mix.majorize(params.mixing(), g, lambdas.mix);
        let maj_body = plans.body.majorize(params.body(), g, lambdas.body);
        let maj_tail = plans.tail.majorize(&tail_matrix(&params), 1, lambdas.tail);

        for j in 0..g {
            mstep::update_mixing_col(data, &state.z, &mut params, j, &plans.mix, &maj_mix, cfg);
        }
        for j in 0..g {
            mstep::update_body_col(data, &stats, &mut params, j, &plans.body, &maj_body, cfg);
        }
        for j in 0..g {
            mstep::update_dispersion(data, &stats, &mut params, j);
        }
        mstep::update_tail_coef(data, &mut params, &plans.tail, &maj_tail, cfg);
        mstep::update_tail_scale(data, &mut params);
    }

    if cfg.sort_components && g > 1 {
        let key = average_body_means(data, &params);
        params.sort_components_by(&key);
    }
    let penalized = last_loglik - penalty_total(plans, lambdas, &params);
    Ok(FitReport {
        loglik: last_loglik,
        penalized,
        iters: trajectory.len().saturating_sub(1),
        converged,
        monotone,
        trajectory,
        aborted,
        params,
    })
}

/// Average fitted (untruncated) subgroup mean per body component; the sort
/// key that fixes component order.
pub fn average_body_means(data: &FitData, params: &ModelParams) -> Vec<f64> {
    let n = data.n();
    (0..params.g())
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                acc += params.body_mean(j, data.x_body.obs(i));
            }
            acc / n as f64
        })
        .collect()
}
