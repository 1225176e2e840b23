//! Variable-selection pipeline: partial likelihoods at frozen latent state,
//! the merge/zero coefficient adjustment, penalty-rate tuning (pAIC, pBIC,
//! cross-validated partial deviance), effective-parameter counting, and the
//! collapse-and-refit step that debiases the selected model.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gem::estep::BodyStats;
use crate::gem::mstep;
use crate::gem::{
    self, estep, tail_matrix, EStepMode, FitConfig, FitData, LatentState, PartLambdas, PartPlans,
};
use crate::model::ModelParams;
use crate::penalty::{PenaltyMajorizer, PenaltyPlan};
use crate::rng::{substream, STREAM_CV, STREAM_ESTEP};
use crate::schema::{ColumnOrigin, CovariateSchema, DesignMatrix};

/// Sweep budget for the frozen-latent block refits used during tuning.
const TUNE_MAX_SWEEPS: usize = 300;
/// Relative stopping tolerance on a block's penalized partial objective.
const TUNE_TOL: f64 = 1e-10;

fn zero_maj(plan: &PenaltyPlan) -> PenaltyMajorizer {
    PenaltyMajorizer { coefs: vec![0.0; plan.contrasts.len()], constant: 0.0 }
}

/// Unpenalized mixing partial: sum_i sum_j z_ij ln pi_ij.
fn s0_value(data: &FitData, z: &DMatrix<f64>, params: &ModelParams, plan: &PenaltyPlan) -> f64 {
    mstep::mixing_objective(data, z, params, plan, &zero_maj(plan))
}

/// Body partial in the fitter's convention (parameter-free gamma log-density
/// terms dropped); matches what q_value sums.
fn t0_value(data: &FitData, stats: &BodyStats, params: &ModelParams, plan: &PenaltyPlan) -> f64 {
    let zm = zero_maj(plan);
    (0..params.g())
        .map(|j| mstep::body_objective(data, stats, params, j, plan, &zm))
        .sum()
}

/// Unpenalized tail partial: truncated tail log-density over exceedances.
fn v0_value(data: &FitData, params: &ModelParams, plan: &PenaltyPlan) -> f64 {
    mstep::tail_objective(data, params, plan, &zero_maj(plan))
}

/// Body partial with the full gamma log-density, i.e. including the
/// parameter-free `- z (ln y + k E log y')` terms. Criteria that compare
/// across latent states (held-out deviance) need this variant; at a frozen
/// latent the two differ by a constant.
fn t0_full(data: &FitData, stats: &BodyStats, params: &ModelParams, plan: &PenaltyPlan) -> f64 {
    t0_value(data, stats, params, plan) - stats.s1.sum()
}

/// Partial objectives for the three penalized parts, evaluated with the
/// latent quantities frozen. `s0/t0/v0` are penalty-free; `s/t/v` subtract
/// the exact (smoothed-norm) penalties at the given rates. `t0` uses the
/// fitter's convention, so `s0 + t0 + v0` reproduces the complete-data
/// objective exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialValues {
    pub s: f64,
    pub t: f64,
    pub v: f64,
    pub s0: f64,
    pub t0: f64,
    pub v0: f64,
}

pub fn partial_objectives(
    data: &FitData,
    params: &ModelParams,
    latent: &LatentState,
    plans: &PartPlans,
    lambdas: PartLambdas,
) -> PartialValues {
    let g = params.g();
    let stats = latent.body_stats(data.y);
    let s0 = s0_value(data, &latent.z, params, &plans.mix);
    let t0 = t0_value(data, &stats, params, &plans.body);
    let v0 = v0_value(data, params, &plans.tail);
    PartialValues {
        s: s0 - plans.mix.value(params.mixing(), g, lambdas.mix),
        t: t0 - plans.body.value(params.body(), g, lambdas.body),
        v: v0 - plans.tail.value(&tail_matrix(params), 1, lambdas.tail),
        s0,
        t0,
        v0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartId {
    Mixing,
    Body,
    Tail,
}

impl PartId {
    pub fn label(self) -> &'static str {
        match self {
            PartId::Mixing => "mixing",
            PartId::Body => "body",
            PartId::Tail => "tail",
        }
    }
}

/// Knobs for the coefficient adjustment pass: starting tolerance, geometric
/// growth per round, the largest acceptable drop in the partial objective,
/// and a safety cap on rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustConfig {
    pub delta0: f64,
    pub eta: f64,
    pub xi: f64,
    pub max_rounds: usize,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        AdjustConfig { delta0: 1e-5, eta: 0.3, xi: 1.0, max_rounds: 400 }
    }
}

/// One proposal round of the adjustment pass: every merge and zero applied at
/// tolerance `delta`, with the partial objective before and after. Rejected
/// rounds are recorded and terminate the part's pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdjustRound {
    pub part: PartId,
    pub delta: f64,
    /// (kept_row, overwritten_row) pairs, ascending scan order.
    pub merges: Vec<(usize, usize)>,
    pub zeros: Vec<usize>,
    pub before: f64,
    pub after: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct Adjusted {
    pub params: ModelParams,
    pub audit: Vec<AdjustRound>,
}

/// Merge/zero pass over the non-intercept rows of one coefficient matrix.
/// Each round proposes, on a working copy, every row pair closer than the
/// current tolerance (lower index wins) and every row with norm below it,
/// then keeps the proposal unless the objective drops by more than xi, in
/// which case the last accepted state is returned. The tolerance grows by
/// (1 + eta) per round; the pass ends early once all adjustable rows are zero.
fn adjust_rows<F: FnMut(&DMatrix<f64>) -> f64>(
    part: PartId,
    start: DMatrix<f64>,
    mut objective: F,
    cfg: &AdjustConfig,
    audit: &mut Vec<AdjustRound>,
) -> DMatrix<f64> {
    let d = start.nrows();
    let w = start.ncols();
    let mut accepted = start;
    if d <= 1 {
        return accepted;
    }
    let mut delta = cfg.delta0;
    for _ in 0..cfg.max_rounds {
        let mut work = accepted.clone();
        let mut merges = Vec::new();
        let mut zeros = Vec::new();
        for d1 in 1..d {
            for d2 in (d1 + 1)..d {
                let dist = (0..w)
                    .map(|c| {
                        let t = work[(d1, c)] - work[(d2, c)];
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt();
                let differs = (0..w).any(|c| work[(d1, c)].to_bits() != work[(d2, c)].to_bits());
                if dist < delta && differs {
                    for c in 0..w {
                        work[(d2, c)] = work[(d1, c)];
                    }
                    merges.push((d1, d2));
                }
            }
        }
        for r in 1..d {
            let norm = (0..w).map(|c| work[(r, c)] * work[(r, c)]).sum::<f64>().sqrt();
            if norm < delta && (0..w).any(|c| work[(r, c)] != 0.0) {
                for c in 0..w {
                    work[(r, c)] = 0.0;
                }
                zeros.push(r);
            }
        }
        if merges.is_empty() && zeros.is_empty() {
            // Nothing to propose at this tolerance. Once every adjustable row
            // is exactly zero no larger tolerance can propose anything either.
            if (1..d).all(|r| (0..w).all(|c| accepted[(r, c)] == 0.0)) {
                break;
            }
        } else {
            let before = objective(&accepted);
            let after = objective(&work);
            let ok = after.is_finite() && after - before >= -cfg.xi;
            audit.push(AdjustRound { part, delta, merges, zeros, before, after, accepted: ok });
            if !ok {
                return accepted;
            }
            accepted = work;
        }
        delta *= 1.0 + cfg.eta;
    }
    accepted
}

fn set_mixing_matrix(params: &mut ModelParams, m: &DMatrix<f64>) {
    for j in 0..params.g() {
        params.set_mixing_col(j, &m.column(j).into_owned());
    }
}

fn set_body_matrix(params: &mut ModelParams, m: &DMatrix<f64>) {
    for j in 0..params.g() {
        params.set_body_col(j, &m.column(j).into_owned());
    }
}

fn adjust_mixing(
    data: &FitData,
    params: &ModelParams,
    z: &DMatrix<f64>,
    plan: &PenaltyPlan,
    lambda: f64,
    cfg: &AdjustConfig,
    audit: &mut Vec<AdjustRound>,
) -> ModelParams {
    let g = params.g();
    let mut scratch = params.clone();
    let adjusted = adjust_rows(
        PartId::Mixing,
        params.mixing().clone(),
        |m| {
            set_mixing_matrix(&mut scratch, m);
            s0_value(data, z, &scratch, plan) - plan.value(m, g, lambda)
        },
        cfg,
        audit,
    );
    let mut out = params.clone();
    set_mixing_matrix(&mut out, &adjusted);
    out
}

fn adjust_body(
    data: &FitData,
    params: &ModelParams,
    stats: &BodyStats,
    plan: &PenaltyPlan,
    lambda: f64,
    cfg: &AdjustConfig,
    audit: &mut Vec<AdjustRound>,
) -> ModelParams {
    let g = params.g();
    let mut scratch = params.clone();
    let adjusted = adjust_rows(
        PartId::Body,
        params.body().clone(),
        |m| {
            set_body_matrix(&mut scratch, m);
            t0_value(data, stats, &scratch, plan) - plan.value(m, g, lambda)
        },
        cfg,
        audit,
    );
    let mut out = params.clone();
    set_body_matrix(&mut out, &adjusted);
    out
}

fn adjust_tail(
    data: &FitData,
    params: &ModelParams,
    plan: &PenaltyPlan,
    lambda: f64,
    cfg: &AdjustConfig,
    audit: &mut Vec<AdjustRound>,
) -> ModelParams {
    let mut scratch = params.clone();
    let adjusted = adjust_rows(
        PartId::Tail,
        tail_matrix(params),
        |m| {
            scratch.set_tail_coef(m.column(0).into_owned());
            v0_value(data, &scratch, plan) - plan.value(m, 1, lambda)
        },
        cfg,
        audit,
    );
    let mut out = params.clone();
    out.set_tail_coef(adjusted.column(0).into_owned());
    out
}

/// Runs the adjustment pass over all three coefficient blocks (mixing means
/// dispersion and tail-scale stay untouched) against their penalized partial
/// objectives at the frozen latent state.
pub fn auto_adjust(
    data: &FitData,
    params: &ModelParams,
    latent: &LatentState,
    plans: &PartPlans,
    lambdas: PartLambdas,
    cfg: &AdjustConfig,
) -> Adjusted {
    let stats = latent.body_stats(data.y);
    let mut audit = Vec::new();
    let p1 = adjust_mixing(data, params, &latent.z, &plans.mix, lambdas.mix, cfg, &mut audit);
    let p2 = adjust_body(data, &p1, &stats, &plans.body, lambdas.body, cfg, &mut audit);
    let p3 = adjust_tail(data, &p2, &plans.tail, lambdas.tail, cfg, &mut audit);
    Adjusted { params: p3, audit }
}

/// Effective parameter counts: per part, distinct non-zero coefficient rows
/// (exact equality, so merged rows count once) times the free columns, plus
/// the g dispersions on the body part and the scale on the tail part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub df: usize,
}

fn distinct_nonzero_rows(m: &DMatrix<f64>, cols: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for r in 0..m.nrows() {
        let row: Vec<u64> = (0..cols)
            .map(|c| {
                let v = m[(r, c)];
                if v == 0.0 { 0u64 } else { v.to_bits() }
            })
            .collect();
        if row.iter().all(|&b| b == 0) {
            continue;
        }
        seen.insert(row);
    }
    seen.len()
}

pub fn effective_params(params: &ModelParams) -> EffectiveParams {
    let g = params.g();
    let n1 = distinct_nonzero_rows(params.mixing(), g) * g;
    let n2 = distinct_nonzero_rows(params.body(), g) * g + g;
    let n3 = distinct_nonzero_rows(&tail_matrix(params), 1) + 1;
    EffectiveParams { n1, n2, n3, df: n1 + n2 + n3 }
}

fn part_effective(part: PartId, params: &ModelParams) -> usize {
    let e = effective_params(params);
    match part {
        PartId::Mixing => e.n1,
        PartId::Body => e.n2,
        PartId::Tail => e.n3,
    }
}

/// One frozen-latent re-maximization of a single part's penalized partial
/// objective: repeated majorize-then-Newton sweeps until the objective stops
/// moving. Returns the final penalized partial value.
fn refit_block(
    part: PartId,
    data: &FitData,
    z: &DMatrix<f64>,
    stats: &BodyStats,
    params: &mut ModelParams,
    plan: &PenaltyPlan,
    lambda: f64,
    cfg: &FitConfig,
) -> f64 {
    let g = params.g();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..TUNE_MAX_SWEEPS {
        let cur = match part {
            PartId::Mixing => {
                let maj = plan.majorize(params.mixing(), g, lambda);
                for j in 0..g {
                    mstep::update_mixing_col(data, z, params, j, plan, &maj, cfg);
                }
                s0_value(data, z, params, plan) - plan.value(params.mixing(), g, lambda)
            }
            PartId::Body => {
                let maj = plan.majorize(params.body(), g, lambda);
                for j in 0..g {
                    mstep::update_body_col(data, stats, params, j, plan, &maj, cfg);
                }
                for j in 0..g {
                    mstep::update_dispersion(data, stats, params, j);
                }
                t0_value(data, stats, params, plan) - plan.value(params.body(), g, lambda)
            }
            PartId::Tail => {
                let maj = plan.majorize(&tail_matrix(params), 1, lambda);
                mstep::update_tail_coef(data, params, plan, &maj, cfg);
                mstep::update_tail_scale(data, params);
                v0_value(data, params, plan) - plan.value(&tail_matrix(params), 1, lambda)
            }
        };
        if (cur - prev).abs() <= TUNE_TOL * (1.0 + cur.abs()) {
            return cur;
        }
        prev = cur;
    }
    prev
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TuneCriterion {
    PAic,
    PBic,
    Cv { folds: usize },
}

/// Per-part penalty-rate grids (base multipliers; the per-part sample-size
/// factor lives in the penalty plans).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneGrids {
    pub mix: Vec<f64>,
    pub body: Vec<f64>,
    pub tail: Vec<f64>,
}

impl TuneGrids {
    pub fn uniform(grid: &[f64]) -> Self {
        TuneGrids { mix: grid.to_vec(), body: grid.to_vec(), tail: grid.to_vec() }
    }
}

impl Default for TuneGrids {
    fn default() -> Self {
        Self::uniform(&crate::penalty::lambda_grid())
    }
}

/// One scored grid point. `partial` is the unpenalized partial objective of
/// the adjusted block refit on the full data (body part in the full-density
/// convention); `score` is the criterion value; `sd` is the fold standard
/// deviation under cross-validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneGridRow {
    pub part: PartId,
    pub lambda: f64,
    pub partial: f64,
    pub df: usize,
    pub score: f64,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneReport {
    pub lambdas: PartLambdas,
    pub rows: Vec<TuneGridRow>,
    pub warnings: Vec<String>,
}

impl TuneReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,lambda,partial,df,score,sd\n");
        for r in &self.rows {
            let sd = r.sd.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.part.label(),
                r.lambda,
                r.partial,
                r.df,
                r.score,
                sd
            ));
        }
        out
    }
}

/// Owned single-fold copy of the data (and, for training folds, the matching
/// rows of the frozen latent state).
struct OwnedData {
    y: Vec<f64>,
    tau: f64,
    x_mix: DesignMatrix,
    x_body: DesignMatrix,
    x_tail: DesignMatrix,
    body_idx: Vec<usize>,
    tail_idx: Vec<usize>,
}

impl OwnedData {
    fn from_rows(data: &FitData, rows: &[usize]) -> OwnedData {
        let y: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();
        let mut body_idx = Vec::new();
        let mut tail_idx = Vec::new();
        for (p, &yi) in y.iter().enumerate() {
            if yi <= data.tau {
                body_idx.push(p);
            } else {
                tail_idx.push(p);
            }
        }
        OwnedData {
            y,
            tau: data.tau,
            x_mix: data.x_mix.select_rows(rows),
            x_body: data.x_body.select_rows(rows),
            x_tail: data.x_tail.select_rows(rows),
            body_idx,
            tail_idx,
        }
    }

    fn view(&self) -> FitData<'_> {
        FitData {
            y: &self.y,
            tau: self.tau,
            x_mix: &self.x_mix,
            x_body: &self.x_body,
            x_tail: &self.x_tail,
            body_idx: &self.body_idx,
            tail_idx: &self.tail_idx,
        }
    }
}

fn subset_latent(latent: &LatentState, rows: &[usize]) -> LatentState {
    let g1 = latent.z.ncols();
    let g = latent.k.ncols();
    let m = rows.len();
    LatentState {
        z: DMatrix::from_fn(m, g1, |p, j| latent.z[(rows[p], j)]),
        k: DMatrix::from_fn(m, g, |p, j| latent.k[(rows[p], j)]),
        yprime: DMatrix::from_fn(m, g, |p, j| latent.yprime[(rows[p], j)]),
        elog: DMatrix::from_fn(m, g, |p, j| latent.elog[(rows[p], j)]),
        obs_loglik: 0.0,
    }
}

struct CvFold {
    train: OwnedData,
    train_latent: LatentState,
    train_stats: BodyStats,
    held: OwnedData,
}

struct CvSetup {
    folds: Vec<CvFold>,
    body_ok: bool,
    tail_ok: bool,
}

fn assign_folds(data: &FitData, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, STREAM_CV);
    let mut body: Vec<usize> = data.body_idx.to_vec();
    let mut tail: Vec<usize> = data.tail_idx.to_vec();
    body.shuffle(&mut rng);
    tail.shuffle(&mut rng);
    let mut fold_of = vec![0usize; data.n()];
    for (pos, &i) in body.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    for (pos, &i) in tail.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    fold_of
}

fn build_folds(data: &FitData, latent: &LatentState, k: usize, seed: u64) -> Result<CvSetup> {
    if k < 2 {
        return Err(Error::domain("cross-validation needs at least 2 folds"));
    }
    if data.n() < k {
        return Err(Error::data("fewer observations than cross-validation folds"));
    }
    // Stratified assignment; one reshuffle attempt if a fold misses a side.
    let mut fold_of = assign_folds(data, k, seed);
    let sides = |fold_of: &[usize]| {
        let mut body = vec![0usize; k];
        let mut tail = vec![0usize; k];
        for &i in data.body_idx {
            body[fold_of[i]] += 1;
        }
        for &i in data.tail_idx {
            tail[fold_of[i]] += 1;
        }
        (body.iter().all(|&c| c > 0), tail.iter().all(|&c| c > 0))
    };
    let (mut body_ok, mut tail_ok) = sides(&fold_of);
    if !(body_ok && tail_ok) {
        fold_of = assign_folds(data, k, seed ^ 0x9e37_79b9);
        let re = sides(&fold_of);
        body_ok = re.0;
        tail_ok = re.1;
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let train_rows: Vec<usize> = (0..data.n()).filter(|&i| fold_of[i] != f).collect();
        let held_rows: Vec<usize> = (0..data.n()).filter(|&i| fold_of[i] == f).collect();
        let train = OwnedData::from_rows(data, &train_rows);
        let train_latent = subset_latent(latent, &train_rows);
        let train_stats = train_latent.body_stats(&train.y);
        folds.push(CvFold { train, train_latent, train_stats, held: OwnedData::from_rows(data, &held_rows) });
    }
    Ok(CvSetup { folds, body_ok, tail_ok })
}

/// Unpenalized partial of one part (body in the full-density convention).
fn part_partial0(
    part: PartId,
    data: &FitData,
    z: &DMatrix<f64>,
    stats: &BodyStats,
    params: &ModelParams,
    plan: &PenaltyPlan,
) -> f64 {
    match part {
        PartId::Mixing => s0_value(data, z, params, plan),
        PartId::Body => t0_full(data, stats, params, plan),
        PartId::Tail => v0_value(data, params, plan),
    }
}

/// Held-out partial deviance: latent state recomputed on the held rows at the
/// trained parameters, then -2 times the part's unpenalized partial.
fn heldout_deviance(part: PartId, held: &OwnedData, trained: &ModelParams, plan: &PenaltyPlan) -> f64 {
    let view = held.view();
    let mut rng = substream(0, STREAM_ESTEP);
    match estep(&view, trained, EStepMode::Quadrature { tol: 1e-8 }, &mut rng) {
        Ok(lat) => {
            let stats = lat.body_stats(view.y);
            -2.0 * part_partial0(part, &view, &lat.z, &stats, trained, plan)
        }
        Err(e) => {
            log::warn!("held-out scoring failed ({e}); treating the grid point as unusable");
            f64::INFINITY
        }
    }
}

fn adjust_one(
    part: PartId,
    data: &FitData,
    params: &ModelParams,
    z: &DMatrix<f64>,
    stats: &BodyStats,
    plan: &PenaltyPlan,
    lambda: f64,
    cfg: &AdjustConfig,
    audit: &mut Vec<AdjustRound>,
) -> ModelParams {
    match part {
        PartId::Mixing => adjust_mixing(data, params, z, plan, lambda, cfg, audit),
        PartId::Body => adjust_body(data, params, stats, plan, lambda, cfg, audit),
        PartId::Tail => adjust_tail(data, params, plan, lambda, cfg, audit),
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn tune_part(
    part: PartId,
    data: &FitData,
    pilot: &ModelParams,
    z: &DMatrix<f64>,
    stats: &BodyStats,
    plan: &PenaltyPlan,
    grid: &[f64],
    criterion: TuneCriterion,
    fit_cfg: &FitConfig,
    adj_cfg: &AdjustConfig,
    cv: Option<&CvSetup>,
    rows: &mut Vec<TuneGridRow>,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::domain("empty tuning grid"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("tuning grid must be strictly ascending"));
    }
    let n_part = match part {
        PartId::Mixing => data.n(),
        PartId::Body => data.body_idx.len(),
        PartId::Tail => data.tail_idx.len(),
    };
    let mut warm = pilot.clone();
    let mut warm_folds: Vec<ModelParams> = match (&criterion, cv) {
        (TuneCriterion::Cv { .. }, Some(setup)) => setup.folds.iter().map(|_| pilot.clone()).collect(),
        _ => Vec::new(),
    };
    let mut scratch_audit = Vec::new();
    let mut means = Vec::with_capacity(grid.len());
    let mut sds = Vec::with_capacity(grid.len());
    for &lam in grid {
        refit_block(part, data, z, stats, &mut warm, plan, lam, fit_cfg);
        scratch_audit.clear();
        let adjusted = adjust_one(part, data, &warm, z, stats, plan, lam, adj_cfg, &mut scratch_audit);
        let partial = part_partial0(part, data, z, stats, &adjusted, plan);
        let df = part_effective(part, &adjusted);
        let (score, sd) = match criterion {
            TuneCriterion::PAic => (-2.0 * partial + 2.0 * df as f64, None),
            TuneCriterion::PBic => (-2.0 * partial + (n_part as f64).ln() * df as f64, None),
            TuneCriterion::Cv { .. } => {
                let setup = cv.expect("fold setup present under CV");
                let mut scores = Vec::with_capacity(setup.folds.len());
                for (fi, fold) in setup.folds.iter().enumerate() {
                    let tview = fold.train.view();
                    refit_block(
                        part,
                        &tview,
                        &fold.train_latent.z,
                        &fold.train_stats,
                        &mut warm_folds[fi],
                        plan,
                        lam,
                        fit_cfg,
                    );
                    scratch_audit.clear();
                    let adj = adjust_one(
                        part,
                        &tview,
                        &warm_folds[fi],
                        &fold.train_latent.z,
                        &fold.train_stats,
                        plan,
                        lam,
                        adj_cfg,
                        &mut scratch_audit,
                    );
                    scores.push(heldout_deviance(part, &fold.held, &adj, plan));
                }
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                (mean, Some(sample_sd(&scores)))
            }
        };
        means.push(score);
        sds.push(sd);
        rows.push(TuneGridRow { part, lambda: lam, partial, df, score, sd });
    }
    let best = (0..grid.len())
        .min_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    if !means[best].is_finite() {
        return Err(Error::Fit(format!("{} tuning scores are not finite", part.label())));
    }
    let chosen = match criterion {
        TuneCriterion::PAic | TuneCriterion::PBic => grid[best],
        TuneCriterion::Cv { .. } => {
            // One-SD rule: the largest rate whose mean deviance stays within
            // one fold standard deviation of the minimum.
            let thresh = means[best] + sds[best].unwrap_or(0.0);
            let mut pick = grid[best];
            for i in 0..grid.len() {
                if means[i] <= thresh {
                    pick = pick.max(grid[i]);
                }
            }
            pick
        }
    };
    Ok(chosen)
}

/// Tunes the three penalty rates independently on frozen pilot latent state.
/// Each grid point re-maximizes only that part's penalized partial objective
/// (warm-started along the grid), adjusts the block, and scores it. Under
/// cross-validation the folds are stratified by body/tail; a side that cannot
/// be stratified falls back to pBIC for the parts that need it.
#[allow(clippy::too_many_arguments)]
pub fn tune_lambda(
    data: &FitData,
    pilot: &ModelParams,
    latent: &LatentState,
    plans: &PartPlans,
    grids: &TuneGrids,
    criterion: TuneCriterion,
    fit_cfg: &FitConfig,
    adj_cfg: &AdjustConfig,
    seed: u64,
) -> Result<TuneReport> {
    let stats = latent.body_stats(data.y);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let cv_setup = match criterion {
        TuneCriterion::Cv { folds } => Some(build_folds(data, latent, folds, seed)?),
        _ => None,
    };
    let mut criterion_for = |part: PartId| -> TuneCriterion {
        if let (TuneCriterion::Cv { .. }, Some(setup)) = (criterion, cv_setup.as_ref()) {
            let needs_tail = matches!(part, PartId::Tail);
            let needs_body = matches!(part, PartId::Body);
            if (needs_tail && !setup.tail_ok) || (needs_body && !setup.body_ok) {
                let msg = format!(
                    "cross-validation folds cannot be stratified for the {} part; falling back to pBIC",
                    part.label()
                );
                log::warn!("{msg}");
                warnings.push(msg);
                return TuneCriterion::PBic;
            }
        }
        criterion
    };
    let c1 = criterion_for(PartId::Mixing);
    let l1 = tune_part(
        PartId::Mixing,
        data,
        pilot,
        &latent.z,
        &stats,
        &plans.mix,
        &grids.mix,
        c1,
        fit_cfg,
        adj_cfg,
        cv_setup.as_ref(),
        &mut rows,
    )?;
    let c2 = criterion_for(PartId::Body);
    let l2 = tune_part(
        PartId::Body,
        data,
        pilot,
        &latent.z,
        &stats,
        &plans.body,
        &grids.body,
        c2,
        fit_cfg,
        adj_cfg,
        cv_setup.as_ref(),
        &mut rows,
    )?;
    let c3 = criterion_for(PartId::Tail);
    let l3 = tune_part(
        PartId::Tail,
        data,
        pilot,
        &latent.z,
        &stats,
        &plans.tail,
        &grids.tail,
        c3,
        fit_cfg,
        adj_cfg,
        cv_setup.as_ref(),
        &mut rows,
    )?;
    Ok(TuneReport { lambdas: PartLambdas { mix: l1, body: l2, tail: l3 }, rows, warnings })
}

/// How one part's design was reduced: groups of full-design columns that now
/// share a single reduced column (group 0 is the intercept alone), plus the
/// columns dropped because their coefficient rows are zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Reduction {
    pub groups: Vec<Vec<usize>>,
    pub dropped: Vec<usize>,
}

/// Collapse-and-refit output: the reduced-space fit, the coefficients mapped
/// back onto the full design layout, and the per-part reductions with their
/// reduced design matrices (what the inference layer operates on).
#[derive(Clone, Debug)]
pub struct RefitOutcome {
    pub report: gem::FitReport,
    pub full_params: ModelParams,
    pub mix: Reduction,
    pub body: Reduction,
    pub tail: Reduction,
    pub x_mix: DesignMatrix,
    pub x_body: DesignMatrix,
    pub x_tail: DesignMatrix,
}

/// Groups the non-intercept rows of a coefficient matrix by exact equality;
/// all-zero rows are dropped.
fn row_groups(m: &DMatrix<f64>, cols: usize) -> Reduction {
    let mut groups: Vec<Vec<usize>> = vec![vec![0]];
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut dropped = Vec::new();
    for r in 1..m.nrows() {
        if (0..cols).all(|c| m[(r, c)] == 0.0) {
            dropped.push(r);
            continue;
        }
        let key: Vec<u64> = (0..cols).map(|c| m[(r, c)].to_bits()).collect();
        if let Some(pos) = keys.iter().position(|k| *k == key) {
            groups[pos + 1].push(r);
        } else {
            keys.push(key);
            groups.push(vec![r]);
        }
    }
    Reduction { groups, dropped }
}

fn reduced_design(x: &DesignMatrix, red: &Reduction, schema: &CovariateSchema) -> DesignMatrix {
    let n = x.n();
    let dr = red.groups.len();
    let xt = DMatrix::from_fn(dr, n, |r, i| red.groups[r].iter().map(|&c| x.obs(i)[c]).sum());
    let origins: Vec<ColumnOrigin> = red
        .groups
        .iter()
        .map(|grp| {
            if grp.len() == 1 {
                x.origins()[grp[0]].clone()
            } else {
                let label = grp
                    .iter()
                    .map(|&c| x.origins()[c].label(schema))
                    .collect::<Vec<_>>()
                    .join("+");
                ColumnOrigin::Pooled { label }
            }
        })
        .collect();
    DesignMatrix::from_parts(xt, origins)
}

/// First-member rows of each group, as the reduced coefficient matrix.
fn reduce_matrix(m: &DMatrix<f64>, red: &Reduction, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(red.groups.len(), cols, |r, c| m[(red.groups[r][0], c)])
}

/// Expands a reduced coefficient matrix back onto the full row layout:
/// group members share the reduced row bit-for-bit, dropped rows are zero.
fn expand_matrix(m_red: &DMatrix<f64>, red: &Reduction, d_full: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d_full, cols);
    for (r, grp) in red.groups.iter().enumerate() {
        for &fr in grp {
            for c in 0..cols {
                out[(fr, c)] = m_red[(r, c)];
            }
        }
    }
    out
}

/// Builds per-part reduced designs from the adjusted coefficient pattern
/// (merged rows pool their columns, zero rows drop theirs), refits without
/// penalties from the adjusted values, and maps the result back onto the
/// full layout. With nothing merged or zeroed this is a plain unpenalized
/// refit warm-started at `adjusted`.
pub fn collapse_and_refit(
    data: &FitData,
    schema: &CovariateSchema,
    adjusted: &ModelParams,
    cfg: &FitConfig,
) -> Result<RefitOutcome> {
    let g = adjusted.g();
    let (d_mix, d_body, d_tail) = adjusted.dims();
    let mix_red = row_groups(adjusted.mixing(), g);
    let body_red = row_groups(adjusted.body(), g);
    let tail_red = row_groups(&tail_matrix(adjusted), 1);

    let x_mix = reduced_design(data.x_mix, &mix_red, schema);
    let x_body = reduced_design(data.x_body, &body_red, schema);
    let x_tail = reduced_design(data.x_tail, &tail_red, schema);

    let init = ModelParams::from_free(
        reduce_matrix(adjusted.mixing(), &mix_red, g),
        reduce_matrix(adjusted.body(), &body_red, g),
        adjusted.dispersion().clone(),
        reduce_matrix(&tail_matrix(adjusted), &tail_red, 1).column(0).into_owned(),
        adjusted.tail_scale(),
        adjusted.tau(),
    )?;

    let red_data = FitData {
        y: data.y,
        tau: data.tau,
        x_mix: &x_mix,
        x_body: &x_body,
        x_tail: &x_tail,
        body_idx: data.body_idx,
        tail_idx: data.tail_idx,
    };
    let plans = PartPlans::unpenalized(mix_red.groups.len(), body_red.groups.len(), tail_red.groups.len());
    let report = gem::fit(&red_data, init, &plans, PartLambdas::zero(), cfg)?;

    let p = &report.params;
    let mix_free = p.mixing().view((0, 0), (mix_red.groups.len(), g)).into_owned();
    let full_params = ModelParams::from_free(
        expand_matrix(&mix_free, &mix_red, d_mix, g),
        expand_matrix(p.body(), &body_red, d_body, g),
        p.dispersion().clone(),
        expand_matrix(&tail_matrix(p), &tail_red, d_tail, 1).column(0).into_owned(),
        p.tail_scale(),
        p.tau(),
    )?;
    Ok(RefitOutcome { report, full_params, mix: mix_red, body: body_red, tail: tail_red, x_mix, x_body, x_tail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{sample_composite, CovRow};
    use crate::gem::{fit, init_params};
    use crate::penalty::Penalty;
    use crate::rng::STREAM_SIMULATE;
    use crate::schema::{
        encode_design, Covariate, CovariateKind, Dataset, RawValue,
    };
    use nalgebra::DVector;
    use rand::Rng;

    // Ordinal band with a mergeable level pair (b == c in truth) plus a
    // quantized continuous load with no effect anywhere. Four design columns.
    fn test_schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            Covariate {
                name: "band".into(),
                kind: CovariateKind::Ordinal,
                levels: vec!["a".into(), "b".into(), "c".into()],
            },
            Covariate { name: "load".into(), kind: CovariateKind::Continuous, levels: vec![] },
        ])
        .unwrap()
    }

    fn test_truth(tau: f64) -> ModelParams {
        let mixing_free =
            DMatrix::from_column_slice(4, 2, &[0.7, 0.5, 0.5, 0.0, 0.2, 0.3, 0.3, 0.0]);
        let body = DMatrix::from_column_slice(4, 2, &[0.3, 0.6, 0.6, 0.0, 1.5, 0.4, 0.4, 0.0]);
        ModelParams::from_free(
            mixing_free,
            body,
            DVector::from_element(2, 0.25),
            DVector::from_column_slice(&[0.5, 0.3, 0.3, 0.0]),
            2.0,
            tau,
        )
        .unwrap()
    }

    fn simulate(n: usize, seed: u64) -> (CovariateSchema, Dataset, ModelParams) {
        let schema = test_schema();
        let tau = 6.0;
        let truth = test_truth(tau);
        let mut rng = substream(seed, STREAM_SIMULATE);
        let levels = ["a", "b", "c"];
        let quant = [0.0, 0.25, 0.5, 0.75];
        let rows: Vec<Vec<RawValue>> = (0..n)
            .map(|_| {
                vec![
                    RawValue::Level(levels[rng.gen_range(0..3)].to_string()),
                    RawValue::Number(quant[rng.gen_range(0..4)]),
                ]
            })
            .collect();
        let x = encode_design(&schema, &rows).unwrap();
        let y = DVector::from_fn(n, |i, _| {
            sample_composite(&truth, CovRow::shared(x.obs(i)), &mut rng).unwrap()
        });
        (schema, Dataset::new(y, x, tau).unwrap(), truth)
    }

    fn quad_cfg(tol: f64, iters: usize) -> FitConfig {
        FitConfig {
            estep: EStepMode::Quadrature { tol: 1e-8 },
            tol,
            max_iters: iters,
            ..FitConfig::default()
        }
    }

    fn pilot_fit(ds: &Dataset, g: usize, seed: u64, tol: f64, iters: usize) -> (ModelParams, LatentState) {
        let data = FitData::from_dataset(ds);
        let init = init_params(&data, g, seed).unwrap();
        let (d, _, _) = init.dims();
        let plans = PartPlans::unpenalized(d, d, d);
        let report = fit(&data, init, &plans, PartLambdas::zero(), &quad_cfg(tol, iters)).unwrap();
        let mut rng = substream(0, STREAM_ESTEP);
        let latent =
            estep(&data, &report.params, EStepMode::Quadrature { tol: 1e-8 }, &mut rng).unwrap();
        (report.params, latent)
    }

    #[test]
    fn partial_decomposition_matches_complete_data_objective() {
        let (schema, ds, _) = simulate(300, 11);
        let data = FitData::from_dataset(&ds);
        let (params, latent) = pilot_fit(&ds, 2, 1, 1e-3, 60);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let pv = partial_objectives(&data, &params, &latent, &plans, PartLambdas::zero());
        assert_eq!(pv.s, pv.s0);
        assert_eq!(pv.t, pv.t0);
        assert_eq!(pv.v, pv.v0);
        let stats = latent.body_stats(data.y);
        let q = mstep::q_value(
            &data,
            &latent.z,
            &stats,
            &params,
            &plans,
            &zero_maj(&plans.mix),
            &zero_maj(&plans.body),
            &zero_maj(&plans.tail),
        );
        assert!(
            (pv.s0 + pv.t0 + pv.v0 - q).abs() <= 1e-9,
            "decomposition off: {} vs {}",
            pv.s0 + pv.t0 + pv.v0,
            q
        );
        // Positive rates subtract a positive penalty at nonzero coefficients.
        let pv1 = partial_objectives(&data, &params, &latent, &plans, PartLambdas::uniform(0.5));
        assert!(pv1.s < pv1.s0);
        assert!(pv1.t < pv1.t0);
        assert!(pv1.v < pv1.v0);
        assert_eq!(pv1.s0, pv.s0);
    }

    #[test]
    fn tail_partial_is_zero_without_exceedances() {
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0, 0.5]);
        let ds = Dataset::new(y, DesignMatrix::intercept_only(4), 10.0).unwrap();
        let data = FitData::from_dataset(&ds);
        assert!(data.tail_idx.is_empty());
        let params = ModelParams::from_free(
            DMatrix::from_column_slice(1, 1, &[0.4]),
            DMatrix::from_column_slice(1, 1, &[0.5]),
            DVector::from_element(1, 0.5),
            DVector::from_element(1, 0.4),
            1.0,
            10.0,
        )
        .unwrap();
        let mut rng = substream(0, STREAM_ESTEP);
        let latent = estep(&data, &params, EStepMode::Quadrature { tol: 1e-8 }, &mut rng).unwrap();
        let plans = PartPlans::unpenalized(1, 1, 1);
        let pv = partial_objectives(&data, &params, &latent, &plans, PartLambdas::zero());
        assert_eq!(pv.v0, 0.0);
        assert_eq!(pv.v, 0.0);
    }

    #[test]
    fn adjust_merges_close_rows_and_zeroes_small_ones() {
        let (schema, ds, truth) = simulate(250, 17);
        let data = FitData::from_dataset(&ds);
        // Perturb the mergeable pair by 1e-7 and give the null rows norm 1e-6.
        let mut mixing = truth.mixing().clone();
        mixing[(2, 0)] += 1e-7;
        mixing[(3, 0)] = 1e-6;
        let mut body = truth.body().clone();
        body[(2, 1)] += 1e-7;
        body[(3, 0)] = -1e-6;
        let mut tail = truth.tail_coef().clone();
        tail[2] += 1e-7;
        tail[3] = 1e-6;
        let params = ModelParams::new(
            mixing,
            body,
            truth.dispersion().clone(),
            tail,
            truth.tail_scale(),
            truth.tau(),
        )
        .unwrap();
        let mut rng = substream(0, STREAM_ESTEP);
        let latent = estep(&data, &params, EStepMode::Quadrature { tol: 1e-8 }, &mut rng).unwrap();
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        // Cap the tolerance growth well below the real coefficient scale so
        // the pass only acts on the planted near-ties.
        let cfg = AdjustConfig { max_rounds: 30, ..AdjustConfig::default() };
        let adj = auto_adjust(&data, &params, &latent, &plans, PartLambdas::zero(), &cfg);
        let p = &adj.params;
        for c in 0..3 {
            assert_eq!(p.mixing()[(1, c)].to_bits(), p.mixing()[(2, c)].to_bits());
            assert_eq!(p.mixing()[(0, c)].to_bits(), params.mixing()[(0, c)].to_bits());
        }
        for c in 0..2 {
            assert_eq!(p.body()[(1, c)].to_bits(), p.body()[(2, c)].to_bits());
            assert_eq!(p.body()[(0, c)].to_bits(), params.body()[(0, c)].to_bits());
        }
        assert_eq!(p.tail_coef()[1].to_bits(), p.tail_coef()[2].to_bits());
        assert_eq!(p.tail_coef()[0].to_bits(), params.tail_coef()[0].to_bits());
        for c in 0..3 {
            assert_eq!(p.mixing()[(3, c)], 0.0);
        }
        assert_eq!(p.body()[(3, 0)], 0.0);
        assert_eq!(p.body()[(3, 1)], 0.0);
        assert_eq!(p.tail_coef()[3], 0.0);
        assert_eq!(p.dispersion(), params.dispersion());
        assert_eq!(p.tail_scale(), params.tail_scale());
        let merged: usize = adj.audit.iter().map(|r| r.merges.len()).sum();
        let zeroed: usize = adj.audit.iter().map(|r| r.zeros.len()).sum();
        assert!(merged >= 3, "expected merges in every part: {:?}", adj.audit);
        assert!(zeroed >= 3, "expected zeroed rows in every part: {:?}", adj.audit);
        for r in &adj.audit {
            if r.accepted {
                assert!(
                    r.before - r.after <= cfg.xi + 1e-9,
                    "accepted round dropped the objective too far: {r:?}"
                );
            }
        }
    }

    #[test]
    fn adjust_rejects_a_damaging_round_and_keeps_last_accepted_state() {
        // Truth where the band effect is strong and the two band rows are
        // exactly equal; the only possible proposal is zeroing them, which
        // costs far more than xi.
        let schema = test_schema();
        let tau = 6.0;
        let mixing_free = DMatrix::from_column_slice(4, 2, &[0.7, 0.4, 0.4, 0.0, 0.2, 0.2, 0.2, 0.0]);
        let body = DMatrix::from_column_slice(4, 2, &[0.3, 0.9, 0.9, 0.0, 1.5, 0.5, 0.5, 0.0]);
        let truth = ModelParams::from_free(
            mixing_free,
            body,
            DVector::from_element(2, 0.25),
            DVector::from_column_slice(&[0.5, 0.2, 0.2, 0.0]),
            2.0,
            tau,
        )
        .unwrap();
        let mut rng = substream(23, STREAM_SIMULATE);
        let levels = ["a", "b", "c"];
        let rows: Vec<Vec<RawValue>> = (0..300)
            .map(|_| {
                vec![
                    RawValue::Level(levels[rng.gen_range(0..3)].to_string()),
                    RawValue::Number(0.0),
                ]
            })
            .collect();
        let x = encode_design(&schema, &rows).unwrap();
        let y = DVector::from_fn(300, |i, _| {
            sample_composite(&truth, CovRow::shared(x.obs(i)), &mut rng).unwrap()
        });
        let ds = Dataset::new(y, x, tau).unwrap();
        let data = FitData::from_dataset(&ds);
        let mut rng2 = substream(0, STREAM_ESTEP);
        let latent = estep(&data, &truth, EStepMode::Quadrature { tol: 1e-8 }, &mut rng2).unwrap();
        let stats = latent.body_stats(data.y);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let cfg = AdjustConfig { delta0: 2.0, eta: 0.3, xi: 1.0, max_rounds: 3 };
        let mut audit = Vec::new();
        let adjusted = adjust_body(&data, &truth, &stats, &plans.body, 0.0, &cfg, &mut audit);
        assert_eq!(adjusted.body(), truth.body(), "rejected round must leave the state alone");
        assert_eq!(audit.len(), 1);
        let round = &audit[0];
        assert!(!round.accepted);
        assert!(!round.zeros.is_empty());
        assert!(round.before - round.after > cfg.xi, "round was not actually damaging: {round:?}");
    }

    #[test]
    fn effective_params_counts_distinct_nonzero_rows() {
        // Three distinct rows, g = 2: the pinned mixing column never counts.
        let mixing_free = DMatrix::from_column_slice(3, 2, &[0.1, 0.3, 0.5, 0.2, 0.4, 0.6]);
        let body = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = ModelParams::from_free(
            mixing_free,
            body.clone(),
            DVector::from_element(2, 0.5),
            DVector::from_column_slice(&[0.4, 0.2, 0.1]),
            1.0,
            5.0,
        )
        .unwrap();
        let e = effective_params(&p);
        assert_eq!(e.n1, 6);
        assert_eq!(e.n2, 8);
        assert_eq!(e.n3, 4);
        assert_eq!(e.df, 18);

        // Merging two body rows removes one distinct row per component.
        let mut body2 = body;
        body2[(2, 0)] = body2[(1, 0)];
        body2[(2, 1)] = body2[(1, 1)];
        let p2 = ModelParams::from_free(
            p.mixing().view((0, 0), (3, 2)).into_owned(),
            body2,
            DVector::from_element(2, 0.5),
            DVector::from_column_slice(&[0.4, 0.2, 0.1]),
            1.0,
            5.0,
        )
        .unwrap();
        assert_eq!(effective_params(&p2).n2, 6);

        // Intercept-only composite with five body components.
        let p3 = ModelParams::from_free(
            DMatrix::from_column_slice(1, 5, &[0.1, 0.2, 0.3, 0.4, 0.5]),
            DMatrix::from_column_slice(1, 5, &[1.0, 1.5, 2.0, 2.5, 3.0]),
            DVector::from_element(5, 0.5),
            DVector::from_element(1, 0.4),
            1.0,
            5.0,
        )
        .unwrap();
        assert_eq!(effective_params(&p3).df, 17);
    }

    #[test]
    fn tuning_grid_reports_reproduce_pilot_at_zero_and_the_paic_formula() {
        let (schema, ds, _) = simulate(400, 31);
        let data = FitData::from_dataset(&ds);
        let (mut pilot, latent) = pilot_fit(&ds, 2, 3, 1e-5, 400);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        // Polish each block at rate zero so the pilot is a fixed point of the
        // frozen-latent sweeps the tuner runs.
        let stats = latent.body_stats(data.y);
        let cfg = quad_cfg(1e-5, 400);
        for part in [PartId::Mixing, PartId::Body, PartId::Tail] {
            let plan = match part {
                PartId::Mixing => &plans.mix,
                PartId::Body => &plans.body,
                PartId::Tail => &plans.tail,
            };
            refit_block(part, &data, &latent.z, &stats, &mut pilot, plan, 0.0, &cfg);
        }
        let pv = partial_objectives(&data, &pilot, &latent, &plans, PartLambdas::zero());
        let grids = TuneGrids::uniform(&[0.0, 0.2, 0.8]);
        // Small round cap keeps the adjustment pass inert at this sample
        // size, which is what the zero-rate reproduction presumes.
        let adj = AdjustConfig { max_rounds: 12, ..AdjustConfig::default() };
        let rep = tune_lambda(
            &data,
            &pilot,
            &latent,
            &plans,
            &grids,
            TuneCriterion::PAic,
            &cfg,
            &adj,
            5,
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 9);
        let row = |p: PartId, l: f64| {
            rep.rows.iter().find(|r| r.part == p && r.lambda == l).expect("grid row")
        };
        let s1sum = stats.s1.sum();
        assert!((row(PartId::Mixing, 0.0).partial - pv.s0).abs() <= 1e-8);
        assert!((row(PartId::Body, 0.0).partial - (pv.t0 - s1sum)).abs() <= 1e-8);
        assert!((row(PartId::Tail, 0.0).partial - pv.v0).abs() <= 1e-8);
        for r in &rep.rows {
            let expect = -2.0 * r.partial + 2.0 * r.df as f64;
            assert!((r.score - expect).abs() <= 1e-9, "pAIC wiring off at {r:?}");
            assert!(r.sd.is_none());
        }
        for l in [rep.lambdas.mix, rep.lambdas.body, rep.lambdas.tail] {
            assert!(grids.mix.contains(&l));
        }
        let csv = rep.to_csv();
        assert!(csv.starts_with("part,lambda,partial,df,score,sd\n"));
        assert_eq!(csv.lines().count(), 10);
        assert!(csv.contains("mixing,0,"));
    }

    #[test]
    fn pbic_selection_is_never_larger_than_paic() {
        let (schema, ds, _) = simulate(500, 37);
        let data = FitData::from_dataset(&ds);
        let (pilot, latent) = pilot_fit(&ds, 2, 5, 1e-4, 300);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let grids = TuneGrids::uniform(&[0.0, 0.1, 0.4, 1.6]);
        let cfg = quad_cfg(1e-4, 300);
        let adj = AdjustConfig::default();
        let paic = tune_lambda(&data, &pilot, &latent, &plans, &grids, TuneCriterion::PAic, &cfg, &adj, 9)
            .unwrap();
        let pbic = tune_lambda(&data, &pilot, &latent, &plans, &grids, TuneCriterion::PBic, &cfg, &adj, 9)
            .unwrap();
        let df_at = |rep: &TuneReport, part: PartId, l: f64| {
            rep.rows.iter().find(|r| r.part == part && r.lambda == l).unwrap().df
        };
        for part in [PartId::Mixing, PartId::Body, PartId::Tail] {
            let la = match part {
                PartId::Mixing => (paic.lambdas.mix, pbic.lambdas.mix),
                PartId::Body => (paic.lambdas.body, pbic.lambdas.body),
                PartId::Tail => (paic.lambdas.tail, pbic.lambdas.tail),
            };
            assert!(
                df_at(&pbic, part, la.1) <= df_at(&paic, part, la.0),
                "{} part grew under pBIC",
                part.label()
            );
        }
    }

    #[test]
    fn tuning_parts_are_separable() {
        let (schema, ds, _) = simulate(300, 43);
        let data = FitData::from_dataset(&ds);
        let (pilot, latent) = pilot_fit(&ds, 2, 7, 1e-3, 150);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let cfg = quad_cfg(1e-3, 150);
        let adj = AdjustConfig::default();
        let a = TuneGrids::uniform(&[0.0, 0.3]);
        let b = TuneGrids {
            mix: vec![0.0, 0.3],
            body: vec![0.05, 0.2, 0.7],
            tail: vec![0.0, 0.3],
        };
        let ra = tune_lambda(&data, &pilot, &latent, &plans, &a, TuneCriterion::PBic, &cfg, &adj, 1)
            .unwrap();
        let rb = tune_lambda(&data, &pilot, &latent, &plans, &b, TuneCriterion::PBic, &cfg, &adj, 1)
            .unwrap();
        assert_eq!(ra.lambdas.mix, rb.lambdas.mix);
        assert_eq!(ra.lambdas.tail, rb.lambdas.tail);
        let mix_rows = |rep: &TuneReport| {
            rep.rows
                .iter()
                .filter(|r| r.part == PartId::Mixing)
                .map(|r| (r.lambda, r.score))
                .collect::<Vec<_>>()
        };
        assert_eq!(mix_rows(&ra), mix_rows(&rb));
    }

    #[test]
    fn cross_validation_applies_the_one_sd_rule() {
        let (schema, ds, _) = simulate(600, 47);
        let data = FitData::from_dataset(&ds);
        let (pilot, latent) = pilot_fit(&ds, 2, 9, 1e-4, 300);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let cfg = quad_cfg(1e-4, 300);
        let rep = tune_lambda(
            &data,
            &pilot,
            &latent,
            &plans,
            &TuneGrids::uniform(&[0.0, 0.2, 0.8]),
            TuneCriterion::Cv { folds: 3 },
            &cfg,
            &AdjustConfig::default(),
            13,
        )
        .unwrap();
        assert!(rep.warnings.is_empty());
        for part in [PartId::Mixing, PartId::Body, PartId::Tail] {
            let rows: Vec<&TuneGridRow> = rep.rows.iter().filter(|r| r.part == part).collect();
            assert_eq!(rows.len(), 3);
            assert!(rows.iter().all(|r| r.sd.is_some()));
            let best = rows
                .iter()
                .min_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
                .unwrap();
            let thresh = best.score + best.sd.unwrap();
            let expect = rows
                .iter()
                .filter(|r| r.score <= thresh)
                .map(|r| r.lambda)
                .fold(f64::NEG_INFINITY, f64::max);
            let got = match part {
                PartId::Mixing => rep.lambdas.mix,
                PartId::Body => rep.lambdas.body,
                PartId::Tail => rep.lambdas.tail,
            };
            assert_eq!(got, expect, "one-SD pick mismatch for {}", part.label());
        }
    }

    #[test]
    fn degenerate_tail_folds_fall_back_to_pbic() {
        let (_, ds, _) = simulate(160, 41);
        // Move the threshold so only three observations exceed it.
        let mut sorted: Vec<f64> = ds.y().iter().copied().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let new_tau = 0.5 * (sorted[2] + sorted[3]);
        let ds = ds.with_tau(new_tau).unwrap();
        assert_eq!(ds.n_tail(), 3);
        let schema = test_schema();
        let data = FitData::from_dataset(&ds);
        let (pilot, latent) = pilot_fit(&ds, 1, 11, 1e-3, 150);
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let cfg = quad_cfg(1e-3, 150);
        let rep = tune_lambda(
            &data,
            &pilot,
            &latent,
            &plans,
            &TuneGrids::uniform(&[0.0, 0.4]),
            TuneCriterion::Cv { folds: 5 },
            &cfg,
            &AdjustConfig::default(),
            17,
        )
        .unwrap();
        assert_eq!(rep.warnings.len(), 1, "warnings: {:?}", rep.warnings);
        assert!(rep.warnings[0].contains("tail"));
        let tail_rows: Vec<&TuneGridRow> =
            rep.rows.iter().filter(|r| r.part == PartId::Tail).collect();
        assert!(tail_rows.iter().all(|r| r.sd.is_none()));
        let best = tail_rows
            .iter()
            .min_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .unwrap();
        assert_eq!(rep.lambdas.tail, best.lambda);
        let mix_rows: Vec<&TuneGridRow> =
            rep.rows.iter().filter(|r| r.part == PartId::Mixing).collect();
        assert!(mix_rows.iter().all(|r| r.sd.is_some()));
    }

    #[test]
    fn collapse_without_a_pattern_is_a_plain_refit() {
        let (schema, ds, _) = simulate(250, 53);
        let data = FitData::from_dataset(&ds);
        let (pilot, _) = pilot_fit(&ds, 1, 13, 1e-6, 400);
        let out = collapse_and_refit(&data, &schema, &pilot, &quad_cfg(1e-6, 200)).unwrap();
        // Fitted rows are never exactly equal or zero, so nothing reduces.
        assert_eq!(out.mix.groups.len(), 4);
        assert!(out.mix.dropped.is_empty());
        assert_eq!(out.x_mix.dim(), 4);
        assert_eq!(out.x_body.dim(), 4);
        assert_eq!(out.x_tail.dim(), 4);
        let mut rng = substream(0, STREAM_ESTEP);
        let before = estep(&data, &pilot, EStepMode::Quadrature { tol: 1e-8 }, &mut rng)
            .unwrap()
            .obs_loglik;
        assert!(out.report.loglik >= before - 1e-6);
        assert!((out.report.loglik - before).abs() < 1e-2);
        let sup = (out.full_params.body() - pilot.body()).abs().max();
        assert!(sup < 0.05, "refit drifted: {sup}");
    }

    #[test]
    fn collapse_pools_merged_columns_and_maps_back() {
        let (schema, ds, _) = simulate(700, 59);
        let data = FitData::from_dataset(&ds);
        let (pilot, _) = pilot_fit(&ds, 2, 15, 1e-4, 300);
        // Hand the collapse an adjusted pattern: band c tied to band b, load
        // removed, in every part.
        let mut mixing = pilot.mixing().clone();
        let mut body = pilot.body().clone();
        let mut tail = pilot.tail_coef().clone();
        for c in 0..3 {
            mixing[(2, c)] = mixing[(1, c)];
            mixing[(3, c)] = 0.0;
        }
        for c in 0..2 {
            body[(2, c)] = body[(1, c)];
            body[(3, c)] = 0.0;
        }
        tail[2] = tail[1];
        tail[3] = 0.0;
        let adjusted = ModelParams::new(
            mixing,
            body,
            pilot.dispersion().clone(),
            tail,
            pilot.tail_scale(),
            pilot.tau(),
        )
        .unwrap();
        let out = collapse_and_refit(&data, &schema, &adjusted, &quad_cfg(1e-4, 300)).unwrap();
        assert_eq!(out.mix.groups, vec![vec![0], vec![1, 2]]);
        assert_eq!(out.mix.dropped, vec![3]);
        assert_eq!(out.body.groups, vec![vec![0], vec![1, 2]]);
        assert_eq!(out.tail.groups, vec![vec![0], vec![1, 2]]);
        assert_eq!(out.x_mix.dim(), 2);
        match &out.x_mix.origins()[1] {
            ColumnOrigin::Pooled { label } => assert!(label.contains("band")),
            other => panic!("expected a pooled column, got {other:?}"),
        }
        let p = &out.full_params;
        for c in 0..3 {
            assert_eq!(p.mixing()[(1, c)].to_bits(), p.mixing()[(2, c)].to_bits());
            assert_eq!(p.mixing()[(3, c)], 0.0);
        }
        for c in 0..2 {
            assert_eq!(p.body()[(1, c)].to_bits(), p.body()[(2, c)].to_bits());
            assert_eq!(p.body()[(3, c)], 0.0);
        }
        assert_eq!(p.tail_coef()[1].to_bits(), p.tail_coef()[2].to_bits());
        assert_eq!(p.tail_coef()[3], 0.0);
        // Two observations that differ only inside the pooled band get
        // literally identical mixing probabilities.
        let rows = vec![
            vec![RawValue::Level("b".into()), RawValue::Number(0.25)],
            vec![RawValue::Level("c".into()), RawValue::Number(0.25)],
        ];
        let x2 = encode_design(&schema, &rows).unwrap();
        assert_eq!(p.mixing_probs(x2.obs(0)), p.mixing_probs(x2.obs(1)));
        // The unpenalized refit cannot do worse than its warm start.
        let mut rng = substream(0, STREAM_ESTEP);
        let at_adjusted = estep(&data, &adjusted, EStepMode::Quadrature { tol: 1e-8 }, &mut rng)
            .unwrap()
            .obs_loglik;
        assert!(out.report.loglik >= at_adjusted - 1e-8);
    }

    #[test]
    fn penalized_fit_then_adjust_then_collapse_recovers_likelihood() {
        let (schema, ds, _) = simulate(700, 61);
        let data = FitData::from_dataset(&ds);
        let init = init_params(&data, 2, 19).unwrap();
        let plans = PartPlans::from_schema(&schema, Penalty::Lasso, &data);
        let cfg = quad_cfg(1e-4, 300);
        let lambdas = PartLambdas::uniform(0.4);
        let penalized = fit(&data, init, &plans, lambdas, &cfg).unwrap();
        let mut rng = substream(0, STREAM_ESTEP);
        let latent =
            estep(&data, &penalized.params, EStepMode::Quadrature { tol: 1e-8 }, &mut rng).unwrap();
        let adj = auto_adjust(&data, &penalized.params, &latent, &plans, lambdas, &AdjustConfig::default());
        let out = collapse_and_refit(&data, &schema, &adj.params, &cfg).unwrap();
        assert!(
            out.report.loglik >= penalized.loglik - 1e-9,
            "refit {} vs penalized {}",
            out.report.loglik,
            penalized.loglik
        );
    }
}
