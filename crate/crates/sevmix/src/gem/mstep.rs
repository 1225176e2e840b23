//! M-step blocks: objective values, exact gradients/Hessians, and guarded
//! damped-Newton updates. Every update compares its block objective before
//! and after and keeps the old value on any decrease, which preserves the
//! fitter's ascent property.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::gem::estep::BodyStats;
use crate::gem::{tail_matrix, FitConfig, FitData};
use crate::model::ModelParams;
use crate::numeric::{brent_max, ln_gamma};
use crate::penalty::{PenaltyMajorizer, PenaltyPlan};

/// Search bounds for the dispersion update, on the log scale.
pub const PHI_BOUNDS: (f64, f64) = (1e-6, 1e3);
/// Search bounds for the tail scale update, relative to tau.
pub const THETA_REL_BOUNDS: (f64, f64) = (1e-6, 1e3);

/// Mixing-part objective: sum_i sum_j z_ij ln pi_ij minus the majorized
/// penalty over the free mixing columns.
pub fn mixing_objective(
    data: &FitData,
    z: &DMatrix<f64>,
    params: &ModelParams,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
) -> f64 {
    let g = params.g();
    let mut pibuf = vec![0.0; g + 1];
    let mut acc = 0.0;
    for i in 0..data.n() {
        params.mixing_probs_into(data.x_mix.obs(i), &mut pibuf);
        for j in 0..=g {
            let zij = z[(i, j)];
            if zij != 0.0 {
                acc += zij * pibuf[j].ln();
            }
        }
    }
    acc - maj.value(plan, params.mixing(), g)
}

/// Gradient and Hessian of the mixing objective with respect to free mixing
/// column j.
pub fn mixing_grad_hess(
    data: &FitData,
    z: &DMatrix<f64>,
    params: &ModelParams,
    j: usize,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
) -> (DVector<f64>, DMatrix<f64>) {
    let g = params.g();
    let d = data.x_mix.dim();
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let mut pibuf = vec![0.0; g + 1];
    for i in 0..data.n() {
        let x = data.x_mix.obs(i);
        params.mixing_probs_into(x, &mut pibuf);
        let gi = z[(i, j)] - pibuf[j];
        let hi = pibuf[j] * (1.0 - pibuf[j]);
        for r in 0..d {
            grad[r] += gi * x[r];
            for c in 0..d {
                hess[(r, c)] -= hi * x[r] * x[c];
            }
        }
    }
    let mut pen_grad = vec![0.0; d];
    maj.add_grad_col(plan, params.mixing(), j, &mut pen_grad);
    for r in 0..d {
        grad[r] -= pen_grad[r];
    }
    let mut pen_hess = DMatrix::zeros(d, d);
    maj.add_hess(plan, &mut pen_hess);
    hess -= pen_hess;
    (grad, hess)
}

/// Body-part objective for component j: the complete-data Gamma terms
/// (observations plus phantom exceedances, with the log-moment standing in
/// for ln y) minus column j's share of the majorized penalty.
pub fn body_objective(
    data: &FitData,
    stats: &BodyStats,
    params: &ModelParams,
    j: usize,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
) -> f64 {
    let phi = params.dispersion()[j];
    let lnphi = phi.ln();
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for &i in data.body_idx {
        let w = stats.w[(i, j)];
        if w == 0.0 {
            continue;
        }
        let lp = params.body_linpred(j, data.x_body.obs(i));
        acc += stats.s1[(i, j)] - w * (lnphi + lp) - stats.s2[(i, j)] * (-lp).exp();
        wsum += w;
    }
    acc / phi - wsum * ln_gamma(1.0 / phi) - maj.value_col(plan, params.body(), j)
}

/// Gradient and Hessian of the body objective with respect to mean-coefficient
/// column j (dispersion held fixed).
pub fn body_grad_hess(
    data: &FitData,
    stats: &BodyStats,
    params: &ModelParams,
    j: usize,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
) -> (DVector<f64>, DMatrix<f64>) {
    let phi = params.dispersion()[j];
    let d = data.x_body.dim();
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for &i in data.body_idx {
        let w = stats.w[(i, j)];
        if w == 0.0 {
            continue;
        }
        let x = data.x_body.obs(i);
        let lp = params.body_linpred(j, x);
        let e = stats.s2[(i, j)] * (-lp).exp();
        for r in 0..d {
            grad[r] += (e - w) * x[r];
            for c in 0..d {
                hess[(r, c)] -= e * x[r] * x[c];
            }
        }
    }
    grad /= phi;
    hess /= phi;
    let mut pen_grad = vec![0.0; d];
    maj.add_grad_col(plan, params.body(), j, &mut pen_grad);
    for r in 0..d {
        grad[r] -= pen_grad[r];
    }
    let mut pen_hess = DMatrix::zeros(d, d);
    maj.add_hess(plan, &mut pen_hess);
    hess -= pen_hess;
    (grad, hess)
}

/// Profile of the body objective in the dispersion phi at fixed mean
/// coefficients: T(phi) = (C - W ln phi)/phi - W ln Gamma(1/phi), where C and
/// W collapse the data to two scalars.
pub fn dispersion_profile(data: &FitData, stats: &BodyStats, params: &ModelParams, j: usize) -> (f64, f64) {
    let mut c = 0.0;
    let mut w = 0.0;
    for &i in data.body_idx {
        let wij = stats.w[(i, j)];
        if wij == 0.0 {
            continue;
        }
        let lp = params.body_linpred(j, data.x_body.obs(i));
        c += stats.s1[(i, j)] - wij * lp - stats.s2[(i, j)] * (-lp).exp();
        w += wij;
    }
    (c, w)
}

/// Tail-part objective in the tail coefficients and scale: the truncated
/// Lomax log-likelihood over exceedances minus the majorized penalty.
pub fn tail_objective(
    data: &FitData,
    params: &ModelParams,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
) -> f64 {
    let tau = data.tau;
    let theta = params.tail_scale();
    let mut acc = 0.0;
    for &i in data.tail_idx {
        let x = data.x_tail.obs(i);
        let nu_x = params.tail_index(x).ln();
        let eta = nu_x.exp();
        let l = ((data.y[i] + theta) / (tau + theta)).ln();
        acc += nu_x - eta * l - (data.y[i] + theta).ln();
    }
    acc - maj.value(plan, &tail_matrix(params), 1)
}

/// Gradient and Hessian of the tail objective with respect to the tail-index
/// coefficients (scale held fixed).
pub fn tail_grad_hess(
    data: &FitData,
    params: &ModelParams,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
) -> (DVector<f64>, DMatrix<f64>) {
    let tau = data.tau;
    let theta = params.tail_scale();
    let d = data.x_tail.dim();
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for &i in data.tail_idx {
        let x = data.x_tail.obs(i);
        let eta = params.tail_index(x);
        let l = ((data.y[i] + theta) / (tau + theta)).ln();
        let gi = 1.0 - eta * l;
        let hi = eta * l;
        for r in 0..d {
            grad[r] += gi * x[r];
            for c in 0..d {
                hess[(r, c)] -= hi * x[r] * x[c];
            }
        }
    }
    let tm = tail_matrix(params);
    let mut pen_grad = vec![0.0; d];
    maj.add_grad_col(plan, &tm, 0, &mut pen_grad);
    for r in 0..d {
        grad[r] -= pen_grad[r];
    }
    let mut pen_hess = DMatrix::zeros(d, d);
    maj.add_hess(plan, &mut pen_hess);
    hess -= pen_hess;
    (grad, hess)
}

/// Full majorized complete-data objective (all blocks), used by invariants
/// and diagnostics.
pub fn q_value(
    data: &FitData,
    z: &DMatrix<f64>,
    stats: &BodyStats,
    params: &ModelParams,
    plans: &crate::gem::PartPlans,
    maj_mix: &PenaltyMajorizer,
    maj_body: &PenaltyMajorizer,
    maj_tail: &PenaltyMajorizer,
) -> f64 {
    let g = params.g();
    let mut total = mixing_objective(data, z, params, &plans.mix, maj_mix);
    for j in 0..g {
        total += body_objective(data, stats, params, j, &plans.body, maj_body);
    }
    total -= maj_body.constant;
    total += tail_objective(data, params, &plans.tail, maj_tail);
    total
}

/// Solves (-hess + ridge I) dir = grad, doubling the ridge from `base` until
/// the factorization succeeds.
fn ascent_direction(grad: &DVector<f64>, hess: &DMatrix<f64>, base: f64) -> DVector<f64> {
    let d = grad.len();
    let neg = -hess;
    let mut ridge = 0.0;
    loop {
        let mut m = neg.clone();
        for r in 0..d {
            m[(r, r)] += ridge;
        }
        if let Some(ch) = Cholesky::new(m) {
            let dir = ch.solve(grad);
            if dir.iter().all(|v| v.is_finite()) {
                return dir;
            }
        }
        ridge = if ridge == 0.0 { base } else { ridge * 2.0 };
        if ridge > 1e12 {
            return DVector::zeros(d);
        }
    }
}

/// Generic guarded step: walks from `current` along `dir`, halving until the
/// objective stops decreasing; returns `current` unchanged if nothing helps.
fn accept_step<F: FnMut(&DVector<f64>) -> f64>(
    current: &DVector<f64>,
    dir: &DVector<f64>,
    mut obj: F,
    halvings: usize,
) -> DVector<f64> {
    if dir.iter().all(|&v| v == 0.0) {
        return current.clone();
    }
    let f0 = obj(current);
    let mut step = 1.0;
    for _ in 0..=halvings {
        let cand = current + dir * step;
        let f1 = obj(&cand);
        if f1 >= f0 && f1.is_finite() {
            return cand;
        }
        step *= 0.5;
    }
    current.clone()
}

pub fn update_mixing_col(
    data: &FitData,
    z: &DMatrix<f64>,
    params: &mut ModelParams,
    j: usize,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
    cfg: &FitConfig,
) {
    for _ in 0..cfg.newton_steps {
        let (grad, hess) = mixing_grad_hess(data, z, params, j, plan, maj);
        if grad.norm() < 1e-12 {
            return;
        }
        let dir = ascent_direction(&grad, &hess, cfg.ridge_base);
        let current = params.mixing().column(j).clone_owned();
        let mut scratch = params.clone();
        let next = accept_step(
            &current,
            &dir,
            |cand| {
                scratch.set_mixing_col(j, cand);
                mixing_objective(data, z, &scratch, plan, maj)
            },
            cfg.step_halving_max,
        );
        if next == current {
            return;
        }
        params.set_mixing_col(j, &next);
    }
}

pub fn update_body_col(
    data: &FitData,
    stats: &BodyStats,
    params: &mut ModelParams,
    j: usize,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
    cfg: &FitConfig,
) {
    for _ in 0..cfg.newton_steps {
        let (grad, hess) = body_grad_hess(data, stats, params, j, plan, maj);
        if grad.norm() < 1e-12 {
            return;
        }
        let dir = ascent_direction(&grad, &hess, cfg.ridge_base);
        let current = params.body().column(j).clone_owned();
        let mut scratch = params.clone();
        let next = accept_step(
            &current,
            &dir,
            |cand| {
                scratch.set_body_col(j, cand);
                body_objective(data, stats, &scratch, j, plan, maj)
            },
            cfg.step_halving_max,
        );
        if next == current {
            return;
        }
        params.set_body_col(j, &next);
    }
}

pub fn update_dispersion(data: &FitData, stats: &BodyStats, params: &mut ModelParams, j: usize) {
    let (c, w) = dispersion_profile(data, stats, params, j);
    if w <= 0.0 || !c.is_finite() {
        return;
    }
    let t = |lnphi: f64| {
        let phi = lnphi.exp();
        (c - w * lnphi) / phi - w * ln_gamma(1.0 / phi)
    };
    let (lnphi_hat, t_hat) = brent_max(&t, PHI_BOUNDS.0.ln(), PHI_BOUNDS.1.ln(), 1e-10, 200);
    if t_hat >= t(params.dispersion()[j].ln()) {
        params.set_dispersion(j, lnphi_hat.exp());
    }
}

pub fn update_tail_coef(
    data: &FitData,
    params: &mut ModelParams,
    plan: &PenaltyPlan,
    maj: &PenaltyMajorizer,
    cfg: &FitConfig,
) {
    if data.tail_idx.is_empty() {
        return;
    }
    for _ in 0..cfg.newton_steps {
        let (grad, hess) = tail_grad_hess(data, params, plan, maj);
        if grad.norm() < 1e-12 {
            return;
        }
        let dir = ascent_direction(&grad, &hess, cfg.ridge_base);
        let current = params.tail_coef().clone();
        let mut scratch = params.clone();
        let next = accept_step(
            &current,
            &dir,
            |cand| {
                scratch.set_tail_coef(cand.clone());
                tail_objective(data, &scratch, plan, maj)
            },
            cfg.step_halving_max,
        );
        if next == current {
            return;
        }
        params.set_tail_coef(next);
    }
}

pub fn update_tail_scale(data: &FitData, params: &mut ModelParams) {
    if data.tail_idx.is_empty() {
        return;
    }
    let tau = data.tau;
    // Only the theta-bearing terms of the tail objective.
    let v = |lntheta: f64| {
        let theta = lntheta.exp();
        let mut acc = 0.0;
        for &i in data.tail_idx {
            let eta = params.tail_index(data.x_tail.obs(i));
            let l = ((data.y[i] + theta) / (tau + theta)).ln();
            acc += -eta * l - (data.y[i] + theta).ln();
        }
        acc
    };
    let (lo, hi) = ((THETA_REL_BOUNDS.0 * tau).ln(), (THETA_REL_BOUNDS.1 * tau).ln());
    let (lntheta_hat, v_hat) = brent_max(&v, lo, hi, 1e-10, 200);
    if v_hat >= v(params.tail_scale().ln()) {
        params.set_tail_scale(lntheta_hat.exp());
    }
}
