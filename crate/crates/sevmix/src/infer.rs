//! Post-selection uncertainty for the reduced model: numerical Fisher
//! information, Wald-type intervals, Gaussian-simulation intervals for
//! derived quantities, and the Efron percentile parametric bootstrap.
//!
//! All intervals live in the estimation coordinates: mixing and body
//! coefficients and the tail-index coefficients as-is, dispersions and the
//! tail scale on the log scale so Gaussian draws stay in-domain. Penalty
//! bias and curvature corrections are omitted; they vanish asymptotically
//! for the adaptive and folded-concave rates this crate tunes, so the
//! reduced-model information is used directly.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dist::{sample_composite, CovRow, GammaMd, Lomax, DEGENERATE_MASS};
use crate::error::{Error, Result};
use crate::gem::{fit, FitConfig, FitData, FitReport, PartLambdas, PartPlans};
use crate::model::ModelParams;
use crate::numeric::log_sum_exp;
use crate::rng::{substream, STREAM_BOOTSTRAP, STREAM_DERIVED_CI};
use crate::schema::{CovariateSchema, DesignMatrix};

/// Draw count for Gaussian-simulation intervals on derived quantities.
pub const DERIVED_CI_DRAWS: usize = 10_000;

/// Default replicate count for the parametric bootstrap.
pub const BOOTSTRAP_REPLICATES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Wald,
    Bootstrap,
}

impl CiMethod {
    pub fn label(self) -> &'static str {
        match self {
            CiMethod::Wald => "wald",
            CiMethod::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CiRow {
    pub quantity: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
    /// Set when the information matrix had to be pseudo-inverted or too many
    /// bootstrap replicates failed; the interval is then indicative only.
    pub unreliable: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CiTable {
    pub rows: Vec<CiRow>,
}

impl CiTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,point,lower,upper,level,method,unreliable\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.quantity,
                r.point,
                r.lower,
                r.upper,
                r.level,
                r.method.label(),
                r.unreliable
            ));
        }
        out
    }
}

/// Flat free coordinates, fixed order: mixing free columns, body columns,
/// log dispersions, tail coefficients, log tail scale.
pub fn flatten(p: &ModelParams) -> DVector<f64> {
    let (d1, d2, d3) = p.dims();
    let g = p.g();
    let mut v = Vec::with_capacity(d1 * g + d2 * g + g + d3 + 1);
    for j in 0..g {
        for r in 0..d1 {
            v.push(p.mixing()[(r, j)]);
        }
    }
    for j in 0..g {
        for r in 0..d2 {
            v.push(p.body()[(r, j)]);
        }
    }
    for j in 0..g {
        v.push(p.dispersion()[j].ln());
    }
    for r in 0..d3 {
        v.push(p.tail_coef()[r]);
    }
    v.push(p.tail_scale().ln());
    DVector::from_vec(v)
}

/// Inverse of [`flatten`]; the template supplies shapes, the threshold, and
/// the pinned mixing column.
pub fn unflatten(template: &ModelParams, v: &DVector<f64>) -> Result<ModelParams> {
    let (d1, d2, d3) = template.dims();
    let g = template.g();
    debug_assert_eq!(v.len(), d1 * g + d2 * g + g + d3 + 1);
    let mut k = 0;
    let mut mixing = DMatrix::zeros(d1, g);
    for j in 0..g {
        for r in 0..d1 {
            mixing[(r, j)] = v[k];
            k += 1;
        }
    }
    let mut body = DMatrix::zeros(d2, g);
    for j in 0..g {
        for r in 0..d2 {
            body[(r, j)] = v[k];
            k += 1;
        }
    }
    let mut dispersion = DVector::zeros(g);
    for j in 0..g {
        dispersion[j] = v[k].exp();
        k += 1;
    }
    let mut tail = DVector::zeros(d3);
    for r in 0..d3 {
        tail[r] = v[k];
        k += 1;
    }
    let scale = v[k].exp();
    ModelParams::from_free(mixing, body, dispersion, tail, scale, template.tau())
}

/// Human-readable names for the flat coordinates, built from the design
/// column origins. Order matches [`flatten`].
pub fn param_labels(
    p: &ModelParams,
    schema: &CovariateSchema,
    x_mix: &DesignMatrix,
    x_body: &DesignMatrix,
    x_tail: &DesignMatrix,
) -> Vec<String> {
    let g = p.g();
    let mut out = Vec::new();
    for j in 0..g {
        for o in x_mix.origins() {
            out.push(format!("alpha{}[{}]", j + 1, o.label(schema)));
        }
    }
    for j in 0..g {
        for o in x_body.origins() {
            out.push(format!("beta{}[{}]", j + 1, o.label(schema)));
        }
    }
    for j in 0..g {
        out.push(format!("log_phi{}", j + 1));
    }
    for o in x_tail.origins() {
        out.push(format!("nu[{}]", o.label(schema)));
    }
    out.push("log_theta".to_string());
    debug_assert_eq!(out.len(), flatten(p).len());
    out
}

// Per-distinct-covariate-row terms of the observed log-density. The
// expensive pieces (softmax, truncation masses, component constants) depend
// only on the row, so repeated rows cost two multiply-adds per component.
struct RowTerms {
    // per body component: additive constant folding mixing weight, Gamma
    // normalizer, and truncation mass
    consts: Vec<f64>,
    shapes: Vec<f64>,
    inv_scales: Vec<f64>,
    tail_pi_ln: f64,
    lomax: Lomax,
}

fn row_terms(p: &ModelParams, x: CovRow) -> Result<RowTerms> {
    let g = p.g();
    let tau = p.tau();
    let pi = p.mixing_probs(x.mix);
    let mut consts = Vec::with_capacity(g);
    let mut shapes = Vec::with_capacity(g);
    let mut inv_scales = Vec::with_capacity(g);
    for j in 0..g {
        let gamma = GammaMd::new(p.body_mean(j, x.body), p.dispersion()[j])?;
        let mass = gamma.cdf(tau);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateComponent { index: j, mass });
        }
        let a = gamma.shape();
        let s = gamma.scale();
        consts.push(pi[j].ln() - a * s.ln() - statrs::function::gamma::ln_gamma(a) - mass.ln());
        shapes.push(a);
        inv_scales.push(1.0 / s);
    }
    let lomax = Lomax::new(p.tail_scale(), p.tail_index(x.tail))?;
    let tail_mass = lomax.sf(tau);
    if tail_mass < DEGENERATE_MASS {
        return Err(Error::DegenerateTruncation { mass: tail_mass, context: "lomax above tau" });
    }
    Ok(RowTerms { consts, shapes, inv_scales, tail_pi_ln: pi[g].ln(), lomax })
}

fn row_key(x: CovRow) -> Vec<u64> {
    x.mix
        .iter()
        .chain(x.body.iter())
        .chain(x.tail.iter())
        .map(|v| v.to_bits())
        .collect()
}

/// Observed-data log-likelihood of the composite mixture over the sample.
pub fn observed_loglik(data: &FitData, params: &ModelParams) -> Result<f64> {
    let ln_y: Vec<f64> = data.y.iter().map(|v| v.ln()).collect();
    observed_loglik_cached(data, params, &ln_y)
}

fn observed_loglik_cached(data: &FitData, params: &ModelParams, ln_y: &[f64]) -> Result<f64> {
    let g = params.g();
    let tau = params.tau();
    let mut cache: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut store: Vec<RowTerms> = Vec::new();
    // Distinct (covariate row, response) pairs with multiplicities, kept in
    // first-occurrence order. Summing count * term makes a duplicated sample
    // evaluate to exactly twice the single sample, so numerical Hessians
    // scale exactly with n.
    let mut group_pos: HashMap<(usize, u64), usize> = HashMap::new();
    let mut groups: Vec<(usize, usize, bool, usize)> = Vec::new();
    for (rows, is_tail) in [(data.body_idx, false), (data.tail_idx, true)] {
        for &i in rows {
            let x = CovRow {
                mix: data.x_mix.obs(i),
                body: data.x_body.obs(i),
                tail: data.x_tail.obs(i),
            };
            let tid = match cache.entry(row_key(x)) {
                std::collections::hash_map::Entry::Occupied(e) => *e.get(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    let id = store.len();
                    store.push(row_terms(params, x)?);
                    e.insert(id);
                    id
                }
            };
            match group_pos.entry((tid, data.y[i].to_bits())) {
                std::collections::hash_map::Entry::Occupied(e) => groups[*e.get()].1 += 1,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(groups.len());
                    groups.push((tid, 1, is_tail, i));
                }
            }
        }
    }
    let mut terms = vec![0.0; g];
    let mut total = 0.0;
    for &(tid, count, is_tail, i) in &groups {
        let rt = &store[tid];
        let t = if is_tail {
            rt.tail_pi_ln + rt.lomax.trunc_logpdf(data.y[i], tau)?
        } else {
            for j in 0..g {
                terms[j] =
                    rt.consts[j] + (rt.shapes[j] - 1.0) * ln_y[i] - data.y[i] * rt.inv_scales[j];
            }
            log_sum_exp(&terms)
        };
        total += count as f64 * t;
    }
    Ok(total)
}

/// Sample Fisher information of the reduced model.
#[derive(Clone, Debug)]
pub struct FisherInfo {
    /// -(1/n) times the numerical Hessian, symmetrized by (H + H')/2.
    pub matrix: DMatrix<f64>,
    /// max |H - H'| / max |H| before symmetrization. The four-point central
    /// cross difference is symmetric by construction, so this stays at zero
    /// unless the differencing scheme changes.
    pub asymmetry: f64,
    pub n: usize,
}

/// Numerical Fisher information at the fitted reduced parameters: central
/// second differences of the observed log-likelihood in the flat
/// coordinates, per-coordinate step max(1e-5, 1e-5 |theta_q|).
pub fn fisher_info_reduced(data: &FitData, params: &ModelParams) -> Result<FisherInfo> {
    data.validate(params)?;
    let theta0 = flatten(params);
    let p = theta0.len();
    let n = data.n();
    let ln_y: Vec<f64> = data.y.iter().map(|v| v.ln()).collect();
    let eval = |v: &DVector<f64>| -> Result<f64> {
        let m = unflatten(params, v)?;
        observed_loglik_cached(data, &m, &ln_y)
    };
    let step = |q: usize| (1e-5_f64).max(1e-5 * theta0[q].abs());
    let f0 = eval(&theta0)?;
    let mut h = DMatrix::zeros(p, p);
    for q in 0..p {
        let hq = step(q);
        let mut vp = theta0.clone();
        vp[q] += hq;
        let mut vm = theta0.clone();
        vm[q] -= hq;
        h[(q, q)] = (eval(&vp)? - 2.0 * f0 + eval(&vm)?) / (hq * hq);
    }
    for q in 0..p {
        for r in (q + 1)..p {
            let (hq, hr) = (step(q), step(r));
            let mut v = theta0.clone();
            v[q] += hq;
            v[r] += hr;
            let fpp = eval(&v)?;
            v[r] -= 2.0 * hr;
            let fpm = eval(&v)?;
            v[q] -= 2.0 * hq;
            let fmm = eval(&v)?;
            v[r] += 2.0 * hr;
            let fmp = eval(&v)?;
            let d = (fpp - fpm - fmp + fmm) / (4.0 * hq * hr);
            h[(q, r)] = d;
            h[(r, q)] = d;
        }
    }
    let max_abs = h.amax();
    let asym = (&h - h.transpose()).amax() / if max_abs > 0.0 { max_abs } else { 1.0 };
    let sym = (&h + h.transpose()) * 0.5;
    Ok(FisherInfo { matrix: sym * (-1.0 / n as f64), asymmetry: asym, n })
}

/// Gaussian approximation to the sampling distribution of the flat
/// coordinates: mean at the fit, covariance info^{-1}/n.
pub struct GaussianApprox {
    pub covariance: DMatrix<f64>,
    /// Information was not positive definite; a pseudo-inverse was used.
    pub singular: bool,
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianApprox {
    pub fn new(params: &ModelParams, info: &FisherInfo) -> Result<GaussianApprox> {
        let p = info.matrix.nrows();
        let inv = match info.matrix.clone().cholesky() {
            Some(chol) => Some(chol.inverse()),
            None => None,
        };
        let (inv, singular) = match inv {
            Some(m) => (m, false),
            None => {
                log::warn!(
                    "information matrix is not positive definite; falling back to a pseudo-inverse"
                );
                let svd = info.matrix.clone().svd(true, true);
                let tol = 1e-12 * svd.singular_values.amax().max(1.0);
                let pinv = svd
                    .pseudo_inverse(tol)
                    .map_err(|e| Error::Fit(format!("pseudo-inverse failed: {e}")))?;
                (pinv, true)
            }
        };
        let covariance = inv / info.n as f64;
        // Symmetric square root via the eigendecomposition; tiny negative
        // eigenvalues from roundoff are clamped to zero.
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let mut factor = eig.eigenvectors.clone();
        for c in 0..p {
            let ev = eig.eigenvalues[c].max(0.0).sqrt();
            for r in 0..p {
                factor[(r, c)] *= ev;
            }
        }
        Ok(GaussianApprox { covariance, singular, mean: flatten(params), factor })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let p = self.mean.len();
        let z = DVector::from_fn(p, |_, _| {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            u
        });
        &self.mean + &self.factor * z
    }
}

/// Two-sided Wald intervals for every flat coordinate:
/// point +- z_{1-kappa/2} sqrt([info^{-1}]_{qq} / n).
pub fn wald_ci(
    params: &ModelParams,
    labels: &[String],
    info: &FisherInfo,
    level: f64,
) -> Result<CiTable> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("confidence level must be in (0,1), got {level}")));
    }
    let approx = GaussianApprox::new(params, info)?;
    let point = flatten(params);
    if labels.len() != point.len() {
        return Err(Error::domain(format!(
            "{} labels for {} coordinates",
            labels.len(),
            point.len()
        )));
    }
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0);
    let mut rows = Vec::with_capacity(point.len());
    for q in 0..point.len() {
        let hw = z * approx.covariance[(q, q)].max(0.0).sqrt();
        rows.push(CiRow {
            quantity: labels[q].clone(),
            point: point[q],
            lower: point[q] - hw,
            upper: point[q] + hw,
            level,
            method: CiMethod::Wald,
            unreliable: approx.singular,
        });
    }
    Ok(CiTable { rows })
}

/// A scalar summary of the model whose interval is wanted alongside the raw
/// coordinates (tail probabilities, mean severities, natural-scale
/// dispersions, ...).
pub struct DerivedQuantity<'a> {
    pub label: String,
    pub eval: Box<dyn Fn(&ModelParams) -> Result<f64> + 'a>,
}

impl<'a> DerivedQuantity<'a> {
    pub fn new<F>(label: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&ModelParams) -> Result<f64> + 'a,
    {
        DerivedQuantity { label: label.into(), eval: Box::new(eval) }
    }
}

/// Intervals for derived quantities by simulating coordinates from the
/// Gaussian approximation and taking empirical quantiles of the mapped
/// draws. Draws that leave the parameter domain or fail to evaluate are
/// skipped per quantity.
pub fn derived_cis(
    params: &ModelParams,
    info: &FisherInfo,
    quantities: &[DerivedQuantity],
    draws: usize,
    level: f64,
    seed: u64,
) -> Result<CiTable> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::domain(format!("confidence level must be in [0,1), got {level}")));
    }
    if draws < 2 {
        return Err(Error::domain("at least two Gaussian draws are required"));
    }
    let approx = GaussianApprox::new(params, info)?;
    let mut rng = substream(seed, STREAM_DERIVED_CI);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); quantities.len()];
    for _ in 0..draws {
        let v = approx.draw(&mut rng);
        let m = match unflatten(params, &v) {
            Ok(m) => m,
            Err(_) => continue,
        };
        for (k, q) in quantities.iter().enumerate() {
            if let Ok(val) = (q.eval)(&m) {
                if val.is_finite() {
                    samples[k].push(val);
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(quantities.len());
    for (k, q) in quantities.iter().enumerate() {
        if samples[k].len() < draws / 2 {
            return Err(Error::Fit(format!(
                "most Gaussian draws failed to evaluate {}",
                q.label
            )));
        }
        samples[k].sort_by(|a, b| a.partial_cmp(b).unwrap());
        let point = (q.eval)(params)?;
        rows.push(CiRow {
            quantity: q.label.clone(),
            point,
            lower: percentile(&samples[k], (1.0 - level) / 2.0),
            upper: percentile(&samples[k], (1.0 + level) / 2.0),
            level,
            method: CiMethod::Wald,
            unreliable: approx.singular,
        });
    }
    Ok(CiTable { rows })
}

// Linear interpolation between order statistics; q in [0,1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: BOOTSTRAP_REPLICATES,
            level: 0.95,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub table: CiTable,
    pub attempted: usize,
    pub failures: usize,
    /// More than a fifth of the replicates failed to refit.
    pub unreliable: bool,
}

/// Efron percentile parametric bootstrap. Responses are simulated from the
/// fitted reduced model with the design held fixed, each replicate is refit
/// without penalties warm-started at the fit, and intervals are empirical
/// quantiles over the replicate estimates. Failed replicates are excluded
/// and counted.
pub fn bootstrap_ci(
    data: &FitData,
    params: &ModelParams,
    labels: &[String],
    quantities: &[DerivedQuantity],
    cfg: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    data.validate(params)?;
    let point = flatten(params);
    if labels.len() != point.len() {
        return Err(Error::domain(format!(
            "{} labels for {} coordinates",
            labels.len(),
            point.len()
        )));
    }
    if cfg.replicates < 2 {
        return Err(Error::domain("at least two bootstrap replicates are required"));
    }
    if !(0.0..1.0).contains(&cfg.level) {
        return Err(Error::domain(format!(
            "confidence level must be in [0,1), got {}",
            cfg.level
        )));
    }
    let n = data.n();
    let (d1, d2, d3) = params.dims();
    let plans = PartPlans::unpenalized(d1, d2, d3);
    let mut coord_draws: Vec<Vec<f64>> = vec![Vec::new(); point.len()];
    let mut derived_draws: Vec<Vec<f64>> = vec![Vec::new(); quantities.len()];
    let mut failures = 0usize;
    for b in 0..cfg.replicates {
        match bootstrap_replicate(data, params, &plans, cfg, b as u64, n) {
            Ok(report) => {
                let v = flatten(&report.params);
                for q in 0..v.len() {
                    coord_draws[q].push(v[q]);
                }
                let mut ok = true;
                let mut vals = Vec::with_capacity(quantities.len());
                for q in quantities {
                    match (q.eval)(&report.params) {
                        Ok(val) if val.is_finite() => vals.push(val),
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    for (k, val) in vals.into_iter().enumerate() {
                        derived_draws[k].push(val);
                    }
                }
            }
            Err(err) => {
                log::warn!("bootstrap replicate {b} failed: {err}");
                failures += 1;
            }
        }
    }
    if failures == cfg.replicates {
        return Err(Error::Fit("every bootstrap replicate failed".to_string()));
    }
    let unreliable = (failures as f64) > 0.2 * cfg.replicates as f64;
    let mut rows = Vec::with_capacity(point.len() + quantities.len());
    for q in 0..point.len() {
        coord_draws[q].sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(CiRow {
            quantity: labels[q].clone(),
            point: point[q],
            lower: percentile(&coord_draws[q], (1.0 - cfg.level) / 2.0),
            upper: percentile(&coord_draws[q], (1.0 + cfg.level) / 2.0),
            level: cfg.level,
            method: CiMethod::Bootstrap,
            unreliable,
        });
    }
    for (k, q) in quantities.iter().enumerate() {
        if derived_draws[k].len() < 2 {
            return Err(Error::Fit(format!(
                "derived quantity {} failed on nearly every replicate",
                q.label
            )));
        }
        derived_draws[k].sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(CiRow {
            quantity: q.label.clone(),
            point: (q.eval)(params)?,
            lower: percentile(&derived_draws[k], (1.0 - cfg.level) / 2.0),
            upper: percentile(&derived_draws[k], (1.0 + cfg.level) / 2.0),
            level: cfg.level,
            method: CiMethod::Bootstrap,
            unreliable,
        });
    }
    Ok(BootstrapOutcome {
        table: CiTable { rows },
        attempted: cfg.replicates,
        failures,
        unreliable,
    })
}

fn bootstrap_replicate(
    data: &FitData,
    params: &ModelParams,
    plans: &PartPlans,
    cfg: &BootstrapConfig,
    replicate: u64,
    n: usize,
) -> Result<FitReport> {
    // Each replicate gets its own generator stream so results do not depend
    // on evaluation order.
    let mut rng = substream(cfg.seed, STREAM_BOOTSTRAP | replicate);
    let mut y = vec![0.0; n];
    let mut body_idx = Vec::with_capacity(data.body_idx.len());
    let mut tail_idx = Vec::with_capacity(data.tail_idx.len());
    for i in 0..n {
        let x = CovRow { mix: data.x_mix.obs(i), body: data.x_body.obs(i), tail: data.x_tail.obs(i) };
        y[i] = sample_composite(params, x, &mut rng)?;
        if y[i] <= data.tau {
            body_idx.push(i);
        } else {
            tail_idx.push(i);
        }
    }
    let boot = FitData {
        y: &y,
        tau: data.tau,
        x_mix: data.x_mix,
        x_body: data.x_body,
        x_tail: data.x_tail,
        body_idx: &body_idx,
        tail_idx: &tail_idx,
    };
    let report = fit(&boot, params.clone(), plans, PartLambdas::zero(), &cfg.fit)?;
    if report.aborted.is_some() || !report.loglik.is_finite() {
        return Err(Error::Fit("bootstrap refit aborted".to_string()));
    }
    Ok(report)
}
