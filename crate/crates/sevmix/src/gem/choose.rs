//! Component-count selection: the smallest g whose fitted density reproduces
//! every empirical density node (kernel-density local maximum) located above
//! a threshold, with AIC/BIC per candidate reported for manual override.

use serde::{Deserialize, Serialize};

use crate::dist::{composite_pdf, CovRow};
use crate::error::Result;
use crate::gem::{fit, init_params, FitConfig, FitData, PartLambdas, PartPlans};
use crate::schema::{Dataset, DesignMatrix};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChooseCandidate {
    pub g: usize,
    pub loglik: f64,
    /// Free parameters of the intercept-only spliced mixture: 3g + 2.
    pub df: usize,
    pub aic: f64,
    pub bic: f64,
    /// Fitted-density local maxima (original scale).
    pub fitted_nodes: Vec<f64>,
    pub nodes_matched: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChooseReport {
    pub candidates: Vec<ChooseCandidate>,
    /// Empirical nodes above the threshold that had to be reproduced.
    pub target_nodes: Vec<f64>,
    pub chosen: usize,
    /// False when no candidate matched and the largest was returned.
    pub matched: bool,
}

/// Fits each candidate g on intercept-only designs (the node structure of
/// the marginal density is what the count must explain) and returns the
/// smallest g whose fitted density has a local maximum within +-15% of every
/// empirical node above `node_threshold`.
pub fn choose_component_count(
    ds: &Dataset,
    candidates: &[usize],
    node_threshold: f64,
    cfg: &FitConfig,
) -> Result<ChooseReport> {
    assert!(
        candidates.windows(2).all(|w| w[0] < w[1]),
        "candidate list must be ascending"
    );
    let n = ds.n();
    let design = DesignMatrix::intercept_only(n);
    let marginal = Dataset::new(ds.y().clone(), design, ds.tau())?;
    let data = FitData::from_dataset(&marginal);

    // Only body-side nodes are the component count's job to explain; the
    // spliced tail is monotone by construction.
    let target_nodes: Vec<f64> = kde_log_modes(ds.y().as_slice())
        .into_iter()
        .filter(|&loc| loc > node_threshold && loc <= ds.tau())
        .collect();

    let mut report = ChooseReport {
        candidates: Vec::new(),
        target_nodes: target_nodes.clone(),
        chosen: *candidates.last().expect("at least one candidate"),
        matched: false,
    };
    let plans = PartPlans::unpenalized(1, 1, 1);
    for &g in candidates {
        let init = init_params(&data, g, cfg.seed)?;
        let fitres = fit(&data, init, &plans, PartLambdas::zero(), cfg)?;
        let fitted_nodes = fitted_log_modes(&fitres.params, ds.y().as_slice());
        let nodes_matched = target_nodes.iter().all(|&t| {
            fitted_nodes.iter().any(|&f| (f - t).abs() <= 0.15 * t)
        });
        let df = 3 * g + 2;
        report.candidates.push(ChooseCandidate {
            g,
            loglik: fitres.loglik,
            df,
            aic: -2.0 * fitres.loglik + 2.0 * df as f64,
            bic: -2.0 * fitres.loglik + (n as f64).ln() * df as f64,
            fitted_nodes,
            nodes_matched,
        });
        if nodes_matched && !report.matched {
            report.chosen = g;
            report.matched = true;
        }
    }
    Ok(report)
}

/// Gaussian kernel density of ln y on a regular grid with Silverman's
/// bandwidth; returns the locations (original scale) of strict local maxima.
pub(crate) fn kde_log_modes(y: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let h = silverman_bandwidth(&logs);
    if h <= 0.0 {
        return Vec::new();
    }
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let grid = 512;
    let dens: Vec<f64> = (0..grid)
        .map(|k| {
            let t = lo + (hi - lo) * k as f64 / (grid - 1) as f64;
            logs.iter()
                .map(|&x| (-0.5 * ((t - x) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    local_maxima(&dens)
        .into_iter()
        .map(|k| (lo + (hi - lo) * k as f64 / (grid - 1) as f64).exp())
        .collect()
}

/// Local maxima of the fitted density of ln Y (the composite density with
/// the log-scale Jacobian) after smoothing with the same kernel the KDE
/// uses, so both sides of the node comparison see the same blur.
fn fitted_log_modes(params: &crate::model::ModelParams, y: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let h = silverman_bandwidth(&logs).max(1e-3);
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let grid = 512;
    let step = (hi - lo) / (grid - 1) as f64;
    let xrow = [1.0];
    let raw: Vec<f64> = (0..grid)
        .map(|k| {
            let t = lo + step * k as f64;
            let yy = t.exp();
            match composite_pdf(params, CovRow::shared(&xrow), yy) {
                Ok(f) => f * yy,
                Err(_) => 0.0,
            }
        })
        .collect();
    // Discrete Gaussian convolution, kernel truncated at 4 bandwidths.
    let radius = ((4.0 * h / step).ceil() as usize).min(grid - 1);
    let kernel: Vec<f64> = (0..=radius)
        .map(|r| (-0.5 * (r as f64 * step / h).powi(2)).exp())
        .collect();
    let dens: Vec<f64> = (0..grid)
        .map(|k| {
            let mut acc = raw[k] * kernel[0];
            for r in 1..=radius {
                if k >= r {
                    acc += raw[k - r] * kernel[r];
                }
                if k + r < grid {
                    acc += raw[k + r] * kernel[r];
                }
            }
            acc
        })
        .collect();
    local_maxima(&dens)
        .into_iter()
        .map(|k| (lo + step * k as f64).exp())
        .collect()
}

pub(crate) fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((p * (n - 1) as f64).round() as usize).min(n - 1)];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    1.06 * spread * (n as f64).powf(-0.2)
}

fn local_maxima(dens: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    for k in 1..dens.len() - 1 {
        if dens[k] > dens[k - 1] && dens[k] >= dens[k + 1] && dens[k] > 0.0 {
            out.push(k);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{sample_composite, CovRow};
    use crate::gem::EStepMode;
    use crate::model::ModelParams;
    use crate::rng::{substream, STREAM_SIMULATE};
    use nalgebra::{DMatrix, DVector};

    fn simulate_marginal(truth: &ModelParams, n: usize, seed: u64) -> Dataset {
        let mut rng = substream(seed, STREAM_SIMULATE);
        let xrow = [1.0];
        let y = DVector::from_fn(n, |_, _| {
            sample_composite(truth, CovRow::shared(&xrow), &mut rng).unwrap()
        });
        Dataset::new(y, DesignMatrix::intercept_only(n), truth.tau()).unwrap()
    }

    fn quick_cfg() -> FitConfig {
        FitConfig {
            estep: EStepMode::Quadrature { tol: 1e-8 },
            max_iters: 120,
            tol: 1e-4,
            ..FitConfig::default()
        }
    }

    #[test]
    fn unimodal_body_selects_one_component() {
        let truth = ModelParams::from_free(
            DMatrix::from_column_slice(1, 1, &[1.6]),
            DMatrix::from_column_slice(1, 1, &[0.7]),
            DVector::from_element(1, 0.3),
            DVector::from_element(1, 0.7),
            3.0,
            8.0,
        )
        .unwrap();
        let ds = simulate_marginal(&truth, 1500, 41);
        let report = choose_component_count(&ds, &[1, 2], 0.0, &quick_cfg()).unwrap();
        assert!(report.matched);
        assert_eq!(report.chosen, 1);
    }

    #[test]
    fn separated_trimodal_body_needs_three_components() {
        let truth = ModelParams::from_free(
            DMatrix::from_column_slice(1, 3, &[1.0, 1.0, 1.0]),
            DMatrix::from_column_slice(1, 3, &[0.0, 2.3, 4.3]),
            DVector::from_vec(vec![0.05, 0.05, 0.05]),
            DVector::from_element(1, 0.8),
            40.0,
            200.0,
        )
        .unwrap();
        let ds = simulate_marginal(&truth, 3000, 42);
        let report = choose_component_count(&ds, &[1, 2, 3], 0.0, &quick_cfg()).unwrap();
        assert!(report.matched, "no candidate matched: {report:?}");
        assert_eq!(report.chosen, 3);
        // Smaller counts must have failed the node match.
        assert!(!report.candidates[0].nodes_matched);
    }

    #[test]
    fn information_criteria_follow_bookkeeping() {
        let truth = ModelParams::from_free(
            DMatrix::from_column_slice(1, 1, &[1.2]),
            DMatrix::from_column_slice(1, 1, &[0.5]),
            DVector::from_element(1, 0.4),
            DVector::from_element(1, 0.7),
            2.0,
            6.0,
        )
        .unwrap();
        let ds = simulate_marginal(&truth, 600, 43);
        let report = choose_component_count(&ds, &[1, 2], 0.0, &quick_cfg()).unwrap();
        for cand in &report.candidates {
            assert_eq!(cand.df, 3 * cand.g + 2);
            approx::assert_relative_eq!(
                cand.aic,
                -2.0 * cand.loglik + 2.0 * cand.df as f64,
                epsilon = 1e-9
            );
            approx::assert_relative_eq!(
                cand.bic,
                -2.0 * cand.loglik + (600f64).ln() * cand.df as f64,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn node_threshold_filters_low_modes() {
        // Two clear log-scale modes near 1 and 60; a threshold of 10 keeps
        // only the upper one.
        let mut y = Vec::new();
        let mut rng = substream(44, STREAM_SIMULATE);
        use rand::Rng;
        for _ in 0..400 {
            y.push(1.0 + 0.2 * rng.gen::<f64>());
        }
        for _ in 0..400 {
            y.push(60.0 + 12.0 * rng.gen::<f64>());
        }
        let all = kde_log_modes(&y);
        let high: Vec<f64> = all.into_iter().filter(|&m| m > 10.0).collect();
        assert_eq!(high.len(), 1);
        assert!((high[0] - 66.0).abs() < 12.0, "upper mode at {}", high[0]);
    }
}
