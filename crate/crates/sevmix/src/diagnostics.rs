//! Plot-data tables for judging a fitted model against the sample:
//! empirical vs fitted density, quantile-quantile points, log-log survival,
//! and the empirical mean-excess curve. Everything is emitted as plain
//! columns so any external plotting tool can draw the figures.
//!
//! Fitted curves pool the per-observation composite distribution over the
//! design: f_pool(y) = mean_i f(y; x_i), and likewise for the CDF. The pool
//! is built over distinct covariate rows with multiplicity weights, after a
//! deterministic stride subsample caps the cost on large designs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dist::{composite_cdf, composite_pdf, CovRow};
use crate::error::{Error, Result};
use crate::gem::choose::silverman_bandwidth;
use crate::gem::FitData;
use crate::model::ModelParams;

/// Covariate rows retained in the pooled mixture.
pub const MAX_POOL_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DensityPoint {
    pub y: f64,
    pub empirical: f64,
    pub fitted: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QqPoint {
    pub p: f64,
    pub empirical: f64,
    pub model: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub ln_y: f64,
    pub empirical_ln_sf: f64,
    pub fitted_ln_sf: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeanExcessPoint {
    pub threshold: f64,
    pub mean_excess: f64,
    pub exceedances: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub density: Vec<DensityPoint>,
    pub qq: Vec<QqPoint>,
    pub survival: Vec<SurvivalPoint>,
    pub mean_excess: Vec<MeanExcessPoint>,
}

impl DiagnosticReport {
    pub fn density_csv(&self) -> String {
        let mut out = String::from("y,empirical_density,fitted_density\n");
        for r in &self.density {
            out.push_str(&format!("{},{},{}\n", r.y, r.empirical, r.fitted));
        }
        out
    }

    pub fn qq_csv(&self) -> String {
        let mut out = String::from("p,empirical_quantile,model_quantile\n");
        for r in &self.qq {
            out.push_str(&format!("{},{},{}\n", r.p, r.empirical, r.model));
        }
        out
    }

    pub fn survival_csv(&self) -> String {
        let mut out = String::from("ln_y,empirical_ln_sf,fitted_ln_sf\n");
        for r in &self.survival {
            out.push_str(&format!("{},{},{}\n", r.ln_y, r.empirical_ln_sf, r.fitted_ln_sf));
        }
        out
    }

    pub fn mean_excess_csv(&self) -> String {
        let mut out = String::from("threshold,mean_excess,exceedances\n");
        for r in &self.mean_excess {
            out.push_str(&format!("{},{},{}\n", r.threshold, r.mean_excess, r.exceedances));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub density_grid: usize,
    pub qq_levels: usize,
    pub survival_levels: usize,
    pub mean_excess_thresholds: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            density_grid: 200,
            qq_levels: 256,
            survival_levels: 512,
            mean_excess_thresholds: 100,
        }
    }
}

// Distinct covariate rows with multiplicity weights, in first-occurrence
// order so reruns produce identical output.
struct PooledMixture<'a> {
    params: &'a ModelParams,
    rows: Vec<(CovRow<'a>, f64)>,
}

impl<'a> PooledMixture<'a> {
    fn build(data: &'a FitData, params: &'a ModelParams) -> Self {
        let n = data.n();
        let stride = n.div_ceil(MAX_POOL_ROWS);
        let mut order: Vec<(CovRow<'a>, usize)> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut total = 0usize;
        for i in (0..n).step_by(stride) {
            let row = CovRow {
                mix: data.x_mix.obs(i),
                body: data.x_body.obs(i),
                tail: data.x_tail.obs(i),
            };
            let key: Vec<u64> = row
                .mix
                .iter()
                .chain(row.body)
                .chain(row.tail)
                .map(|v| v.to_bits())
                .collect();
            match seen.get(&key) {
                Some(&pos) => order[pos].1 += 1,
                None => {
                    seen.insert(key, order.len());
                    order.push((row, 1));
                }
            }
            total += 1;
        }
        let rows = order
            .into_iter()
            .map(|(row, c)| (row, c as f64 / total as f64))
            .collect();
        PooledMixture { params, rows }
    }

    fn pdf(&self, y: f64) -> Result<f64> {
        let mut acc = 0.0;
        for &(row, w) in &self.rows {
            acc += w * composite_pdf(self.params, row, y)?;
        }
        Ok(acc)
    }

    fn cdf(&self, y: f64) -> Result<f64> {
        let mut acc = 0.0;
        for &(row, w) in &self.rows {
            acc += w * composite_cdf(self.params, row, y)?;
        }
        Ok(acc)
    }

    // Monotone bisection for the pooled quantile; the upper bracket doubles
    // until it covers p, which a heavy tail always eventually does.
    fn quantile(&self, p: f64, y_max: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain("quantile level must lie in [0, 1)"));
        }
        let mut lo = 0.0;
        let mut hi = y_max.max(1.0);
        for _ in 0..1100 {
            if self.cdf(hi)? >= p {
                break;
            }
            hi *= 2.0;
        }
        for _ in 0..200 {
            if hi - lo <= 1e-10 * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid)? < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let h = p * (s.len() - 1) as f64;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 < s.len() {
        s[i] + frac * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

/// Gaussian kernel density with Silverman's bandwidth, evaluated on `grid`.
pub fn kernel_density(y: &[f64], grid: &[f64]) -> Vec<f64> {
    let h = silverman_bandwidth(y).max(1e-12);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * y.len() as f64);
    grid.iter()
        .map(|&g| {
            let mut acc = 0.0;
            for &yi in y {
                let z = (g - yi) / h;
                acc += (-0.5 * z * z).exp();
            }
            acc * norm
        })
        .collect()
}

/// Empirical mean-excess curve e(u) = mean(y - u | y > u) on threshold
/// levels spread over the lower 98% of the sample; thresholds keeping fewer
/// than five exceedances are dropped.
pub fn mean_excess_curve(y: &[f64], thresholds: usize) -> Vec<MeanExcessPoint> {
    if y.is_empty() || thresholds == 0 {
        return Vec::new();
    }
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for k in 0..thresholds {
        let p = 0.98 * k as f64 / thresholds.max(2).saturating_sub(1) as f64;
        let u = quantile_sorted(&s, p);
        if u <= last {
            continue;
        }
        last = u;
        // first index strictly above u; s is sorted
        let start = s.partition_point(|&v| v <= u);
        let m = s.len() - start;
        if m < 5 {
            break;
        }
        let excess = s[start..].iter().map(|v| v - u).sum::<f64>() / m as f64;
        out.push(MeanExcessPoint { threshold: u, mean_excess: excess, exceedances: m });
    }
    out
}

/// Kolmogorov-Smirnov statistic between a sample and a continuous CDF:
/// the larger of the two one-sided sup gaps at every order statistic.
pub fn ks_statistic(y: &[f64], mut cdf: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::data("empty sample"));
    }
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &yi) in s.iter().enumerate() {
        let f = cdf(yi)?;
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Builds all four plot-data tables for a fitted model.
pub fn diagnostics(
    data: &FitData,
    params: &ModelParams,
    cfg: &DiagnosticsConfig,
) -> Result<DiagnosticReport> {
    data.validate(params)?;
    let pool = PooledMixture::build(data, params);
    let mut sorted = data.y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let y_max = sorted[n - 1];

    // density over the body of the sample; the far tail squashes the plot
    let lo = sorted[0];
    let hi = quantile_sorted(&sorted, 0.995);
    let m = cfg.density_grid.max(2);
    let grid: Vec<f64> =
        (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect();
    let empirical = kernel_density(&sorted, &grid);
    let mut density = Vec::with_capacity(m);
    for (k, &g) in grid.iter().enumerate() {
        density.push(DensityPoint { y: g, empirical: empirical[k], fitted: pool.pdf(g)? });
    }

    let levels = cfg.qq_levels.clamp(1, 512).min(n);
    let mut qq = Vec::with_capacity(levels);
    for k in 0..levels {
        let p = (k as f64 + 0.5) / levels as f64;
        qq.push(QqPoint {
            p,
            empirical: quantile_sorted(&sorted, p),
            model: pool.quantile(p, y_max)?,
        });
    }

    // survival ranks log-spaced from the whole sample down to the maximum,
    // so the tail of the plot is as dense as the body on the ln sf axis
    let levels = cfg.survival_levels.clamp(1, n);
    let mut survival = Vec::with_capacity(levels);
    let mut last_rank = usize::MAX;
    for k in 0..levels {
        let frac = k as f64 / levels.max(2).saturating_sub(1) as f64;
        let above = (n as f64).powf(1.0 - frac).round().max(1.0) as usize;
        if above == last_rank {
            continue;
        }
        last_rank = above;
        let yi = sorted[n - above];
        let sf = (above as f64 - 0.5) / n as f64;
        let fitted = (1.0 - pool.cdf(yi)?).max(1e-300);
        survival.push(SurvivalPoint {
            ln_y: yi.ln(),
            empirical_ln_sf: sf.ln(),
            fitted_ln_sf: fitted.ln(),
        });
    }
    survival.reverse();

    let mean_excess = mean_excess_curve(&sorted, cfg.mean_excess_thresholds);
    Ok(DiagnosticReport { density, qq, survival, mean_excess })
}
