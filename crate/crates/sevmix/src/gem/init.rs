//! Starting values: log-scale k-means over the body, moment matching per
//! cluster, profile likelihood for the tail, and share-based mixing
//! intercepts. Crude by design; the fitter does the real work.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gem::FitData;
use crate::model::ModelParams;
use crate::numeric::brent_max;
use crate::rng::{substream, STREAM_INIT};

/// Builds starting parameters for a g-component fit. Coefficient vectors get
/// data-driven intercepts and zero slopes.
pub fn init_params(data: &FitData, g: usize, seed: u64) -> Result<ModelParams> {
    if g == 0 {
        return Err(Error::data("component count must be at least 1"));
    }
    if data.body_idx.len() < g {
        return Err(Error::data(format!(
            "{} body observations cannot support {} components",
            data.body_idx.len(),
            g
        )));
    }
    let (d_mix, d_body, d_tail) = (data.x_mix.dim(), data.x_body.dim(), data.x_tail.dim());
    let body_y: Vec<f64> = data.body_idx.iter().map(|&i| data.y[i]).collect();
    let clusters = kmeans_1d(&body_y.iter().map(|y| y.ln()).collect::<Vec<_>>(), g, seed);

    // Per-cluster moment matching on the original scale.
    let mut stats: Vec<(f64, f64, usize)> = Vec::with_capacity(g); // (mean, phi, count)
    for members in &clusters {
        let ys: Vec<f64> = members.iter().map(|&i| body_y[i]).collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let phi = if ys.len() >= 2 {
            let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
            (v / (m * m)).clamp(1e-3, 10.0)
        } else {
            0.5
        };
        stats.push((m, phi, members.len()));
    }
    stats.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = data.n() as f64;
    let tail_share = (data.tail_idx.len() as f64 / n).max(0.5 / n);
    let mut mixing_free = DMatrix::zeros(d_mix, g);
    let mut body = DMatrix::zeros(d_body, g);
    let mut dispersion = DVector::zeros(g);
    for (j, &(m, phi, count)) in stats.iter().enumerate() {
        let share = (count as f64 / n).max(0.5 / n);
        mixing_free[(0, j)] = (share / tail_share).ln();
        body[(0, j)] = m.ln();
        dispersion[j] = phi;
    }

    let (nu0, theta) = tail_profile_start(data);
    let mut tail_coef = DVector::zeros(d_tail);
    tail_coef[0] = nu0;

    ModelParams::from_free(mixing_free, body, dispersion, tail_coef, theta, data.tau)
}

/// Intercept-only truncated-Lomax start: profile likelihood over the scale,
/// with the index closed-form at each scale. Falls back to (ln 2, tau) when
/// there are no exceedances.
fn tail_profile_start(data: &FitData) -> (f64, f64) {
    let tau = data.tau;
    let nt = data.tail_idx.len();
    if nt == 0 {
        log::warn!("no exceedances; tail component starts at default index 2");
        return (2f64.ln(), tau);
    }
    let profile = |lntheta: f64| {
        let theta = lntheta.exp();
        let mut lsum = 0.0;
        let mut log_yt = 0.0;
        for &i in data.tail_idx {
            lsum += ((data.y[i] + theta) / (tau + theta)).ln();
            log_yt += (data.y[i] + theta).ln();
        }
        if lsum <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let eta = nt as f64 / lsum;
        nt as f64 * eta.ln() - nt as f64 - log_yt
    };
    let (lntheta, _) = brent_max(&profile, (1e-3 * tau).ln(), (1e3 * tau).ln(), 1e-8, 200);
    let theta = lntheta.exp();
    let lsum: f64 = data
        .tail_idx
        .iter()
        .map(|&i| ((data.y[i] + theta) / (tau + theta)).ln())
        .sum();
    ((nt as f64 / lsum).ln(), theta)
}

/// Plain Lloyd iterations over scalars with several seeded restarts; returns
/// per-cluster member indices (into the input slice). Clusters that end up
/// with fewer than two members trigger an equal-count fallback partition for
/// that restart.
fn kmeans_1d(xs: &[f64], g: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = xs.len();
    if g == 1 {
        return vec![(0..n).collect()];
    }
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let quantile_center = |j: usize| {
        let idx = (((j as f64 + 0.5) / g as f64) * n as f64) as usize;
        xs[sorted[idx.min(n - 1)]]
    };

    let mut rng = substream(seed, STREAM_INIT);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for restart in 0..10 {
        let mut centers: Vec<f64> = if restart == 0 {
            (0..g).map(quantile_center).collect()
        } else {
            (0..g).map(|_| xs[rng.gen_range(0..n)]).collect()
        };
        centers.sort_by(f64::total_cmp);
        let mut assign = vec![0usize; n];
        for _ in 0..60 {
            let mut changed = false;
            for i in 0..n {
                let mut bj = 0;
                let mut bd = f64::INFINITY;
                for (j, &c) in centers.iter().enumerate() {
                    let d = (xs[i] - c).abs();
                    if d < bd {
                        bd = d;
                        bj = j;
                    }
                }
                if assign[i] != bj {
                    assign[i] = bj;
                    changed = true;
                }
            }
            let mut sums = vec![0.0; g];
            let mut counts = vec![0usize; g];
            for i in 0..n {
                sums[assign[i]] += xs[i];
                counts[assign[i]] += 1;
            }
            for j in 0..g {
                if counts[j] > 0 {
                    centers[j] = sums[j] / counts[j] as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); g];
        for i in 0..n {
            clusters[assign[i]].push(i);
        }
        if clusters.iter().any(|c| c.len() < 2) {
            // Equal-count partition along the sorted order.
            clusters = vec![Vec::new(); g];
            for (rank, &i) in sorted.iter().enumerate() {
                clusters[(rank * g / n).min(g - 1)].push(i);
            }
        }
        let wcss: f64 = clusters
            .iter()
            .map(|c| {
                if c.is_empty() {
                    return 0.0;
                }
                let m = c.iter().map(|&i| xs[i]).sum::<f64>() / c.len() as f64;
                c.iter().map(|&i| (xs[i] - m).powi(2)).sum::<f64>()
            })
            .sum();
        if best.as_ref().map_or(true, |(b, _)| wcss < *b) {
            best = Some((wcss, clusters));
        }
    }
    best.unwrap().1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Dataset, DesignMatrix};
    use approx::assert_relative_eq;

    fn two_group_dataset() -> Dataset {
        let tau = 30.0;
        let n = 120;
        let y = DVector::from_fn(n, |i, _| match i % 6 {
            0 | 1 | 2 => 1.0 + 0.1 * (i % 7) as f64,  // low cluster
            3 | 4 => 12.0 + 0.5 * (i % 5) as f64,     // high cluster
            _ => 40.0 + 3.0 * (i % 9) as f64,         // exceedances
        });
        Dataset::new(y, DesignMatrix::intercept_only(n), tau).unwrap()
    }

    #[test]
    fn init_orders_components_and_matches_shares() {
        let ds = two_group_dataset();
        let data = FitData::from_dataset(&ds);
        let p = init_params(&data, 2, 5).unwrap();
        // Component means ascending, near the two cluster centers.
        let m0 = p.body()[(0, 0)].exp();
        let m1 = p.body()[(0, 1)].exp();
        assert!(m0 < m1);
        assert!((m0 - 1.3).abs() < 0.5, "low cluster mean {m0}");
        assert!((m1 - 13.0).abs() < 2.0, "high cluster mean {m1}");
        // Mixing intercepts reproduce the empirical shares.
        let pi = p.mixing_probs(&[1.0]);
        assert_relative_eq!(pi[0], 60.0 / 120.0, epsilon = 1e-9);
        assert_relative_eq!(pi[1], 40.0 / 120.0, epsilon = 1e-9);
        assert_relative_eq!(pi[2], 20.0 / 120.0, epsilon = 1e-9);
        assert!(p.tail_scale() > 0.0);
        assert!(p.tail_index(&[1.0]) > 0.0);
    }

    #[test]
    fn init_tail_index_matches_profile_identity() {
        let ds = two_group_dataset();
        let data = FitData::from_dataset(&ds);
        let p = init_params(&data, 1, 2).unwrap();
        let theta = p.tail_scale();
        let lsum: f64 = ds
            .tail_idx()
            .iter()
            .map(|&i| ((ds.y()[i] + theta) / (ds.tau() + theta)).ln())
            .sum();
        let want = ds.tail_idx().len() as f64 / lsum;
        assert_relative_eq!(p.tail_index(&[1.0]), want, max_relative = 1e-9);
    }

    #[test]
    fn rejects_more_components_than_body_points() {
        let y = DVector::from_vec(vec![1.0, 2.0, 9.0, 9.5]);
        let ds = Dataset::new(y, DesignMatrix::intercept_only(4), 5.0).unwrap();
        let data = FitData::from_dataset(&ds);
        assert!(init_params(&data, 3, 0).is_err());
    }

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let xs = vec![0.0, 0.1, 0.2, 5.0, 5.1, 5.2, 5.3];
        let clusters = kmeans_1d(&xs, 2, 1);
        let mut sizes: Vec<usize> = clusters.iter().map(|c| c.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![3, 4]);
    }
}
