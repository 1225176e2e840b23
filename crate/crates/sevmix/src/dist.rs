//! Distribution layer: mean-dispersion Gamma, Lomax, their truncated forms,
//! and the spliced mixture density built from them.
//!
//! Conventions:
//! - Gamma(mean mu, dispersion phi) has shape 1/phi and scale phi*mu, so the
//!   variance is phi*mu^2.
//! - Lomax(scale theta, index eta) has survival (theta/(y+theta))^eta; the
//!   tail component conditions this on y > tau, keeping the original scale.
//! - The spliced density puts softmax weight pi_j on Gamma component j
//!   truncated to (0, tau] and weight pi_{g+1} on the Lomax truncated to
//!   (tau, inf). Ties y == tau belong to the body.
//!
//! Any conditioning event with probability below 1e-12 is refused with a
//! degenerate-truncation error rather than silently dividing by it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{
    integrate, inv_reg_lower_gamma, inv_reg_upper_gamma, ln_gamma, log_sum_exp, reg_lower_gamma,
    reg_upper_gamma,
};

/// Probability mass below which a truncation is considered degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Gamma distribution in mean-dispersion form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaMd {
    pub mean: f64,
    pub dispersion: f64,
}

impl GammaMd {
    pub fn new(mean: f64, dispersion: f64) -> Result<Self> {
        if !(mean > 0.0 && mean.is_finite()) || !(dispersion > 0.0 && dispersion.is_finite()) {
            return Err(Error::domain(format!(
                "gamma mean and dispersion must be positive and finite, got mu={mean}, phi={dispersion}"
            )));
        }
        Ok(GammaMd { mean, dispersion })
    }

    pub fn shape(&self) -> f64 {
        1.0 / self.dispersion
    }

    pub fn scale(&self) -> f64 {
        self.dispersion * self.mean
    }

    pub fn logpdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let a = self.shape();
        let s = self.scale();
        (a - 1.0) * y.ln() - y / s - a * s.ln() - ln_gamma(a)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        reg_lower_gamma(self.shape(), y / self.scale())
    }

    pub fn sf(&self, y: f64) -> f64 {
        reg_upper_gamma(self.shape(), y / self.scale())
    }

    /// CDF of the size-biased (shape + 1, same scale) Gamma. Appears in all
    /// truncated-mean identities: integral of t*pdf(t) over (0, y) equals
    /// mean * cdf_shifted_shape(y).
    pub fn cdf_shifted_shape(&self, y: f64) -> f64 {
        reg_lower_gamma(self.shape() + 1.0, y / self.scale())
    }

    pub fn sf_shifted_shape(&self, y: f64) -> f64 {
        reg_upper_gamma(self.shape() + 1.0, y / self.scale())
    }

    /// E[Y | Y <= tau].
    pub fn trunc_mean_below(&self, tau: f64) -> Result<f64> {
        let mass = self.cdf(tau);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateTruncation { mass, context: "gamma below tau" });
        }
        Ok(self.mean * self.cdf_shifted_shape(tau) / mass)
    }

    /// E[Y | Y > tau].
    pub fn trunc_mean_above(&self, tau: f64) -> Result<f64> {
        let mass = self.sf(tau);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateTruncation { mass, context: "gamma above tau" });
        }
        Ok(self.mean * self.sf_shifted_shape(tau) / mass)
    }

    /// E[ln Y | Y > tau] by adaptive quadrature (no closed form exists).
    ///
    /// The integral is split at shape + tau/scale + 1: the left piece runs in
    /// log coordinates (tames the u^{a-1} spike when the shape is below 1),
    /// the right piece maps (c, inf) onto (0, 1).
    pub fn trunc_mean_log_above(&self, tau: f64, rel_tol: f64) -> Result<f64> {
        let a = self.shape();
        let s = self.scale();
        let t = tau / s;
        let mass = reg_upper_gamma(a, t);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateTruncation { mass, context: "gamma above tau (log moment)" });
        }
        let gln = ln_gamma(a);
        let c = t + a + 1.0;
        // Integrand of the left piece after u = t e^v: ln(u) u^a e^{-u} / Gamma(a).
        let left = integrate(
            |v: f64| {
                let lu = t.ln() + v;
                let lw = a * lu - lu.exp() - gln;
                if lw < -745.0 {
                    0.0
                } else {
                    lu * lw.exp()
                }
            },
            0.0,
            (c / t).ln(),
            rel_tol,
            1e-300,
            6,
        );
        // Right piece after u = c / (1 - r).
        let right = integrate(
            |r: f64| {
                let u = c / (1.0 - r);
                if !u.is_finite() {
                    return 0.0;
                }
                let lu = u.ln();
                let lw = (a - 1.0) * lu - u - gln + c.ln() - 2.0 * (1.0 - r).ln();
                if lw < -745.0 {
                    0.0
                } else {
                    lu * lw.exp()
                }
            },
            0.0,
            1.0,
            rel_tol,
            1e-300,
            6,
        );
        Ok(s.ln() + (left.value + right.value) / mass)
    }

    /// Unconditional draw by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                return Ok(self.scale() * inv_reg_lower_gamma(self.shape(), u)?);
            }
        }
    }

    /// Draw conditioned on Y <= tau.
    pub fn sample_below<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<f64> {
        let mass = self.cdf(tau);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateTruncation { mass, context: "gamma below tau (sampling)" });
        }
        let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let y = self.scale() * inv_reg_lower_gamma(self.shape(), mass * u)?;
        Ok(y.min(tau))
    }

    /// Draw conditioned on Y > tau. The upper-tail inverse keeps precision
    /// even when the conditioning mass is tiny.
    pub fn sample_above<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<f64> {
        let mass = self.sf(tau);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateTruncation { mass, context: "gamma above tau (sampling)" });
        }
        loop {
            let u: f64 = 1.0 - rng.gen::<f64>();
            let y = self.scale() * inv_reg_upper_gamma(self.shape(), mass * u)?;
            if y > tau {
                return Ok(y);
            }
        }
    }
}

/// Lomax (Pareto type II) distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lomax {
    pub scale: f64,
    pub index: f64,
}

impl Lomax {
    pub fn new(scale: f64, index: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !(index > 0.0 && index.is_finite()) {
            return Err(Error::domain(format!(
                "lomax scale and index must be positive and finite, got theta={scale}, eta={index}"
            )));
        }
        Ok(Lomax { scale, index })
    }

    pub fn logpdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return f64::NEG_INFINITY;
        }
        self.index.ln() + self.index * self.scale.ln() - (self.index + 1.0) * (y + self.scale).ln()
    }

    pub fn sf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 1.0;
        }
        (self.index * (self.scale.ln() - (y + self.scale).ln())).exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        -(self.index * (self.scale.ln() - (y + self.scale).ln())).exp_m1()
    }

    /// Log-density conditioned on Y > tau, still on the original scale.
    pub fn trunc_logpdf(&self, y: f64, tau: f64) -> Result<f64> {
        if y <= tau {
            return Err(Error::domain(format!(
                "truncated lomax evaluated at y={y} <= tau={tau}"
            )));
        }
        Ok(self.index.ln() + self.index * (tau + self.scale).ln()
            - (self.index + 1.0) * (y + self.scale).ln())
    }

    /// Survival of the truncated-above-tau law: P(Y > y | Y > tau).
    pub fn trunc_sf(&self, y: f64, tau: f64) -> f64 {
        if y <= tau {
            return 1.0;
        }
        (self.index * ((tau + self.scale).ln() - (y + self.scale).ln())).exp()
    }

    pub fn trunc_cdf(&self, y: f64, tau: f64) -> f64 {
        1.0 - self.trunc_sf(y, tau)
    }

    /// E[Y | Y > tau] = tau + (theta + tau)/(eta - 1); infinite for eta <= 1.
    pub fn trunc_mean_above(&self, tau: f64) -> f64 {
        if self.index <= 1.0 {
            f64::INFINITY
        } else {
            tau + (self.scale + tau) / (self.index - 1.0)
        }
    }

    /// Draw conditioned on Y > tau by inverting the survival function.
    pub fn sample_above<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> f64 {
        loop {
            let u: f64 = 1.0 - rng.gen::<f64>();
            // S(y)/S(tau) = u  =>  y = (tau + theta) u^{-1/eta} - theta.
            let y = (tau + self.scale) * u.powf(-1.0 / self.index) - self.scale;
            if y > tau {
                return y;
            }
        }
    }
}

/// Per-observation covariate rows for the three model parts. All three often
/// alias the same encoded row; reduced models pass distinct ones.
#[derive(Clone, Copy, Debug)]
pub struct CovRow<'a> {
    pub mix: &'a [f64],
    pub body: &'a [f64],
    pub tail: &'a [f64],
}

impl<'a> CovRow<'a> {
    pub fn shared(x: &'a [f64]) -> Self {
        CovRow { mix: x, body: x, tail: x }
    }
}

fn body_component(p: &ModelParams, x: CovRow, j: usize) -> Result<GammaMd> {
    GammaMd::new(p.body_mean(j, x.body), p.dispersion()[j])
}

fn tail_component(p: &ModelParams, x: CovRow) -> Result<Lomax> {
    Lomax::new(p.tail_scale(), p.tail_index(x.tail))
}

/// Checks every component's truncation mass and returns (body CDFs at tau,
/// tail survival at tau).
fn truncation_masses(p: &ModelParams, x: CovRow) -> Result<(Vec<f64>, f64)> {
    let tau = p.tau();
    let mut body_mass = Vec::with_capacity(p.g());
    for j in 0..p.g() {
        let gamma = body_component(p, x, j)?;
        let mass = gamma.cdf(tau);
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateComponent { index: j, mass });
        }
        body_mass.push(mass);
    }
    let lomax = tail_component(p, x)?;
    let tail_mass = lomax.sf(tau);
    if tail_mass < DEGENERATE_MASS {
        return Err(Error::DegenerateTruncation { mass: tail_mass, context: "lomax above tau" });
    }
    Ok((body_mass, tail_mass))
}

/// Log-density of the spliced mixture at y for one covariate row.
pub fn composite_logpdf(p: &ModelParams, x: CovRow, y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::domain(format!("composite density requires y > 0, got {y}")));
    }
    let (body_mass, _) = truncation_masses(p, x)?;
    let pi = p.mixing_probs(x.mix);
    let tau = p.tau();
    if y <= tau {
        let mut terms = Vec::with_capacity(p.g());
        for j in 0..p.g() {
            let gamma = body_component(p, x, j)?;
            terms.push(pi[j].ln() + gamma.logpdf(y) - body_mass[j].ln());
        }
        Ok(log_sum_exp(&terms))
    } else {
        let lomax = tail_component(p, x)?;
        Ok(pi[p.g()].ln() + lomax.trunc_logpdf(y, tau)?)
    }
}

pub fn composite_pdf(p: &ModelParams, x: CovRow, y: f64) -> Result<f64> {
    Ok(composite_logpdf(p, x, y)?.exp())
}

/// CDF of the spliced mixture; continuous, with value 1 - pi_tail at tau.
pub fn composite_cdf(p: &ModelParams, x: CovRow, y: f64) -> Result<f64> {
    if !y.is_finite() && y > 0.0 {
        return Ok(1.0);
    }
    if y <= 0.0 {
        return Ok(0.0);
    }
    let (body_mass, _) = truncation_masses(p, x)?;
    let pi = p.mixing_probs(x.mix);
    let tau = p.tau();
    if y <= tau {
        let mut acc = 0.0;
        for j in 0..p.g() {
            let gamma = body_component(p, x, j)?;
            acc += pi[j] * gamma.cdf(y) / body_mass[j];
        }
        Ok(acc)
    } else {
        let lomax = tail_component(p, x)?;
        let body_total: f64 = pi[..p.g()].iter().sum();
        Ok(body_total + pi[p.g()] * lomax.trunc_cdf(y, tau))
    }
}

/// Mean of the spliced mixture. Returns f64::INFINITY when the tail index is
/// at or below 1 and the tail has positive weight (heavy-tail signal, not an
/// error).
pub fn composite_mean(p: &ModelParams, x: CovRow) -> Result<f64> {
    let (body_mass, _) = truncation_masses(p, x)?;
    let pi = p.mixing_probs(x.mix);
    let tau = p.tau();
    let mut acc = 0.0;
    for j in 0..p.g() {
        let gamma = body_component(p, x, j)?;
        acc += pi[j] * gamma.mean * gamma.cdf_shifted_shape(tau) / body_mass[j];
    }
    let lomax = tail_component(p, x)?;
    let tail_mean = lomax.trunc_mean_above(tau);
    if pi[p.g()] > 0.0 && tail_mean.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(acc + pi[p.g()] * tail_mean)
}

/// Draws one observation; returns (y, component index), where index g means
/// the tail. Body draws satisfy y <= tau, tail draws y > tau.
pub fn sample_composite_labeled<R: Rng + ?Sized>(
    p: &ModelParams,
    x: CovRow,
    rng: &mut R,
) -> Result<(f64, usize)> {
    truncation_masses(p, x)?;
    let pi = p.mixing_probs(x.mix);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut comp = p.g();
    for (j, &w) in pi.iter().enumerate() {
        acc += w;
        if u < acc {
            comp = j;
            break;
        }
    }
    let tau = p.tau();
    let y = if comp < p.g() {
        body_component(p, x, comp)?.sample_below(tau, rng)?
    } else {
        tail_component(p, x)?.sample_above(tau, rng)
    };
    Ok((y, comp))
}

pub fn sample_composite<R: Rng + ?Sized>(p: &ModelParams, x: CovRow, rng: &mut R) -> Result<f64> {
    Ok(sample_composite_labeled(p, x, rng)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, STREAM_SIMULATE};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn quad_pdf_moment(g: &GammaMd, lo: f64, hi: f64, power_of_y: i32) -> f64 {
        integrate(
            |y| {
                if y <= 0.0 {
                    0.0
                } else {
                    y.powi(power_of_y) * g.logpdf(y).exp()
                }
            },
            lo,
            hi,
            1e-12,
            1e-300,
            64,
        )
        .value
    }

    #[test]
    fn gamma_logpdf_closed_values() {
        // mu=2, phi=0.5 -> shape 2, scale 1: pdf(1) = 1*e^{-1}.
        let g = GammaMd::new(2.0, 0.5).unwrap();
        assert_relative_eq!(g.logpdf(1.0), -1.0, epsilon = 1e-12);
        // Exponential case mu=1, phi=1: pdf(y) = e^{-y}.
        let e = GammaMd::new(1.0, 1.0).unwrap();
        assert_relative_eq!(e.logpdf(0.7), -0.7, epsilon = 1e-12);
        assert_eq!(g.logpdf(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn gamma_cdf_matches_quadrature() {
        for &(mu, phi, y) in &[(1.0, 1.0, 1.0), (2.5, 0.3, 4.0), (0.8, 2.0, 0.5), (5.0, 0.05, 5.5)] {
            let g = GammaMd::new(mu, phi).unwrap();
            let q = quad_pdf_moment(&g, 0.0, y, 0);
            assert_relative_eq!(g.cdf(y), q, max_relative = 1e-9);
        }
        let e = GammaMd::new(1.0, 1.0).unwrap();
        assert_relative_eq!(e.cdf(1.0), 1.0 - (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn shifted_shape_cdf_is_size_biased_mass() {
        // integral of y*pdf over (0, tau) = mean * cdf_shifted_shape(tau).
        for &(mu, phi, tau) in &[(1.0, 1.0, 1.0), (3.0, 0.4, 2.0), (0.6, 1.7, 1.2)] {
            let g = GammaMd::new(mu, phi).unwrap();
            let q = quad_pdf_moment(&g, 0.0, tau, 1);
            assert_relative_eq!(g.mean * g.cdf_shifted_shape(tau), q, max_relative = 1e-9);
        }
    }

    #[test]
    fn truncated_means_match_quadrature() {
        for &(mu, phi, tau) in &[(1.0, 1.0, 1.0), (2.0, 0.5, 3.0), (0.7, 1.4, 0.4), (4.0, 0.2, 2.5)] {
            let g = GammaMd::new(mu, phi).unwrap();
            let below = quad_pdf_moment(&g, 0.0, tau, 1) / g.cdf(tau);
            assert_relative_eq!(g.trunc_mean_below(tau).unwrap(), below, max_relative = 1e-9);
            let hi = mu * (20.0 + 40.0 * phi.max(1.0));
            let above = quad_pdf_moment(&g, tau, hi, 1) / (g.cdf(hi) - g.cdf(tau));
            assert_relative_eq!(g.trunc_mean_above(tau).unwrap(), above, max_relative = 1e-6);
        }
        // Exponential memorylessness: E[Y | Y > tau] = tau + mu, exact.
        let e = GammaMd::new(1.3, 1.0).unwrap();
        assert_relative_eq!(e.trunc_mean_above(2.0).unwrap(), 3.3, epsilon = 1e-10);
        // The spec's sub-threshold example value.
        let u = GammaMd::new(1.0, 1.0).unwrap();
        let expect = (1.0 - 2.0 * (-1.0f64).exp()) / (1.0 - (-1.0f64).exp());
        assert_relative_eq!(u.trunc_mean_below(1.0).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn truncated_log_mean_matches_direct_quadrature() {
        for &(mu, phi, tau) in &[(1.0, 1.0, 1.0), (2.0, 0.5, 3.0), (0.9, 2.5, 0.2), (3.0, 0.08, 3.5)] {
            let g = GammaMd::new(mu, phi).unwrap();
            let hi = tau + mu * (30.0 + 60.0 * phi.max(1.0));
            let raw = integrate(
                |y| y.ln() * g.logpdf(y).exp(),
                tau,
                hi,
                1e-12,
                1e-300,
                128,
            )
            .value;
            let direct = raw / g.sf(tau);
            let val = g.trunc_mean_log_above(tau, 1e-10).unwrap();
            assert_relative_eq!(val, direct, max_relative = 1e-7);
        }
    }

    #[test]
    fn degenerate_truncations_are_refused() {
        let g = GammaMd::new(1.0, 1.0).unwrap();
        // tau so far out that the upper mass vanishes.
        assert!(matches!(
            g.trunc_mean_above(100.0),
            Err(Error::DegenerateTruncation { .. })
        ));
        // tau so small that the lower mass vanishes (shape 10 near zero).
        let h = GammaMd::new(1.0, 0.1).unwrap();
        assert!(matches!(
            h.trunc_mean_below(1e-8),
            Err(Error::DegenerateTruncation { .. })
        ));
    }

    #[test]
    fn lomax_closed_values() {
        let l = Lomax::new(1.0, 2.0).unwrap();
        // pdf(1) = 2*1/(2^3) = 0.25.
        assert_relative_eq!(l.logpdf(1.0), 0.25f64.ln(), epsilon = 1e-12);
        let m = Lomax::new(1.0, 1.0).unwrap();
        assert_relative_eq!(m.cdf(1.0), 0.5, epsilon = 1e-12);
        assert_relative_eq!(l.cdf(3.0) + l.sf(3.0), 1.0, epsilon = 1e-12);
        // Truncated mean: theta=1, eta=2, tau=2 -> 2 + 3/1 = 5.
        assert_relative_eq!(l.trunc_mean_above(2.0), 5.0, epsilon = 1e-12);
        assert_eq!(Lomax::new(1.0, 1.0).unwrap().trunc_mean_above(2.0), f64::INFINITY);
    }

    #[test]
    fn lomax_truncated_density_normalizes_and_matches_mean() {
        let l = Lomax::new(2.0, 2.5).unwrap();
        let tau = 3.0;
        // Map (tau, inf) to (0, 1) via y = tau + (tau+theta) r/(1-r).
        let mass = integrate(
            |r: f64| {
                let w = r / (1.0 - r);
                let y = tau + (tau + l.scale) * w;
                let jac = (tau + l.scale) / ((1.0 - r) * (1.0 - r));
                l.trunc_logpdf(y, tau).unwrap().exp() * jac
            },
            0.0,
            1.0,
            1e-12,
            1e-300,
            32,
        );
        assert_relative_eq!(mass.value, 1.0, max_relative = 1e-9);
        let mean = integrate(
            |r: f64| {
                let w = r / (1.0 - r);
                let y = tau + (tau + l.scale) * w;
                let jac = (tau + l.scale) / ((1.0 - r) * (1.0 - r));
                y * l.trunc_logpdf(y, tau).unwrap().exp() * jac
            },
            0.0,
            1.0,
            1e-12,
            1e-300,
            32,
        );
        assert_relative_eq!(mean.value, l.trunc_mean_above(tau), max_relative = 1e-8);
    }

    #[test]
    fn lomax_trunc_logpdf_rejects_body_side() {
        let l = Lomax::new(1.0, 2.0).unwrap();
        assert!(l.trunc_logpdf(1.0, 2.0).is_err());
    }

    fn demo_params(g_body: usize) -> ModelParams {
        // Intercept + one continuous covariate.
        let d = 2;
        let mixing_free = DMatrix::from_fn(d, g_body, |r, c| match (r, c) {
            (0, 0) => 0.6,
            (0, _) => 0.1,
            (1, 0) => -0.4,
            (1, _) => 0.2,
            _ => 0.0,
        });
        let body = DMatrix::from_fn(d, g_body, |r, c| match r {
            0 => 0.2 + 0.9 * c as f64,
            _ => 0.3 - 0.1 * c as f64,
        });
        let dispersion = DVector::from_fn(g_body, |j, _| 0.5 / (1.0 + j as f64));
        let tail_coef = DVector::from_vec(vec![0.5, 0.2]);
        ModelParams::from_free(mixing_free, body, dispersion, tail_coef, 2.0, 6.0).unwrap()
    }

    #[test]
    fn composite_logpdf_matches_hand_assembly() {
        let p = demo_params(1);
        let xrow = [1.0, 0.5];
        let x = CovRow::shared(&xrow);
        let pi = p.mixing_probs(&xrow);
        let gamma = GammaMd::new(p.body_mean(0, &xrow), p.dispersion()[0]).unwrap();
        let lomax = Lomax::new(p.tail_scale(), p.tail_index(&xrow)).unwrap();

        let y_body = 1.7;
        let want = (pi[0] * (gamma.logpdf(y_body).exp() / gamma.cdf(p.tau()))).ln();
        assert_relative_eq!(composite_logpdf(&p, x, y_body).unwrap(), want, max_relative = 1e-12);

        let y_tail = 9.0;
        let want_tail = pi[1].ln() + lomax.trunc_logpdf(y_tail, p.tau()).unwrap();
        assert_relative_eq!(composite_logpdf(&p, x, y_tail).unwrap(), want_tail, max_relative = 1e-12);
    }

    #[test]
    fn composite_pdf_normalizes_and_mean_matches_quadrature() {
        for g_body in [1usize, 2, 3] {
            let p = demo_params(g_body);
            let xrow = [1.0, -0.3];
            let x = CovRow::shared(&xrow);
            let tau = p.tau();
            let theta = p.tail_scale();
            let eta = p.tail_index(&xrow);
            assert!(eta > 4.0 / 3.0, "test transform needs eta above 4/3");
            let body_mass = integrate(
                |y| if y <= 0.0 { 0.0 } else { composite_pdf(&p, x, y).unwrap() },
                0.0,
                tau,
                1e-12,
                1e-300,
                64,
            );
            // Map (tau, inf) to (0, 1) by y = (tau+theta) v^{-4/eta} - theta,
            // which cancels the power-law decay; integrands stay bounded.
            let tail = |f: &dyn Fn(f64) -> f64| {
                integrate(
                    |v: f64| {
                        let y = (tau + theta) * v.powf(-4.0 / eta) - theta;
                        if !y.is_finite() || y <= tau {
                            return 0.0;
                        }
                        let jac = (4.0 / eta) * (tau + theta) * v.powf(-4.0 / eta - 1.0);
                        f(y) * jac
                    },
                    0.0,
                    1.0,
                    1e-12,
                    1e-300,
                    32,
                )
            };
            let tail_mass = tail(&|y| composite_pdf(&p, x, y).unwrap());
            assert_relative_eq!(body_mass.value + tail_mass.value, 1.0, epsilon = 1e-8);

            let body_mean = integrate(
                |y| if y <= 0.0 { 0.0 } else { y * composite_pdf(&p, x, y).unwrap() },
                0.0,
                tau,
                1e-12,
                1e-300,
                64,
            );
            let tail_mean = tail(&|y| y * composite_pdf(&p, x, y).unwrap());
            let mean = composite_mean(&p, x).unwrap();
            assert_relative_eq!(mean, body_mean.value + tail_mean.value, max_relative = 1e-6);
        }
    }

    #[test]
    fn composite_cdf_is_continuous_and_matches_quadrature() {
        let p = demo_params(2);
        let xrow = [1.0, 0.8];
        let x = CovRow::shared(&xrow);
        let tau = p.tau();
        let pi = p.mixing_probs(&xrow);
        let body_total: f64 = pi[..2].iter().sum();

        assert_relative_eq!(composite_cdf(&p, x, tau).unwrap(), body_total, epsilon = 1e-12);
        let just_above = composite_cdf(&p, x, tau * (1.0 + 1e-12)).unwrap();
        assert_relative_eq!(just_above, body_total, epsilon = 1e-9);
        assert_relative_eq!(composite_cdf(&p, x, f64::INFINITY).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(composite_cdf(&p, x, 0.0).unwrap(), 0.0);

        for &y in &[0.5, 2.0, 5.9, 6.5, 30.0] {
            let q = integrate(
                |t| if t <= 0.0 { 0.0 } else { composite_pdf(&p, x, t).unwrap() },
                0.0,
                y,
                1e-11,
                1e-300,
                64,
            );
            assert_relative_eq!(composite_cdf(&p, x, y).unwrap(), q.value, max_relative = 1e-7);
        }
    }

    #[test]
    fn composite_mean_infinite_when_tail_index_at_one() {
        let mixing_free = DMatrix::from_column_slice(1, 1, &[-30.0]); // pi_tail ~ 1
        let body = DMatrix::from_column_slice(1, 1, &[0.0]);
        let p = ModelParams::from_free(
            mixing_free,
            body,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.0]), // eta = 1
            1.0,
            1e-6,
        )
        .unwrap();
        let xrow = [1.0];
        assert_eq!(composite_mean(&p, CovRow::shared(&xrow)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn composite_mean_near_zero_tau_approaches_lomax_mean() {
        // With nearly all weight on the tail and tau -> 0, the mean tends to
        // theta/(eta-1): here 1/(2-1) = 1.
        let mixing_free = DMatrix::from_column_slice(1, 1, &[-30.0]);
        let body = DMatrix::from_column_slice(1, 1, &[0.0]);
        let p = ModelParams::from_free(
            mixing_free,
            body,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0f64.ln()]),
            1.0,
            1e-8,
        )
        .unwrap();
        let xrow = [1.0];
        assert_relative_eq!(composite_mean(&p, CovRow::shared(&xrow)).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn composite_rejects_degenerate_components() {
        // Body mean far above tau: almost no gamma mass below tau.
        let mixing_free = DMatrix::from_column_slice(1, 1, &[0.0]);
        let body = DMatrix::from_column_slice(1, 1, &[12.0]); // mu = e^12, phi small
        let p = ModelParams::from_free(
            mixing_free,
            body,
            DVector::from_vec(vec![0.01]),
            DVector::zeros(1),
            1.0,
            1.0,
        )
        .unwrap();
        let xrow = [1.0];
        match composite_logpdf(&p, CovRow::shared(&xrow), 0.5) {
            Err(Error::DegenerateComponent { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected degenerate component, got {other:?}"),
        }
    }

    #[test]
    fn samples_respect_support_split_and_distribution() {
        let p = demo_params(2);
        let xrow = [1.0, 0.4];
        let x = CovRow::shared(&xrow);
        let mut rng = substream(42, STREAM_SIMULATE);
        let n = 20_000;
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let (y, comp) = sample_composite_labeled(&p, x, &mut rng).unwrap();
            if comp < p.g() {
                assert!(y <= p.tau(), "body draw above tau");
            } else {
                assert!(y > p.tau(), "tail draw at or below tau");
            }
            ys.push(y);
        }
        ys.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (i, &y) in ys.iter().enumerate() {
            let f = composite_cdf(&p, x, y).unwrap();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((f - lo).abs()).max((f - hi).abs());
        }
        assert!(ks < 0.015, "KS statistic {ks} too large for n={n}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = demo_params(2);
        let xrow = [1.0, 0.4];
        let x = CovRow::shared(&xrow);
        let draw = |seed: u64| -> Vec<f64> {
            let mut rng = substream(seed, STREAM_SIMULATE);
            (0..50).map(|_| sample_composite(&p, x, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn gamma_truncated_means_bracket_tau(
            mu in 0.2f64..5.0,
            phi in 0.05f64..3.0,
            frac in 0.05f64..0.95,
        ) {
            let g = GammaMd::new(mu, phi).unwrap();
            // Put tau at a quantile so neither side degenerates.
            let tau = g.scale() * inv_reg_lower_gamma(g.shape(), frac).unwrap();
            if let (Ok(below), Ok(above)) = (g.trunc_mean_below(tau), g.trunc_mean_above(tau)) {
                proptest::prop_assert!(below <= tau * (1.0 + 1e-12));
                proptest::prop_assert!(above >= tau * (1.0 - 1e-12));
                // Law of total expectation.
                let total = g.cdf(tau) * below + g.sf(tau) * above;
                proptest::prop_assert!((total - mu).abs() <= 1e-8 * mu);
            }
        }

        #[test]
        fn composite_cdf_monotone(y1 in 0.01f64..40.0, y2 in 0.01f64..40.0) {
            let p = demo_params(2);
            let xrow = [1.0, 0.1];
            let x = CovRow::shared(&xrow);
            let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
            let a = composite_cdf(&p, x, lo).unwrap();
            let b = composite_cdf(&p, x, hi).unwrap();
            proptest::prop_assert!(a <= b + 1e-12);
        }
    }
}
