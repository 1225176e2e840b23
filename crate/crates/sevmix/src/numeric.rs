//! Scalar numerics shared across the crate: adaptive quadrature, a Brent
//! line maximizer, a small BFGS for low-dimensional likelihoods, and the
//! inverse of the regularized incomplete gamma function.
//!
//! Special-function values (log-gamma, digamma, regularized incomplete
//! gamma, normal quantiles) come from statrs; the wrappers here only patch
//! edge cases (statrs panics at x = 0 for the incomplete gamma).

use crate::error::{Error, Result};
use statrs::distribution::ContinuousCDF;
use statrs::function::gamma as sf;

pub fn ln_gamma(a: f64) -> f64 {
    sf::ln_gamma(a)
}

pub fn digamma(a: f64) -> f64 {
    sf::digamma(a)
}

/// Regularized lower incomplete gamma P(a, x); 0 for x <= 0.
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        sf::gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x); 1 for x <= 0.
pub fn reg_upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        sf::gamma_ur(a, x)
    }
}

pub fn norm_quantile(p: f64) -> f64 {
    statrs::distribution::Normal::new(0.0, 1.0)
        .expect("unit normal")
        .inverse_cdf(p)
}

pub fn norm_cdf(x: f64) -> f64 {
    statrs::distribution::Normal::new(0.0, 1.0)
        .expect("unit normal")
        .cdf(x)
}

/// Numerically stable log(sum(exp(v))).
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

// Gauss-Kronrod 7-15 panel constants (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let f1 = f(c - x);
        let f2 = f(c + x);
        kronrod += WGK[i] * (f1 + f2);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (f1 + f2);
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
}

/// Adaptive Gauss-Kronrod integration of `f` over the finite interval [a, b].
///
/// Starts from `init_panels` equal panels and splits the worst one until the
/// summed error estimate satisfies `abs_tol + rel_tol * |integral|` or the
/// panel budget (512) is exhausted; the achieved estimate is returned either
/// way. Features narrower than the initial node spacing can be missed
/// entirely, so callers integrating spiky densities should split at known
/// structure (component means, truncation points) or raise `init_panels`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    init_panels: usize,
) -> QuadResult {
    if a == b {
        return QuadResult { value: 0.0, abs_error: 0.0 };
    }
    let k = init_panels.max(1);
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(64.max(2 * k));
    let h = (b - a) / k as f64;
    for i in 0..k {
        let pa = a + i as f64 * h;
        let pb = if i + 1 == k { b } else { a + (i + 1) as f64 * h };
        let (v, e) = gk15(&f, pa, pb);
        panels.push((pa, pb, v, e));
    }
    for _ in 0..512 {
        let value: f64 = panels.iter().map(|p| p.2).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if error <= abs_tol + rel_tol * value.abs() || !value.is_finite() {
            return QuadResult { value, abs_error: error };
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .expect("non-empty panel list");
        let (pa, pb, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (pa + pb);
        if mid <= pa || mid >= pb {
            // Interval at floating-point resolution; give up on this panel.
            let (v, _) = gk15(&f, pa, pb);
            panels.push((pa, pb, v, 0.0));
            continue;
        }
        let (v1, e1) = gk15(&f, pa, mid);
        let (v2, e2) = gk15(&f, mid, pb);
        panels.push((pa, mid, v1, e1));
        panels.push((mid, pb, v2, e2));
    }
    let value: f64 = panels.iter().map(|p| p.2).sum();
    let error: f64 = panels.iter().map(|p| p.3).sum();
    QuadResult { value, abs_error: error }
}

/// Brent maximization of a unimodal `f` on [a, b].
///
/// Returns (argmax, max). `rel_tol` should be no smaller than sqrt(machine
/// epsilon); positions are resolved to `rel_tol * |x| + tiny`.
pub fn brent_max<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, max_iter: usize) -> (f64, f64) {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let tiny = 1e-11;
    let (mut lo, mut hi) = if a < b { (a, b) } else { (b, a) };
    let mut x = lo + GOLDEN * (hi - lo);
    let mut w = x;
    let mut v = x;
    let g = |t: f64| -f(t);
    let mut fx = g(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let m = 0.5 * (lo + hi);
        let tol = rel_tol * x.abs() + tiny;
        if (x - m).abs() <= 2.0 * tol - 0.5 * (hi - lo) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol {
            // Parabolic interpolation through (x, w, v).
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (lo - x) && p < q * (hi - x) {
                d = p / q;
                let u = x + d;
                if u - lo < 2.0 * tol || hi - u < 2.0 * tol {
                    d = if x < m { tol } else { -tol };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { hi - x } else { lo - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol { x + d } else { x + if d > 0.0 { tol } else { -tol } };
        let fu = g(u);
        if fu <= fx {
            if u < x {
                hi = x;
            } else {
                lo = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx)
}

/// Central-difference gradient with per-coordinate step `h * max(1, |x_q|)`.
pub fn numeric_grad<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for q in 0..x.len() {
        let step = h * x[q].abs().max(1.0);
        xp[q] = x[q] + step;
        let fp = f(&xp);
        xp[q] = x[q] - step;
        let fm = f(&xp);
        xp[q] = x[q];
        g[q] = (fp - fm) / (2.0 * step);
    }
    g
}

/// BFGS maximization with numerical gradients and Armijo backtracking.
///
/// Meant for the small unconstrained problems in this crate (<= ~10
/// parameters, typically log-transformed to remove bounds). Returns the best
/// point seen and its objective value.
pub fn maximize_bfgs<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], max_iter: usize, grad_tol: f64) -> (Vec<f64>, f64) {
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return (x, fx);
    }
    // Inverse Hessian approximation, kept as a dense row-major matrix.
    let mut hinv = vec![0.0; dim * dim];
    for q in 0..dim {
        hinv[q * dim + q] = 1.0;
    }
    let mut g = numeric_grad(&f, &x, 1e-6);
    for _ in 0..max_iter {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < grad_tol * (1.0 + fx.abs()) {
            break;
        }
        // Ascent direction d = Hinv * g.
        let mut d = vec![0.0; dim];
        for r in 0..dim {
            d[r] = (0..dim).map(|c| hinv[r * dim + c] * g[c]).sum();
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope <= 0.0 {
            d.copy_from_slice(&g);
            slope = gnorm * gnorm;
            for q in 0..dim * dim {
                hinv[q] = 0.0;
            }
            for q in 0..dim {
                hinv[q * dim + q] = 1.0;
            }
        }
        let mut step = 1.0;
        let mut xn = x.clone();
        let mut fn_ = f64::NEG_INFINITY;
        let mut ok = false;
        for _ in 0..40 {
            for q in 0..dim {
                xn[q] = x[q] + step * d[q];
            }
            fn_ = f(&xn);
            if fn_.is_finite() && fn_ >= fx + 1e-4 * step * slope {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if !ok {
            break;
        }
        let gn = numeric_grad(&f, &xn, 1e-6);
        // BFGS update on the inverse Hessian (maximization: y = g_old - g_new).
        let s: Vec<f64> = (0..dim).map(|q| xn[q] - x[q]).collect();
        let y: Vec<f64> = (0..dim).map(|q| g[q] - gn[q]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            // Hinv = (I - rho s y^T) Hinv (I - rho y s^T) + rho s s^T
            let mut hy = vec![0.0; dim];
            for r in 0..dim {
                hy[r] = (0..dim).map(|c| hinv[r * dim + c] * y[c]).sum();
            }
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for r in 0..dim {
                for c in 0..dim {
                    hinv[r * dim + c] += -rho * (hy[r] * s[c] + s[r] * hy[c])
                        + rho * rho * yhy * s[r] * s[c]
                        + rho * s[r] * s[c];
                }
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    (x, fx)
}

/// Inverse of the regularized lower incomplete gamma: x with P(a, x) = p.
pub fn inv_reg_lower_gamma(a: f64, p: f64) -> Result<f64> {
    inv_gamma_core(a, p, 1.0 - p)
}

/// Inverse of the regularized upper incomplete gamma: x with Q(a, x) = q.
///
/// Prefer this over `inv_reg_lower_gamma(a, 1 - q)` when q is tiny; the
/// upper-tail target keeps full relative precision.
pub fn inv_reg_upper_gamma(a: f64, q: f64) -> Result<f64> {
    inv_gamma_core(a, 1.0 - q, q)
}

/// Shared inverse-gamma solver. `p` and `q` are the lower and upper targets;
/// the caller supplies whichever of the two it knows exactly, with the other
/// formed by complement. The residual is always evaluated in the smaller
/// tail, so precision survives targets within 1e-15 of either end.
fn inv_gamma_core(a: f64, p: f64, q: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::domain(format!("incomplete gamma shape must be positive, got {a}")));
    }
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("incomplete gamma target out of [0,1]: p={p}, q={q}")));
    }
    if p <= 0.0 {
        return Ok(0.0);
    }
    if q <= 0.0 {
        return Err(Error::domain("incomplete gamma inverse at mass 1 is unbounded".to_string()));
    }
    let use_lower = p <= 0.5;
    let a1 = a - 1.0;
    let gln = ln_gamma(a);
    // Starting point: Wilson-Hilferty for moderate shapes, the small-shape
    // series split otherwise (Numerical Recipes style).
    let mut x = if a > 1.0 {
        let z = if use_lower { norm_quantile(p) } else { -norm_quantile(q) };
        let t = 1.0 - 1.0 / (9.0 * a) + z * (1.0 / (9.0 * a)).sqrt();
        (a * t * t * t).max(1e-3)
    } else {
        let t = 1.0 - a * (0.253 + a * 0.12);
        if p < t {
            (p / t).powf(1.0 / a)
        } else {
            1.0 - ((1.0 - (p - t) / (1.0 - t)).max(1e-300)).ln()
        }
    };
    let residual = |x: f64| -> f64 {
        if use_lower {
            reg_lower_gamma(a, x) - p
        } else {
            q - reg_upper_gamma(a, x)
        }
    };
    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for _ in 0..64 {
        if x <= 0.0 {
            x = 0.5 * lo.max(1e-300);
        }
        let err = residual(x);
        if err > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        // Halley step using the gamma(a, 1) density as the derivative.
        let lpdf = -x + a1 * x.ln() - gln;
        let t = lpdf.exp();
        let mut xn = if t > 0.0 && t.is_finite() {
            let u = err / t;
            x - u / (1.0 - 0.5 * (u * (a1 / x - 1.0)).min(1.0))
        } else {
            f64::NAN
        };
        if !xn.is_finite() || xn <= lo || xn >= hi {
            xn = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x + 1.0 };
        }
        if (xn - x).abs() <= 1e-14 * x.abs() + 1e-300 {
            x = xn;
            break;
        }
        x = xn;
    }
    Ok(x)
}
