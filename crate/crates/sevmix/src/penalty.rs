//! Group-fusion penalties over coefficient-matrix contrasts.
//!
//! Each penalized model part (mixing, body means, tail index) carries a
//! coefficient matrix Theta whose rows follow the design columns. For every
//! covariate we penalize contrast norms ||c' Theta||: a continuous variable
//! contributes its single row, an ordinal variable its successive level
//! differences, a nominal variable all pairwise level differences. Driving a
//! norm to zero removes the variable or fuses the two levels.
//!
//! Norms carry a small ridge (||v||_eps = sqrt(||v||^2 + eps)) so every
//! penalty is differentiable; the quadratic majorizer built around a point is
//! then an exact upper bound, which the M-step relies on.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::schema::{CovariateKind, CovariateSchema, DesignMatrix};

/// Ridge inside contrast norms.
pub const NORM_EPS: f64 = 1e-10;

/// Ceiling for adaptive weights when the pilot contrast is (numerically) zero.
pub const WEIGHT_CAP: f64 = 1e8;

/// sqrt(||v||^2 + NORM_EPS).
pub fn eps_norm_sq(sq: f64) -> f64 {
    (sq + NORM_EPS).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Penalty {
    Lasso,
    Scad { a: f64 },
}

impl Penalty {
    pub const SCAD_A: f64 = 3.7;

    pub fn scad() -> Self {
        Penalty::Scad { a: Self::SCAD_A }
    }

    /// Penalty at norm value psi with effective rate lambda and sample-size
    /// multiplier n_mult (the part's observation count).
    pub fn value(&self, psi: f64, lambda: f64, n_mult: f64) -> f64 {
        debug_assert!(psi >= 0.0 && lambda >= 0.0);
        match *self {
            Penalty::Lasso => n_mult * lambda * psi,
            Penalty::Scad { a } => {
                if psi <= lambda {
                    n_mult * lambda * psi
                } else if psi <= a * lambda {
                    n_mult * (2.0 * a * lambda * psi - psi * psi - lambda * lambda)
                        / (2.0 * (a - 1.0))
                } else {
                    n_mult * lambda * lambda * (a + 1.0) / 2.0
                }
            }
        }
    }

    /// d value / d psi. Non-negative and non-increasing in psi, which makes
    /// the quadratic majorizer an upper bound.
    pub fn deriv(&self, psi: f64, lambda: f64, n_mult: f64) -> f64 {
        debug_assert!(psi >= 0.0 && lambda >= 0.0);
        match *self {
            Penalty::Lasso => n_mult * lambda,
            Penalty::Scad { a } => {
                if psi <= lambda {
                    n_mult * lambda
                } else {
                    n_mult * (a * lambda - psi).max(0.0) / (a - 1.0)
                }
            }
        }
    }
}

/// One penalized contrast: a sparse row-combination of the coefficient
/// matrix, plus its (standardization x adaptive) weight.
#[derive(Clone, Debug)]
pub struct Contrast {
    /// (design row index, coefficient) pairs; rows index the D dimension.
    pub terms: Vec<(usize, f64)>,
    pub var_index: usize,
    /// For categorical variables: the two level indices being contrasted
    /// (0 = reference). None for continuous variables.
    pub levels: Option<(usize, usize)>,
    pub label: String,
    pub weight: f64,
}

impl Contrast {
    /// c' theta_col for a single coefficient column.
    pub fn dot_col(&self, theta: &DMatrix<f64>, col: usize) -> f64 {
        self.terms.iter().map(|&(r, c)| c * theta[(r, col)]).sum()
    }

    /// Squared euclidean norm of c' Theta across the given columns.
    pub fn norm_sq(&self, theta: &DMatrix<f64>, cols: usize) -> f64 {
        (0..cols).map(|j| self.dot_col(theta, j).powi(2)).sum()
    }
}

/// Builds the contrast list for one schema (weights start at 1).
pub fn variable_contrasts(schema: &CovariateSchema) -> Vec<Contrast> {
    let mut out = Vec::new();
    let mut col = 1; // 0 is the intercept
    for (vi, v) in schema.variables.iter().enumerate() {
        match v.kind {
            CovariateKind::Continuous => {
                out.push(Contrast {
                    terms: vec![(col, 1.0)],
                    var_index: vi,
                    levels: None,
                    label: v.name.clone(),
                    weight: 1.0,
                });
                col += 1;
            }
            CovariateKind::Ordinal => {
                // Successive differences; level 0 is the reference with
                // implicit zero coefficients, so the first contrast is the
                // bare level-1 row.
                let m = v.levels.len();
                for li in 1..m {
                    let terms = if li == 1 {
                        vec![(col, 1.0)]
                    } else {
                        vec![(col + li - 1, 1.0), (col + li - 2, -1.0)]
                    };
                    out.push(Contrast {
                        terms,
                        var_index: vi,
                        levels: Some((li - 1, li)),
                        label: format!("{}: {}-{}", v.name, v.levels[li], v.levels[li - 1]),
                        weight: 1.0,
                    });
                }
                col += m - 1;
            }
            CovariateKind::Nominal => {
                // All pairwise differences, including pairs with the
                // (implicit-zero) reference level.
                let m = v.levels.len();
                for hi in 1..m {
                    for lo in 0..hi {
                        let terms = if lo == 0 {
                            vec![(col + hi - 1, 1.0)]
                        } else {
                            vec![(col + hi - 1, 1.0), (col + lo - 1, -1.0)]
                        };
                        out.push(Contrast {
                            terms,
                            var_index: vi,
                            levels: Some((lo, hi)),
                            label: format!("{}: {}-{}", v.name, v.levels[hi], v.levels[lo]),
                            weight: 1.0,
                        });
                    }
                }
                col += m - 1;
            }
        }
    }
    out
}

/// Penalty plan for one model part: contrasts, penalty family and the part's
/// sample-size multiplier.
#[derive(Clone, Debug)]
pub struct PenaltyPlan {
    pub contrasts: Vec<Contrast>,
    pub penalty: Penalty,
    pub n_mult: f64,
    pub dim: usize,
}

impl PenaltyPlan {
    pub fn new(schema: &CovariateSchema, penalty: Penalty, n_mult: f64) -> Self {
        PenaltyPlan {
            contrasts: variable_contrasts(schema),
            penalty,
            n_mult,
            dim: schema.n_columns(),
        }
    }

    /// A plan with no contrasts (intercept-only or unpenalized fits).
    pub fn empty(penalty: Penalty, n_mult: f64, dim: usize) -> Self {
        PenaltyPlan { contrasts: Vec::new(), penalty, n_mult, dim }
    }

    /// Multiplies each contrast weight by the balance factor
    /// ((m - 1) / r) * sqrt((n_p1 + n_p2) / n) computed from the part's
    /// design; continuous contrasts keep weight 1.
    pub fn standardize(&mut self, schema: &CovariateSchema, design: &DesignMatrix) {
        let n = design.n() as f64;
        let mut counts: Vec<Option<Vec<f64>>> = vec![None; schema.variables.len()];
        let mut r_per_var = vec![0usize; schema.variables.len()];
        for c in &self.contrasts {
            r_per_var[c.var_index] += 1;
        }
        for c in &mut self.contrasts {
            let Some((l1, l2)) = c.levels else { continue };
            let v = &schema.variables[c.var_index];
            let cts = counts[c.var_index].get_or_insert_with(|| {
                design.level_counts(c.var_index, v.levels.len())
            });
            let m = v.levels.len() as f64;
            let r = r_per_var[c.var_index] as f64;
            let share = (cts[l1] + cts[l2]) / n;
            c.weight *= (m - 1.0) / r * share.sqrt();
        }
    }

    /// Multiplies each weight by 1 / ||c' Theta_pilot||, capped at
    /// WEIGHT_CAP when the pilot contrast is numerically zero.
    pub fn apply_adaptive(&mut self, pilot: &DMatrix<f64>, cols: usize) {
        for c in &mut self.contrasts {
            let norm = c.norm_sq(pilot, cols).sqrt();
            let w = if norm > 0.0 { 1.0 / norm } else { f64::INFINITY };
            if w > WEIGHT_CAP {
                log::warn!(
                    "adaptive weight for contrast '{}' capped at {:.0e} (pilot norm {:.3e})",
                    c.label,
                    WEIGHT_CAP,
                    norm
                );
                c.weight *= WEIGHT_CAP;
            } else {
                c.weight *= w;
            }
        }
    }

    /// Total penalty at coefficient matrix Theta (using its first `cols`
    /// columns) and rate lambda.
    pub fn value(&self, theta: &DMatrix<f64>, cols: usize, lambda: f64) -> f64 {
        self.contrasts
            .iter()
            .map(|c| {
                let psi = eps_norm_sq(c.norm_sq(theta, cols));
                self.penalty.value(psi, c.weight * lambda, self.n_mult)
            })
            .sum()
    }

    /// Quadratic majorizer of the penalty frozen at Theta*: for each contrast
    /// the map t -> offset + coef * t with t = ||c' Theta||^2 dominates the
    /// exact penalty, touching it at Theta*.
    pub fn majorize(&self, theta: &DMatrix<f64>, cols: usize, lambda: f64) -> PenaltyMajorizer {
        let mut coefs = Vec::with_capacity(self.contrasts.len());
        let mut constant = 0.0;
        for c in &self.contrasts {
            let t_star = c.norm_sq(theta, cols);
            let psi_star = eps_norm_sq(t_star);
            let slope = self.penalty.deriv(psi_star, c.weight * lambda, self.n_mult);
            let coef = slope / (2.0 * psi_star);
            constant += self.penalty.value(psi_star, c.weight * lambda, self.n_mult) - coef * t_star;
            coefs.push(coef);
        }
        PenaltyMajorizer { coefs, constant }
    }
}

/// Majorizer coefficients aligned with a plan's contrast list.
#[derive(Clone, Debug)]
pub struct PenaltyMajorizer {
    /// Quadratic coefficient per contrast: penalty' (psi*) / (2 psi*).
    pub coefs: Vec<f64>,
    /// Constant making the majorizer touch the penalty at the expansion point.
    pub constant: f64,
}

impl PenaltyMajorizer {
    /// Majorizer value at Theta.
    pub fn value(&self, plan: &PenaltyPlan, theta: &DMatrix<f64>, cols: usize) -> f64 {
        self.constant
            + plan
                .contrasts
                .iter()
                .zip(&self.coefs)
                .map(|(c, &q)| q * c.norm_sq(theta, cols))
                .sum::<f64>()
    }

    /// One column's share of the quadratic part (no constant); the majorizer
    /// is separable across coefficient columns.
    pub fn value_col(&self, plan: &PenaltyPlan, theta: &DMatrix<f64>, col: usize) -> f64 {
        plan.contrasts
            .iter()
            .zip(&self.coefs)
            .map(|(c, &q)| q * c.dot_col(theta, col).powi(2))
            .sum()
    }

    /// Adds the majorizer's gradient with respect to one coefficient column
    /// into `grad`: sum over contrasts of 2 q (c' theta_j) c.
    pub fn add_grad_col(
        &self,
        plan: &PenaltyPlan,
        theta: &DMatrix<f64>,
        col: usize,
        grad: &mut [f64],
    ) {
        for (c, &q) in plan.contrasts.iter().zip(&self.coefs) {
            if q == 0.0 {
                continue;
            }
            let dot = c.dot_col(theta, col);
            for &(r, w) in &c.terms {
                grad[r] += 2.0 * q * dot * w;
            }
        }
    }

    /// Adds the (column-independent) Hessian 2 sum_k q_k c_k c_k' into `hess`.
    pub fn add_hess(&self, plan: &PenaltyPlan, hess: &mut DMatrix<f64>) {
        for (c, &q) in plan.contrasts.iter().zip(&self.coefs) {
            if q == 0.0 {
                continue;
            }
            for &(r1, w1) in &c.terms {
                for &(r2, w2) in &c.terms {
                    hess[(r1, r2)] += 2.0 * q * w1 * w2;
                }
            }
        }
    }
}

/// Reference grid of penalty rates shared by all tuning criteria.
pub fn lambda_grid() -> Vec<f64> {
    (0..17).map(|k| 0.1 * f64::powi(2.0, k)).collect()
}
