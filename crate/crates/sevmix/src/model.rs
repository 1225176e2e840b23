//! Parameter container for the mixture composite regression model.
//!
//! The model splices g Gamma regression components below a fixed threshold
//! tau with one Lomax tail component above it. Observation-level covariates
//! enter three ways: softmax mixing weights over the g+1 components, the log
//! of each Gamma mean, and the log of the Lomax tail index.
//!
//! The mixing coefficient matrix carries g+1 columns with the last column
//! pinned to exact zeros (the tail component is the softmax reference).
//! Every constructor and mutator preserves that pin, as well as positivity
//! of the dispersions and the tail scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRaw", into = "ModelParamsRaw")]
pub struct ModelParams {
    g: usize,
    tau: f64,
    mixing: DMatrix<f64>,      // d_mix x (g+1), last column exactly 0
    body: DMatrix<f64>,        // d_body x g, column j = log-mean coefficients
    dispersion: DVector<f64>,  // g, positive
    tail_coef: DVector<f64>,   // d_tail, log tail-index coefficients
    tail_scale: f64,           // positive
}

/// Serialization mirror; deserialization re-validates the invariants.
#[derive(Clone, Serialize, Deserialize)]
pub struct ModelParamsRaw {
    pub g: usize,
    pub tau: f64,
    pub mixing: DMatrix<f64>,
    pub body: DMatrix<f64>,
    pub dispersion: DVector<f64>,
    pub tail_coef: DVector<f64>,
    pub tail_scale: f64,
}

impl TryFrom<ModelParamsRaw> for ModelParams {
    type Error = Error;
    fn try_from(r: ModelParamsRaw) -> Result<Self> {
        ModelParams::new(r.mixing, r.body, r.dispersion, r.tail_coef, r.tail_scale, r.tau)
    }
}

impl From<ModelParams> for ModelParamsRaw {
    fn from(p: ModelParams) -> Self {
        ModelParamsRaw {
            g: p.g,
            tau: p.tau,
            mixing: p.mixing,
            body: p.body,
            dispersion: p.dispersion,
            tail_coef: p.tail_coef,
            tail_scale: p.tail_scale,
        }
    }
}

impl ModelParams {
    /// Builds a parameter set from a full mixing matrix (g+1 columns whose
    /// last column must already be zero).
    pub fn new(
        mixing: DMatrix<f64>,
        body: DMatrix<f64>,
        dispersion: DVector<f64>,
        tail_coef: DVector<f64>,
        tail_scale: f64,
        tau: f64,
    ) -> Result<Self> {
        let g = body.ncols();
        if g == 0 {
            return Err(Error::domain("at least one body component is required"));
        }
        if mixing.ncols() != g + 1 {
            return Err(Error::domain(format!(
                "mixing matrix must have g+1 = {} columns, got {}",
                g + 1,
                mixing.ncols()
            )));
        }
        if mixing.column(g).iter().any(|&v| v != 0.0) {
            return Err(Error::domain("mixing reference column (last) must be exactly zero"));
        }
        if dispersion.len() != g {
            return Err(Error::domain("dispersion length must equal the number of body components"));
        }
        if dispersion.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::domain("dispersions must be positive and finite"));
        }
        if !(tail_scale > 0.0) || !tail_scale.is_finite() {
            return Err(Error::domain("tail scale must be positive and finite"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::domain("threshold tau must be positive and finite"));
        }
        let finite = mixing.iter().all(|v| v.is_finite())
            && body.iter().all(|v| v.is_finite())
            && tail_coef.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("coefficients must be finite"));
        }
        Ok(ModelParams { g, tau, mixing, body, dispersion, tail_coef, tail_scale })
    }

    /// Builds a parameter set from the g free mixing columns; the zero
    /// reference column is appended internally.
    pub fn from_free(
        mixing_free: DMatrix<f64>,
        body: DMatrix<f64>,
        dispersion: DVector<f64>,
        tail_coef: DVector<f64>,
        tail_scale: f64,
        tau: f64,
    ) -> Result<Self> {
        let g = mixing_free.ncols();
        let d = mixing_free.nrows();
        let mut mixing = DMatrix::zeros(d, g + 1);
        mixing.view_mut((0, 0), (d, g)).copy_from(&mixing_free);
        Self::new(mixing, body, dispersion, tail_coef, tail_scale, tau)
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn body(&self) -> &DMatrix<f64> {
        &self.body
    }

    pub fn dispersion(&self) -> &DVector<f64> {
        &self.dispersion
    }

    pub fn tail_coef(&self) -> &DVector<f64> {
        &self.tail_coef
    }

    pub fn tail_scale(&self) -> f64 {
        self.tail_scale
    }

    /// (d_mix, d_body, d_tail) design dimensions.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.mixing.nrows(), self.body.nrows(), self.tail_coef.len())
    }

    /// Replaces a free mixing column (j < g; the reference column is not
    /// assignable).
    pub fn set_mixing_col(&mut self, j: usize, col: &DVector<f64>) {
        assert!(j < self.g, "reference mixing column is pinned to zero");
        self.mixing.set_column(j, col);
    }

    pub fn set_body_col(&mut self, j: usize, col: &DVector<f64>) {
        self.body.set_column(j, col);
    }

    pub fn set_dispersion(&mut self, j: usize, value: f64) {
        assert!(value > 0.0 && value.is_finite());
        self.dispersion[j] = value;
    }

    pub fn set_tail_coef(&mut self, coef: DVector<f64>) {
        assert_eq!(coef.len(), self.tail_coef.len());
        self.tail_coef = coef;
    }

    pub fn set_tail_scale(&mut self, value: f64) {
        assert!(value > 0.0 && value.is_finite());
        self.tail_scale = value;
    }

    /// Softmax mixing probabilities for one covariate row; length g+1.
    pub fn mixing_probs(&self, x_mix: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.g + 1];
        self.mixing_probs_into(x_mix, &mut out);
        out
    }

    pub fn mixing_probs_into(&self, x_mix: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x_mix.len(), self.mixing.nrows());
        debug_assert_eq!(out.len(), self.g + 1);
        let mut m = f64::NEG_INFINITY;
        for j in 0..=self.g {
            let lp = dot(self.mixing.column(j).as_slice(), x_mix);
            out[j] = lp;
            m = m.max(lp);
        }
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }

    /// Log-mean linear predictor of body component j.
    pub fn body_linpred(&self, j: usize, x_body: &[f64]) -> f64 {
        dot(self.body.column(j).as_slice(), x_body)
    }

    /// Fitted Gamma mean of body component j (before truncation).
    pub fn body_mean(&self, j: usize, x_body: &[f64]) -> f64 {
        self.body_linpred(j, x_body).exp()
    }

    /// Fitted Lomax tail index for one covariate row.
    pub fn tail_index(&self, x_tail: &[f64]) -> f64 {
        dot(self.tail_coef.as_slice(), x_tail).exp()
    }

    /// Reorders body components (and their mixing columns) by `perm`, which
    /// maps new position -> old index. The reference mixing column stays put.
    pub fn permute_components(&mut self, perm: &[usize]) {
        assert_eq!(perm.len(), self.g);
        let mut seen = vec![false; self.g];
        for &p in perm {
            assert!(p < self.g && !seen[p], "perm must be a permutation of 0..g");
            seen[p] = true;
        }
        let old_mix = self.mixing.clone();
        let old_body = self.body.clone();
        let old_disp = self.dispersion.clone();
        for (new_j, &old_j) in perm.iter().enumerate() {
            self.mixing.set_column(new_j, &old_mix.column(old_j).clone_owned());
            self.body.set_column(new_j, &old_body.column(old_j).clone_owned());
            self.dispersion[new_j] = old_disp[old_j];
        }
    }

    /// Sorts components ascending by the provided per-component key (the
    /// fitter passes average fitted subgroup means). Returns the applied
    /// permutation (new position -> old index).
    pub fn sort_components_by(&mut self, key: &[f64]) -> Vec<usize> {
        assert_eq!(key.len(), self.g);
        let mut perm: Vec<usize> = (0..self.g).collect();
        perm.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
        self.permute_components(&perm);
        perm
    }

    /// Flat parameter count of the free entries (mixing excludes the pinned
    /// reference column): used for raw, pre-selection bookkeeping.
    pub fn n_free_params(&self) -> usize {
        self.mixing.nrows() * self.g + self.body.nrows() * self.g + self.g + self.tail_coef.len() + 1
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}
