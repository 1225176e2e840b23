//! Covariate schema, design-matrix encoding, and the observation container.
//!
//! Categorical variables use reference-level dummy coding: the first listed
//! level is the reference and each remaining level gets one 0/1 column.
//! Ordinal and nominal variables encode identically; the distinction only
//! changes which penalty contrasts the selection stage builds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Ordinal,
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
    /// Category labels in declared order; first is the reference level.
    /// Empty for continuous variables.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub variables: Vec<Covariate>,
}

impl CovariateSchema {
    pub fn new(variables: Vec<Covariate>) -> Result<Self> {
        let s = CovariateSchema { variables };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: CovariateSchema =
            serde_json::from_str(text).map_err(|e| Error::schema(format!("invalid schema JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variables {
            if v.name.is_empty() {
                return Err(Error::schema("variable name must be nonempty"));
            }
            if v.name == "y" {
                return Err(Error::schema("variable name 'y' is reserved for the response"));
            }
            if !names.insert(&v.name) {
                return Err(Error::schema(format!("duplicate variable name '{}'", v.name)));
            }
            match v.kind {
                CovariateKind::Continuous => {
                    if !v.levels.is_empty() {
                        return Err(Error::schema(format!(
                            "continuous variable '{}' must not declare levels",
                            v.name
                        )));
                    }
                }
                CovariateKind::Ordinal | CovariateKind::Nominal => {
                    if v.levels.len() < 2 {
                        return Err(Error::schema(format!(
                            "categorical variable '{}' needs at least 2 levels",
                            v.name
                        )));
                    }
                    let mut seen = std::collections::BTreeSet::new();
                    for l in &v.levels {
                        if !seen.insert(l) {
                            return Err(Error::schema(format!(
                                "duplicate level '{}' in variable '{}'",
                                l, v.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Encoded design dimension: intercept plus one column per continuous
    /// variable and per non-reference level.
    pub fn n_columns(&self) -> usize {
        1 + self
            .variables
            .iter()
            .map(|v| match v.kind {
                CovariateKind::Continuous => 1,
                _ => v.levels.len() - 1,
            })
            .sum::<usize>()
    }

    pub fn column_origins(&self) -> Vec<ColumnOrigin> {
        let mut cols = vec![ColumnOrigin::Intercept];
        for (vi, v) in self.variables.iter().enumerate() {
            match v.kind {
                CovariateKind::Continuous => cols.push(ColumnOrigin::Continuous { var: vi }),
                _ => {
                    for li in 1..v.levels.len() {
                        cols.push(ColumnOrigin::Level { var: vi, level: li });
                    }
                }
            }
        }
        cols
    }
}

/// Where an encoded design column came from, for reporting and for building
/// penalty contrasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnOrigin {
    Intercept,
    Continuous { var: usize },
    /// Dummy column for `level` (index into the variable's level list, >= 1).
    Level { var: usize, level: usize },
    /// Column formed by pooling original columns (reduced designs).
    Pooled { label: String },
}

impl ColumnOrigin {
    pub fn label(&self, schema: &CovariateSchema) -> String {
        match self {
            ColumnOrigin::Intercept => "intercept".to_string(),
            ColumnOrigin::Continuous { var } => schema.variables[*var].name.clone(),
            ColumnOrigin::Level { var, level } => {
                let v = &schema.variables[*var];
                format!("{}={}", v.name, v.levels[*level])
            }
            ColumnOrigin::Pooled { label } => label.clone(),
        }
    }
}

/// One raw covariate cell prior to encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Number(f64),
    Level(String),
}

/// Encoded design matrix. Stored transposed (columns = observations) so one
/// observation's covariate vector is a contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    xt: DMatrix<f64>, // dim x n
    origins: Vec<ColumnOrigin>,
}

impl DesignMatrix {
    pub fn from_parts(xt: DMatrix<f64>, origins: Vec<ColumnOrigin>) -> Self {
        assert_eq!(xt.nrows(), origins.len());
        DesignMatrix { xt, origins }
    }

    /// Intercept-only design for n observations.
    pub fn intercept_only(n: usize) -> Self {
        DesignMatrix {
            xt: DMatrix::from_element(1, n, 1.0),
            origins: vec![ColumnOrigin::Intercept],
        }
    }

    pub fn n(&self) -> usize {
        self.xt.ncols()
    }

    pub fn dim(&self) -> usize {
        self.xt.nrows()
    }

    pub fn origins(&self) -> &[ColumnOrigin] {
        &self.origins
    }

    /// Covariate vector of observation i as a contiguous slice.
    pub fn obs(&self, i: usize) -> &[f64] {
        let d = self.xt.nrows();
        &self.xt.as_slice()[i * d..(i + 1) * d]
    }

    /// X * coef for all observations.
    pub fn linear_predictor(&self, coef: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        self.linear_predictor_into(coef, out.as_mut_slice());
        out
    }

    pub fn linear_predictor_into(&self, coef: &[f64], out: &mut [f64]) {
        assert_eq!(coef.len(), self.dim());
        assert_eq!(out.len(), self.n());
        for i in 0..self.n() {
            out[i] = crate::model::dot(self.obs(i), coef);
        }
    }

    /// Observation counts per level of variable `var` (index 0 = reference),
    /// reconstructed from the dummy columns.
    pub fn level_counts(&self, var: usize, n_levels: usize) -> Vec<f64> {
        let mut counts = vec![0.0; n_levels];
        let mut dummy_sum = 0.0;
        for (c, origin) in self.origins.iter().enumerate() {
            if let ColumnOrigin::Level { var: v, level } = origin {
                if *v == var {
                    let s: f64 = self.xt.row(c).iter().sum();
                    counts[*level] = s;
                    dummy_sum += s;
                }
            }
        }
        counts[0] = self.n() as f64 - dummy_sum;
        counts
    }

    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        let mut xt = DMatrix::zeros(self.dim(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            xt.set_column(k, &self.xt.column(i).clone_owned());
        }
        DesignMatrix { xt, origins: self.origins.clone() }
    }
}

/// Encodes raw rows against a schema. Row length must match the variable
/// count; categorical cells must name a declared level.
pub fn encode_design(schema: &CovariateSchema, rows: &[Vec<RawValue>]) -> Result<DesignMatrix> {
    schema.validate()?;
    let origins = schema.column_origins();
    let dim = origins.len();
    let mut xt = DMatrix::zeros(dim, rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != schema.variables.len() {
            return Err(Error::data(format!(
                "row {i}: expected {} covariate values, got {}",
                schema.variables.len(),
                row.len()
            )));
        }
        let mut col = xt.column_mut(i);
        col[0] = 1.0;
        let mut c = 1;
        for (v, value) in schema.variables.iter().zip(row) {
            match (v.kind, value) {
                (CovariateKind::Continuous, RawValue::Number(x)) => {
                    if !x.is_finite() {
                        return Err(Error::data(format!(
                            "row {i}, variable '{}': non-finite value",
                            v.name
                        )));
                    }
                    col[c] = *x;
                    c += 1;
                }
                (CovariateKind::Continuous, RawValue::Level(_)) => {
                    return Err(Error::data(format!(
                        "row {i}, variable '{}': expected a number",
                        v.name
                    )));
                }
                (_, RawValue::Level(l)) => {
                    let li = v
                        .levels
                        .iter()
                        .position(|x| x == l)
                        .ok_or_else(|| {
                            Error::data(format!("row {i}, variable '{}': unknown level '{l}'", v.name))
                        })?;
                    for k in 1..v.levels.len() {
                        col[c] = if k == li { 1.0 } else { 0.0 };
                        c += 1;
                    }
                }
                (_, RawValue::Number(_)) => {
                    return Err(Error::data(format!(
                        "row {i}, variable '{}': expected a level label",
                        v.name
                    )));
                }
            }
        }
    }
    Ok(DesignMatrix { xt, origins })
}

/// Observations plus the shared design and the body/tail split at tau.
/// Ties (y == tau) belong to the body.
#[derive(Clone, Debug)]
pub struct Dataset {
    y: DVector<f64>,
    x: DesignMatrix,
    tau: f64,
    body_idx: Vec<usize>,
    tail_idx: Vec<usize>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DesignMatrix, tau: f64) -> Result<Self> {
        if y.len() != x.n() {
            return Err(Error::data(format!(
                "response length {} does not match design rows {}",
                y.len(),
                x.n()
            )));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::data("threshold tau must be positive and finite"));
        }
        let mut body_idx = Vec::new();
        let mut tail_idx = Vec::new();
        for (i, &yi) in y.iter().enumerate() {
            if !(yi > 0.0) || !yi.is_finite() {
                return Err(Error::data(format!("observation {i}: response must be positive, got {yi}")));
            }
            if yi <= tau {
                body_idx.push(i);
            } else {
                tail_idx.push(i);
            }
        }
        Ok(Dataset { y, x, tau, body_idx, tail_idx })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DesignMatrix {
        &self.x
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_body(&self) -> usize {
        self.body_idx.len()
    }

    pub fn n_tail(&self) -> usize {
        self.tail_idx.len()
    }

    pub fn body_idx(&self) -> &[usize] {
        &self.body_idx
    }

    pub fn tail_idx(&self) -> &[usize] {
        &self.tail_idx
    }

    pub fn is_body(&self, i: usize) -> bool {
        self.y[i] <= self.tau
    }

    /// Same observations under a new threshold; the split is recomputed.
    pub fn with_tau(&self, tau: f64) -> Result<Dataset> {
        Dataset::new(self.y.clone(), self.x.clone(), tau)
    }

    /// Row subset (used by cross-validation folds).
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        Dataset::new(y, self.x.select_rows(idx), self.tau)
    }
}

/// Renders covariate rows plus responses as CSV: one column per schema
/// variable in declared order, then `y`. Inverse of [`parse_data_csv`].
pub fn data_csv(schema: &CovariateSchema, rows: &[Vec<RawValue>], y: &DVector<f64>) -> String {
    let mut out = String::new();
    for v in &schema.variables {
        out.push_str(&v.name);
        out.push(',');
    }
    out.push_str("y\n");
    for (i, row) in rows.iter().enumerate() {
        for value in row {
            match value {
                RawValue::Number(x) => out.push_str(&x.to_string()),
                RawValue::Level(s) => out.push_str(s),
            }
            out.push(',');
        }
        out.push_str(&y[i].to_string());
        out.push('\n');
    }
    out
}

/// Reads a data CSV: a header row naming every schema variable plus `y`
/// (any column order, '.' decimal separator), then one record per line.
/// Lines starting with '#' are ignored. Returns the raw covariate rows in
/// schema order and the responses.
pub fn parse_data_csv(
    schema: &CovariateSchema,
    text: &str,
) -> Result<(Vec<Vec<RawValue>>, DVector<f64>)> {
    schema.validate()?;
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::data("data file is empty"))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::data(format!("data file has no column '{name}'")))
    };
    let var_cols: Vec<usize> = schema
        .variables
        .iter()
        .map(|v| col(&v.name))
        .collect::<Result<_>>()?;
    let y_col = col("y")?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(Error::data(format!(
                "record {}: expected {} fields, got {}",
                lineno + 1,
                header.len(),
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(schema.variables.len());
        for (v, &c) in schema.variables.iter().zip(&var_cols) {
            let field = fields[c];
            row.push(match v.kind {
                CovariateKind::Continuous => RawValue::Number(field.parse().map_err(|_| {
                    Error::data(format!(
                        "record {}: variable '{}' is not a number: '{field}'",
                        lineno + 1,
                        v.name
                    ))
                })?),
                _ => RawValue::Level(field.to_string()),
            });
        }
        rows.push(row);
        y.push(fields[y_col].parse().map_err(|_| {
            Error::data(format!("record {}: response is not a number: '{}'", lineno + 1, fields[y_col]))
        })?);
    }
    Ok((rows, DVector::from_vec(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo_schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            Covariate {
                name: "age".into(),
                kind: CovariateKind::Continuous,
                levels: vec![],
            },
            Covariate {
                name: "veh".into(),
                kind: CovariateKind::Nominal,
                levels: vec!["A".into(), "B".into(), "C".into()],
            },
            Covariate {
                name: "bm".into(),
                kind: CovariateKind::Ordinal,
                levels: vec!["low".into(), "mid".into(), "high".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn encoding_layout_matches_reference_coding() {
        let schema = demo_schema();
        assert_eq!(schema.n_columns(), 1 + 1 + 2 + 2);
        let rows = vec![
            vec![
                RawValue::Number(0.3),
                RawValue::Level("B".into()),
                RawValue::Level("low".into()),
            ],
            vec![
                RawValue::Number(-1.2),
                RawValue::Level("A".into()),
                RawValue::Level("high".into()),
            ],
        ];
        let x = encode_design(&schema, &rows).unwrap();
        assert_eq!(x.obs(0), &[1.0, 0.3, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(x.obs(1), &[1.0, -1.2, 0.0, 0.0, 0.0, 1.0]);
        let labels: Vec<String> = x.origins().iter().map(|o| o.label(&schema)).collect();
        assert_eq!(labels, vec!["intercept", "age", "veh=B", "veh=C", "bm=mid", "bm=high"]);
    }

    #[test]
    fn encoding_rejects_bad_cells() {
        let schema = demo_schema();
        let unknown = vec![vec![
            RawValue::Number(0.0),
            RawValue::Level("Z".into()),
            RawValue::Level("low".into()),
        ]];
        assert!(encode_design(&schema, &unknown).is_err());
        let wrong_kind = vec![vec![
            RawValue::Level("A".into()),
            RawValue::Level("A".into()),
            RawValue::Level("low".into()),
        ]];
        assert!(encode_design(&schema, &wrong_kind).is_err());
        let short = vec![vec![RawValue::Number(0.0)]];
        assert!(encode_design(&schema, &short).is_err());
    }

    #[test]
    fn schema_validation_catches_duplicates() {
        assert!(CovariateSchema::new(vec![
            Covariate { name: "a".into(), kind: CovariateKind::Continuous, levels: vec![] },
            Covariate { name: "a".into(), kind: CovariateKind::Continuous, levels: vec![] },
        ])
        .is_err());
        assert!(CovariateSchema::new(vec![Covariate {
            name: "v".into(),
            kind: CovariateKind::Nominal,
            levels: vec!["x".into(), "x".into()],
        }])
        .is_err());
        assert!(CovariateSchema::new(vec![Covariate {
            name: "v".into(),
            kind: CovariateKind::Ordinal,
            levels: vec!["only".into()],
        }])
        .is_err());
    }

    #[test]
    fn schema_json_roundtrip() {
        let schema = demo_schema();
        let js = schema.to_json();
        let back = CovariateSchema::from_json(&js).unwrap();
        assert_eq!(schema, back);
        assert!(CovariateSchema::from_json("{\"variables\": [{\"name\": \"\"}]}").is_err());
    }

    #[test]
    fn level_counts_recover_from_dummies() {
        let schema = demo_schema();
        let rows = vec![
            vec![RawValue::Number(0.0), RawValue::Level("A".into()), RawValue::Level("mid".into())],
            vec![RawValue::Number(0.0), RawValue::Level("B".into()), RawValue::Level("mid".into())],
            vec![RawValue::Number(0.0), RawValue::Level("B".into()), RawValue::Level("high".into())],
        ];
        let x = encode_design(&schema, &rows).unwrap();
        assert_eq!(x.level_counts(1, 3), vec![1.0, 2.0, 0.0]);
        assert_eq!(x.level_counts(2, 3), vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn dataset_splits_at_tau_with_ties_to_body() {
        let x = DesignMatrix::intercept_only(4);
        let y = DVector::from_vec(vec![0.5, 2.0, 2.0000001, 10.0]);
        let d = Dataset::new(y, x, 2.0).unwrap();
        assert_eq!(d.body_idx(), &[0, 1]);
        assert_eq!(d.tail_idx(), &[2, 3]);
        assert!(d.is_body(1));
        let d2 = d.with_tau(0.6).unwrap();
        assert_eq!(d2.n_body(), 1);
        assert_eq!(d2.n_tail(), 3);
    }

    #[test]
    fn dataset_rejects_nonpositive_response() {
        let x = DesignMatrix::intercept_only(2);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        assert!(Dataset::new(y, x, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn dummy_rows_are_valid_indicator_blocks(
            levels in prop::collection::vec(0usize..4, 1..40),
            xs in prop::collection::vec(-10.0f64..10.0, 1..40),
        ) {
            let n = levels.len().min(xs.len());
            let schema = CovariateSchema::new(vec![
                Covariate { name: "x".into(), kind: CovariateKind::Continuous, levels: vec![] },
                Covariate {
                    name: "c".into(),
                    kind: CovariateKind::Nominal,
                    levels: (0..4).map(|k| format!("L{k}")).collect(),
                },
            ]).unwrap();
            let rows: Vec<Vec<RawValue>> = (0..n)
                .map(|i| vec![RawValue::Number(xs[i]), RawValue::Level(format!("L{}", levels[i]))])
                .collect();
            let x = encode_design(&schema, &rows).unwrap();
            for i in 0..n {
                let obs = x.obs(i);
                prop_assert_eq!(obs[0], 1.0);
                prop_assert_eq!(obs[1], xs[i]);
                let dummies = &obs[2..5];
                let ones = dummies.iter().filter(|&&v| v == 1.0).count();
                let zeros = dummies.iter().filter(|&&v| v == 0.0).count();
                prop_assert_eq!(ones + zeros, 3);
                // The dummy block decodes back to the input level.
                let decoded = if ones == 0 {
                    0
                } else {
                    2 + dummies.iter().position(|&v| v == 1.0).unwrap() - 1
                };
                prop_assert_eq!(decoded, levels[i]);
            }
        }
    }
}
